"""Training losses, the noise schedule, the training loop and evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import diffgraph as dg
from ._validation import check_probability, check_rng
from .ebm import EnergyNetwork
from .liegroup import GraspPose, compose, pose_distance, se3_exp, stack_poses, zeta_score
from .splatrep import Observation, SceneInput, fit_from_views, scene_input_from_estimate
from .world import (
    NoGraspError,
    WorldScene,
    gen_scene,
    grasp_oracle,
    render_depth_image,
    sample_labeled_grasps,
    sdf,
    view_on_sphere,
)

log = logging.getLogger(__name__)


# -- schedule -----------------------------------------------------------------------


def noise_schedule(k, sigma: float = 0.5):
    """``sigma_k = (sigma^(2k) - 1) / ln(sigma)``."""
    k_arr = np.asarray(k, dtype=float)
    if np.any((k_arr < 0) | (k_arr > 1)) or not np.all(np.isfinite(k_arr)):
        raise ValueError("k must lie in [0, 1]")
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    out = (sigma ** (2 * k_arr) - 1.0) / math.log(sigma)
    return float(out) if np.ndim(k) == 0 else out


@dataclass
class TrainConfig:
    steps: int = 10_000
    batch_size: int = 24
    lr: float = 1e-3
    lambda_ap: float = 1.0
    lambda_sdf: float = 0.1
    sigma: float = 0.5
    n_levels: int = 0  # 0: continuous k per grasp
    k_min: float = 1e-3
    k_sampling: str = "log"
    k_cut: float = 0.01
    n_bins: int = 21
    bin_width: float = 0.05
    seed: int = 0
    use_failure_dsm: bool = True
    learn_temperature: bool = True
    dsm_weighting: str = "sigma2"
    ap_batch_size: int = 24
    sdf_points: int = 64
    hidden: tuple = (32, 128, 64)
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_ap < 0 or self.lambda_sdf < 0:
            raise ValueError("loss weights must be >= 0")
        if self.bin_width <= 0:
            raise ValueError("bin width must be > 0")
        if abs((self.n_bins - 1) * self.bin_width - 1.0) > 1e-9:
            raise ValueError("bins must tile [0, 1]: (n_bins - 1) * bin_width == 1")
        if not 0 < self.k_min < self.k_cut <= 1:
            raise ValueError("need 0 < k_min < k_cut <= 1")
        if self.k_sampling not in ("uniform", "log"):
            raise ValueError("k_sampling must be 'uniform' or 'log'")
        if self.n_levels < 0 or self.n_levels == 1:
            raise ValueError("n_levels must be 0 (continuous) or >= 2")
        if self.dsm_weighting not in ("none", "sigma2"):
            raise ValueError("dsm_weighting must be 'none' or 'sigma2'")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        self.hidden = tuple(self.hidden)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# -- data ------------------------------------------------------------------------------


@dataclass
class TrainingScene:
    world: WorldScene
    scene: SceneInput
    success: GraspPose
    failure: GraspPose
    observations: list = field(default_factory=list)


def observe(world: WorldScene, views) -> list:
    return [Observation(v, render_depth_image(world, v)) for v in views]


def random_views(center, n, rng, radius=(0.3, 0.5), elevation=(np.pi / 9, 4 * np.pi / 9)):
    out = []
    az0 = rng.uniform(0, 2 * np.pi)
    for i in range(n):
        az = az0 + 2 * np.pi * i / n + rng.uniform(-0.4, 0.4)
        out.append(view_on_sphere(center, rng.uniform(*radius), az, rng.uniform(*elevation)))
    return out


def make_training_scene(seed: int, n_grasps=256, n_views=(2, 4), n_clutter=(2, 5), fit_steps=0, rng=None):
    """Procedural scene, its reconstruction from rendered views, and oracle-labeled grasps."""
    rng = check_rng(seed if rng is None else rng)
    world = gen_scene(seed, int(rng.integers(n_clutter[0], n_clutter[1] + 1)))
    views = random_views(world.target.center, int(rng.integers(n_views[0], n_views[1] + 1)), rng)
    obs = observe(world, views)
    est = fit_from_views(obs, steps=fit_steps)
    scene = scene_input_from_estimate(est)
    grasps = sample_labeled_grasps(world, n_grasps, rng)
    succ = [g.pose for g in grasps if g.label]
    fail = [g.pose for g in grasps if not g.label]
    if not succ or not fail:
        raise NoGraspError(f"scene {seed} lacks one of the labels")
    return TrainingScene(world, scene, stack_poses(succ), stack_poses(fail), obs)


def make_training_set(seeds, **kw) -> list:
    out = []
    for s in seeds:
        try:
            out.append(make_training_scene(int(s), **kw))
        except (NoGraspError, RuntimeError) as exc:
            log.info("skipping scene %s: %s", s, exc)
    return out


@dataclass
class TrainBatch:
    scene: SceneInput
    clean_S: GraspPose
    clean_F: GraspPose
    k_S: np.ndarray
    k_F: np.ndarray
    eps_S: np.ndarray
    eps_F: np.ndarray
    sigma: float = 0.5
    ap_poses: GraspPose | None = None
    ap_labels: np.ndarray | None = None
    ap_k: np.ndarray | None = None
    sdf_points: np.ndarray | None = None
    sdf_targets: np.ndarray | None = None

    def perturbed(self, branch):
        """``g exp(sigma_k eps)`` reproduced from the recorded draws."""
        g, k, eps = (self.clean_S, self.k_S, self.eps_S) if branch == "S" else (self.clean_F, self.k_F, self.eps_F)
        s = noise_schedule(k, self.sigma)
        return compose(g, se3_exp(s[:, None] * eps)), s


def _pick(poses: GraspPose, n, rng) -> GraspPose:
    return poses[rng.integers(0, len(poses), size=n)]


def draw_levels(cfg: TrainConfig, n, rng, hi=1.0) -> np.ndarray:
    """Noise levels ``k`` in ``[k_min, hi]``: uniform or log-uniform, continuous or on an ``n_levels`` ladder."""
    if cfg.n_levels:
        ladder = (np.geomspace if cfg.k_sampling == "log" else np.linspace)(cfg.k_min, hi, cfg.n_levels)
        return ladder[rng.integers(0, cfg.n_levels, size=n)]
    if cfg.k_sampling == "log":
        return np.exp(rng.uniform(np.log(cfg.k_min), np.log(hi), n))
    return rng.uniform(cfg.k_min, hi, n)


def sample_batch(ts: TrainingScene, cfg: TrainConfig, rng) -> TrainBatch:
    half = cfg.batch_size // 2
    gS, gF = _pick(ts.success, half, rng), _pick(ts.failure, cfg.batch_size - half, rng)
    kS = draw_levels(cfg, half, rng)
    kF = draw_levels(cfg, cfg.batch_size - half, rng)
    eS = rng.standard_normal((half, 6))
    eF = rng.standard_normal((cfg.batch_size - half, 6))
    b = TrainBatch(ts.scene, gS, gF, kS, kF, eS, eF, cfg.sigma)
    if cfg.lambda_ap > 0:
        # the AP term only sees low-noise grasps, k < k_cut; drawn here directly
        h = cfg.ap_batch_size // 2
        pS, pF = _pick(ts.success, h, rng), _pick(ts.failure, cfg.ap_batch_size - h, rng)
        poses = GraspPose(np.concatenate([pS.rotation, pF.rotation]), np.concatenate([pS.translation, pF.translation]))
        k = rng.uniform(cfg.k_min, cfg.k_cut, cfg.ap_batch_size)
        s = noise_schedule(k, cfg.sigma)
        b.ap_poses = compose(poses, se3_exp(s[:, None] * rng.standard_normal((cfg.ap_batch_size, 6))))
        b.ap_labels = np.arange(cfg.ap_batch_size) < h
        b.ap_k = k
    if cfg.lambda_sdf > 0:
        b.sdf_points = sdf_reference_points(ts, cfg.sdf_points, rng)
        b.sdf_targets = sdf(ts.world, b.sdf_points)
    return b


def sdf_reference_points(ts: TrainingScene, n, rng, spread=0.01):
    """Points scattered around foreground rows (near the target surface)."""
    base = ts.scene.fg_points[rng.integers(0, ts.scene.n_fg, size=n)]
    return base + spread * rng.standard_normal((n, 3))


# -- losses ------------------------------------------------------------------------------


def dsm_loss_branch(net: EnergyNetwork, batch: TrainBatch, branch: str, P=None, weighting="sigma2"):
    """Mean of ``w(sigma_k) |dE/dgamma(g_hat) + score_zeta(g_hat | g)|^2``."""
    clean = batch.clean_S if branch == "S" else batch.clean_F
    if len(clean) == 0:
        raise ValueError(f"empty batch for branch {branch}")
    g_hat, s = batch.perturbed(branch)
    target = zeta_score(g_hat, clean, s)
    built = net.build(g_hat, batch.scene, s, tangent=True, P=P)
    grad = net.pose_grad_tensor(built, branch)
    res = dg.square(grad + target)
    per = dg.reduce_sum(res, axis=1)
    if weighting == "sigma2":
        per = per * (s**2)
    return dg.mean(per)


def soft_bin_weights(probs, n_bins=21, width=0.05):
    """Triangular assignment ``max(0, 1 - |p - b_j| / width)`` as a graph tensor (n, bins)."""
    centers = np.linspace(0.0, 1.0, n_bins)
    p = dg.reshape(dg.as_tensor(probs), (-1, 1))
    return dg.relu(1.0 - dg.absolute(p - centers[None, :]) * (1.0 / width))


def soft_average_precision(probs, labels, n_bins=21, width=0.05):
    """Differentiable AP of scores ``probs`` for boolean ``labels`` (graph tensor)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = labels.sum()
    if n_pos == 0:
        return None
    w = soft_bin_weights(probs, n_bins, width)
    pos = dg.reduce_sum(w * labels[:, None].astype(float), axis=0)
    allm = dg.reduce_sum(w, axis=0)
    # cumulative mass from the highest bin down: tri[j, i] = 1 when i >= j
    tri = np.triu(np.ones((n_bins, n_bins))).T
    cum_pos = dg.reshape(dg.reshape(pos, (1, n_bins)) @ tri, (n_bins,))
    cum_all = dg.reshape(dg.reshape(allm, (1, n_bins)) @ tri, (n_bins,))
    prec = cum_pos / dg.maximum_const(cum_all, 1e-12)
    return dg.reduce_sum(prec * pos) * (1.0 / n_pos)


def ap_loss(prob_S, prob_F, labels, n_bins=21, width=0.05):
    """``1 - AP`` averaged over the success (scores p_S) and failure (scores p_F) categories."""
    labels = np.asarray(labels, dtype=bool)
    terms = []
    for probs, lab in ((prob_S, labels), (prob_F, ~labels)):
        ap = soft_average_precision(probs, lab, n_bins, width)
        if ap is not None:
            terms.append(1.0 - ap)
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


def ap_loss_value(p_S, p_F, labels, n_bins=21, width=0.05) -> float:
    out = ap_loss(dg.Tensor(np.asarray(p_S)), dg.Tensor(np.asarray(p_F)), labels, n_bins, width)
    return 0.0 if out is None else float(out.value)


def sdf_loss(net: EnergyNetwork, batch: TrainBatch, P=None):
    pred = net.sdf_tensor(batch.sdf_points, batch.scene, P=P)
    return dg.mean(dg.absolute(pred - batch.sdf_targets))


@dataclass
class LossTerms:
    dsm_S: float
    dsm_F: float
    ap: float
    sdf: float
    total: float
    T: float


def total_loss(net: EnergyNetwork, batch: TrainBatch, cfg: TrainConfig, P=None):
    """``(L+ + L-)/2 + lambda_1 L_ap + lambda_2 L_sdf`` (``L+`` alone without failure matching)."""
    P = net._params(P)
    l_S = dsm_loss_branch(net, batch, "S", P, cfg.dsm_weighting)
    if cfg.use_failure_dsm:
        l_F = dsm_loss_branch(net, batch, "F", P, cfg.dsm_weighting)
        total = (l_S + l_F) * 0.5
    else:
        l_F = None
        total = l_S
    l_ap = None
    if cfg.lambda_ap > 0 and batch.ap_poses is not None:
        built = net.build(batch.ap_poses, batch.scene, noise_schedule(batch.ap_k, cfg.sigma), tangent=False, P=P)
        _, _, pS, pF = net.energies(built["a"])
        l_ap = ap_loss(pS, pF, batch.ap_labels, cfg.n_bins, cfg.bin_width)
        if l_ap is None:
            log.info("no samples under the AP noise cutoff; AP term skipped")
        else:
            total = total + l_ap * cfg.lambda_ap
    l_sdf = None
    if cfg.lambda_sdf > 0 and batch.sdf_points is not None:
        l_sdf = sdf_loss(net, batch, P)
        total = total + l_sdf * cfg.lambda_sdf
    val = lambda t: float(t.value) if t is not None else 0.0
    return total, LossTerms(val(l_S), val(l_F), val(l_ap), val(l_sdf), float(total.value), net.temperature)


# -- loop ---------------------------------------------------------------------------------


class DivergenceError(FloatingPointError):
    pass


def train(cfg: TrainConfig, scenes, net: EnergyNetwork | None = None, out_dir=None, callback=None):
    """Adam on the total loss; returns ``(network, curve)`` with one LossTerms per step."""
    if not scenes:
        raise ValueError("training needs at least one scene")
    if not all(len(s.success) and len(s.failure) for s in scenes):
        raise ValueError("every training scene needs both success and failure grasps")
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = EnergyNetwork(hidden=cfg.hidden, seed=cfg.seed, learn_temperature=cfg.learn_temperature)
    curve = []
    out_dir = Path(out_dir) if out_dir else None
    for step in range(cfg.steps):
        ts = scenes[int(rng.integers(0, len(scenes)))]
        batch = sample_batch(ts, cfg, rng)
        leaves = net.store.leaves()
        loss, terms = total_loss(net, batch, cfg, P=leaves)
        if not np.isfinite(terms.total):
            raise DivergenceError(f"non-finite loss at step {step}")
        dg.backward(loss)
        net.store.collect_grads(leaves)
        dg.adam_step(net.store, cfg.lr)
        curve.append(terms)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d total %.4f dsmS %.4f dsmF %.4f ap %.4f sdf %.4f T %.3f", step, terms.total,
                     terms.dsm_S, terms.dsm_F, terms.ap, terms.sdf, terms.T)
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            net.save(out_dir / f"checkpoint_{step + 1:06d}.npz", {"step": step + 1, "train_config": cfg.to_dict()})
        if callback is not None:
            callback(step, terms)
    if out_dir:
        net.save(out_dir / "model.npz", {"step": cfg.steps, "train_config": cfg.to_dict()})
        write_curve(out_dir / "loss_curve.csv", curve)
    return net, curve


def write_curve(path, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "dsm_success", "dsm_failure", "ap", "sdf", "total", "T"])
        for i, t in enumerate(curve):
            w.writerow([i, t.dsm_S, t.dsm_F, t.ap, t.sdf, t.total, t.T])


# -- metrics --------------------------------------------------------------------------------


def ece(probs, outcomes, n_bins: int = 10) -> float:
    """Expected calibration error with equal-width confidence bins on ``[0, 1]``."""
    probs = check_probability(probs, "probs").ravel()
    outcomes = np.asarray(outcomes, dtype=float).ravel()
    if probs.size == 0 or probs.size != outcomes.size:
        raise ValueError("ece needs equally sized nonempty inputs")
    idx = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        m = idx == b
        if m.any():
            total += m.mean() * abs(outcomes[m].mean() - probs[m].mean())
    return float(total)


def reliability_table(probs, outcomes, n_bins=10):
    probs = np.asarray(probs, dtype=float)
    outcomes = np.asarray(outcomes, dtype=float)
    idx = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    rows = []
    for b in range(n_bins):
        m = idx == b
        if m.any():
            rows.append((b / n_bins, (b + 1) / n_bins, int(m.sum()), float(probs[m].mean()), float(outcomes[m].mean())))
    return rows


def average_precision_exact(scores, labels) -> float:
    """AP from the sorted list: mean of precision@rank over positive ranks (ties broken by order)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise ValueError("empty input")
    if not labels.any():
        return 0.0
    order = np.argsort(-scores, kind="stable")
    lab = labels[order]
    hits = np.cumsum(lab)
    prec = hits / np.arange(1, lab.size + 1)
    return float(prec[lab].mean())


def set_distances(pred: GraspPose, gt: GraspPose):
    """(ang_acc, trans_acc, ang_rec, trans_rec) directed mean-closest distances.

    acc: for each ground-truth grasp, distance to the closest prediction;
    rec: for each prediction, distance to the closest ground-truth grasp.
    The angular and translational nearest neighbors are taken independently.
    """
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("set_distances needs nonempty sets")
    P = GraspPose(pred.rotation[:, None], pred.translation[:, None])
    G = GraspPose(gt.rotation[None, :], gt.translation[None, :])
    Rb = np.broadcast_to(P.rotation, (len(pred), len(gt), 3, 3))
    ang, trans = pose_distance(GraspPose(Rb, np.broadcast_to(P.translation, (len(pred), len(gt), 3))),
                               GraspPose(np.broadcast_to(G.rotation, Rb.shape), np.broadcast_to(G.translation, (len(pred), len(gt), 3))))
    return (
        float(ang.min(axis=0).mean()),
        float(trans.min(axis=0).mean()),
        float(ang.min(axis=1).mean()),
        float(trans.min(axis=1).mean()),
    )


# -- estimator -------------------------------------------------------------------------------


class GraspEnergyModel(BaseEstimator):
    """Estimator facade over :class:`EnergyNetwork` and :func:`train`.

    ``fit`` takes a list of :class:`TrainingScene`; ``predict_proba`` returns
    calibrated success probabilities at the terminal noise level.
    """

    def __init__(self, steps=10_000, batch_size=24, lr=1e-3, lambda_ap=1.0, lambda_sdf=0.1, use_failure_dsm=True,
                 learn_temperature=True, dsm_weighting="sigma2", k_sampling="log", hidden=(32, 128, 64), seed=0):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_ap = lambda_ap
        self.lambda_sdf = lambda_sdf
        self.use_failure_dsm = use_failure_dsm
        self.learn_temperature = learn_temperature
        self.dsm_weighting = dsm_weighting
        self.k_sampling = k_sampling
        self.hidden = hidden
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, lambda_ap=self.lambda_ap,
                           lambda_sdf=self.lambda_sdf, use_failure_dsm=self.use_failure_dsm,
                           learn_temperature=self.learn_temperature, dsm_weighting=self.dsm_weighting,
                           k_sampling=self.k_sampling, hidden=tuple(self.hidden), seed=self.seed, log_every=0)

    def fit(self, scenes, y=None, out_dir=None):
        self.network_, self.curve_ = train(self.train_config(), scenes, out_dir=out_dir)
        return self

    def predict_proba(self, g: GraspPose, scene: SceneInput, sigma=None) -> np.ndarray:
        """Columns: success, failure, remainder of the Dirichlet mass."""
        sigma = noise_schedule(1e-3) if sigma is None else sigma
        out = self.network_.forward(g, scene, sigma)
        return np.stack([out.p_S, out.p_F, 1.0 - out.p_S - out.p_F], axis=-1)

    def predict(self, g: GraspPose, scene: SceneInput, threshold=0.5) -> np.ndarray:
        return self.predict_proba(g, scene)[..., 0] >= threshold

    def save(self, path):
        return self.network_.save(path, {"estimator": self.get_params()})

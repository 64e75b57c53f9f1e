"""Grasp entropy, its scene gradient, and information-gain view selection.

The grasp entropy ``eta(w)`` is the expected Bernoulli entropy of grasp
success under the model's grasp distribution. Its scene gradient combines a
pathwise term with a score-function correction,

    grad eta = E[grad h] - E[h grad E] + E[h] E[grad E],

all estimated on one sample set. A candidate view scores
``1/2 sum_i c_i (1/P_i - 1/(P_i + D_i))`` where ``c`` is the diagonal of the
rank-one curvature ``grad eta grad eta^T + lambda I``, ``P`` the current
precision diagonal and ``D`` the candidate's precision increment.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from ._validation import check_positive, check_probability, check_rng
from .liegroup import GraspPose, so3_log
from .sampler import AnnealSchedule, candidate_poses, generate_grasps, make_schedule
from .splatrep import (
    PrecisionDiag,
    SceneEstimate,
    accumulate_precision,
    kernel_gradient,
    precision_delta,
    scene_input_from_estimate,
)
from .world import TABLE_TOP, ViewPose, look_at

CURVATURE_LAMBDA = 1e-6
ETA_SAMPLES = 128
VIEW_RADIUS = (0.3, 0.5)


def bernoulli_entropy(s) -> np.ndarray:
    """``-s ln s - (1 - s) ln(1 - s)`` in nats, with ``0 ln 0 = 0``."""
    s = check_probability(s, "s")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(s > 0, -s * np.log(s), 0.0)
        b = np.where(s < 1, -(1 - s) * np.log1p(-s), 0.0)
    return a + b


def bernoulli_entropy_grad(s) -> np.ndarray:
    """``dh/ds = ln((1 - s) / s)``; clipped away from the endpoints."""
    s = np.clip(np.asarray(s, dtype=float), 1e-12, 1 - 1e-12)
    return np.log1p(-s) - np.log(s)


@dataclass
class EntropyEstimate:
    eta: float
    poses: GraspPose
    h: np.ndarray
    p: np.ndarray
    sigma: float
    seed: object = None

    @property
    def m(self) -> int:
        return int(self.h.size)


def estimate_eta(model, scene=None, m: int = ETA_SAMPLES, schedule: AnnealSchedule | None = None, rng=None,
                 **sample_kw) -> EntropyEstimate:
    """Monte-Carlo ``eta``: mean Bernoulli entropy of ``p_S`` over sampled grasps."""
    schedule = make_schedule() if schedule is None else schedule
    cands = generate_grasps(model, m, schedule, rng=rng, scene=scene, **sample_kw)
    p = np.array([c.p_success for c in cands])
    h = bernoulli_entropy(np.clip(p, 0.0, 1.0))
    return EntropyEstimate(float(h.mean()), candidate_poses(cands), h, p, schedule.sigma_min,
                           rng if isinstance(rng, (int, np.integer)) else None)


def eta_weights(est: EntropyEstimate):
    """Per-sample weights turning the gradient into one weighted backward pass.

    ``grad eta = sum_i v_i grad p_i + sum_i u_i grad E_i`` with
    ``v_i = h'(p_i)/m`` and ``u_i = -(h_i - mean h)/m``.
    """
    m = est.m
    v = bernoulli_entropy_grad(est.p) / m
    u = -(est.h - est.h.mean()) / m
    return u, v


def eta_gradient_terms(h, dh, dE):
    """The three Monte-Carlo terms from per-sample arrays (``dh``, ``dE``: (m, ...))."""
    h = np.asarray(h, dtype=float)
    shape = (-1,) + (1,) * (np.ndim(dE) - 1)
    t1 = np.mean(dh, axis=0)
    t2 = np.mean(h.reshape(shape) * dE, axis=0)
    t3 = h.mean() * np.mean(dE, axis=0)
    return t1, t2, t3


def combine_eta_gradient(h, dh, dE, third_sign: float = 1.0):
    t1, t2, t3 = eta_gradient_terms(h, dh, dE)
    return t1 - t2 + third_sign * t3


def grad_eta(network, scene_input, est: EntropyEstimate) -> np.ndarray:
    """Gradient of ``eta`` with respect to the scene row positions (rows x 3)."""
    u, v = eta_weights(est)
    return network.scene_vjp(est.poses, scene_input, est.sigma, energy_weights=u, prob_weights=v)


@dataclass(frozen=True)
class CurvatureDiag:
    values: np.ndarray
    lam: float


def curvature(grad, lam: float = CURVATURE_LAMBDA) -> CurvatureDiag:
    check_positive(lam, "lambda")
    g = np.asarray(grad, dtype=float).ravel()
    return CurvatureDiag(g * g + lam, float(lam))


def info_gain(curv: CurvatureDiag, prec, delta) -> float:
    c = curv.values
    p = prec.values if isinstance(prec, PrecisionDiag) else np.asarray(prec, dtype=float).ravel()
    d = delta.data.ravel() if isinstance(delta, PrecisionDiag) else np.asarray(delta, dtype=float).ravel()
    if not c.shape == p.shape == d.shape:
        raise ValueError(f"misaligned diagonals: {c.shape}, {p.shape}, {d.shape}")
    if np.any(d < 0) or np.any(p <= 0):
        raise ValueError("precision must be positive and increments nonnegative")
    return float(0.5 * np.sum(c * (1.0 / p - 1.0 / (p + d))))


# -- views ------------------------------------------------------------------------------


def fibonacci_directions(n: int, upper: bool = True) -> np.ndarray:
    """Spherical Fibonacci lattice; ``upper`` restricts it to the hemisphere ``z > 0``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n) + 0.5
    z = 1.0 - i / n if upper else 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def propose_views(center, n: int = 40, rng=None, radius=VIEW_RADIUS, upper=True, min_height=0.05, **intrinsics):
    """Cameras on Fibonacci directions around ``center`` looking at it, random radius each."""
    rng = check_rng(rng)
    center = np.asarray(center, dtype=float)
    dirs = fibonacci_directions(n, upper)
    radii = rng.uniform(radius[0], radius[1], size=n)
    eyes = center + radii[:, None] * dirs
    keep = eyes[:, 2] >= TABLE_TOP + min_height
    return [ViewPose(look_at(e, center), **intrinsics) for e in eyes[keep]]


@dataclass
class ViewScore:
    view: ViewPose
    gain: float
    trace_before: float
    trace_after: float
    zero_delta: bool = False


@dataclass
class NBVResult:
    best: ViewPose
    index: int
    scores: list
    eta: EntropyEstimate
    curvature: CurvatureDiag
    timings: dict = field(default_factory=dict)


def candidate_deltas(est: SceneEstimate, candidates, cutoff=3.0) -> list:
    return [precision_delta(est, view, cutoff) for view in candidates]


def score_views(curv: CurvatureDiag, prec: PrecisionDiag, est: SceneEstimate, candidates, cutoff=3.0,
                deltas=None) -> list:
    """Gain per candidate; ``deltas`` reuses precision increments computed earlier for the same estimate."""
    deltas = candidate_deltas(est, candidates, cutoff) if deltas is None else deltas
    if len(deltas) != len(candidates):
        raise ValueError("one precision increment per candidate is required")
    out = []
    p = prec.values
    for view, delta in zip(candidates, deltas):
        gain = info_gain(curv, prec, delta)
        d = delta.data.ravel()
        out.append(ViewScore(view, gain, float(np.sum(1.0 / p)), float(np.sum(1.0 / (p + d))), not d.any()))
    return out


def kernel_eta_gradient(network, est: SceneEstimate, scene_input, eta: EntropyEstimate) -> np.ndarray:
    rows = grad_eta(network, scene_input, eta)
    return kernel_gradient(scene_input, rows, est.n_kernels)


def select_nbv(est: SceneEstimate, network, candidates, m: int = ETA_SAMPLES, rng=None,
               schedule: AnnealSchedule | None = None, lam: float = CURVATURE_LAMBDA, cutoff=3.0,
               scene_input=None, prec: PrecisionDiag | None = None, deltas=None) -> NBVResult:
    """Score every candidate by information gain; the first maximum wins."""
    if not candidates:
        raise ValueError("no candidate views")
    t0 = time.perf_counter()
    scene_input = scene_input_from_estimate(est) if scene_input is None else scene_input
    eta = estimate_eta(network, scene_input, m, schedule, rng)
    g = kernel_eta_gradient(network, est, scene_input, eta)
    curv = curvature(g, lam)
    t1 = time.perf_counter()
    prec = accumulate_precision(est, cutoff=cutoff) if prec is None else prec
    scores = score_views(curv, prec, est, candidates, cutoff, deltas)
    gains = np.array([s.gain for s in scores])
    idx = int(np.argmax(gains))
    t2 = time.perf_counter()
    return NBVResult(candidates[idx], idx, scores, eta, curv, {"entropy": t1 - t0, "scoring": t2 - t1})


# -- Shannon-entropy proxy ----------------------------------------------------------------


def pose_embedding(g: GraspPose, length: float = 0.1) -> np.ndarray:
    """Translation and rotation vector (scaled by ``length`` metres per radian) in one 6-vector."""
    return np.concatenate([g.translation, length * so3_log(g.rotation)], axis=-1)


def knn_entropy(x: np.ndarray, k: int = 3) -> float:
    """Kozachenko-Leonenko differential entropy estimate (nats)."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if n <= k:
        raise ValueError("need more samples than neighbours")
    dist, _ = cKDTree(x).query(x, k + 1)
    eps = np.maximum(dist[:, k], 1e-12)
    log_vol = d / 2 * math.log(math.pi) - gammaln(d / 2 + 1)
    return float(digamma(n) - digamma(k) + log_vol + d * np.mean(np.log(eps)))


def shannon_proxy(est: EntropyEstimate, k: int = 3) -> float:
    """Entropy of the sampled pose cloud: a mean negative-log-density estimate."""
    return knn_entropy(pose_embedding(est.poses), k)

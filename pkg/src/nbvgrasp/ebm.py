"""Conditional grasp energy network with Dirichlet success/failure heads.

Scene encoding: every gripper query point sees the foreground and background
rows through a fixed per-row transform of the offset ``p - q`` (compact
kernels ``psi(d) = (1 - d^2/rho^2)^3`` and kernel-weighted offsets), pooled
over the rows of each set with a smooth maximum. Pooling makes the features independent of row
order. A shared learned transform embeds each query point, the embeddings are
concatenated with a noise-level embedding, and an MLP emits ``(a_S, a_F)``.

The pose gradient is a forward-mode tangent pushed through the same graph,
so it stays differentiable in the parameters (the score-matching loss needs
exactly that) without any second-order reverse pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .liegroup import GraspPose, skew, tangent_point_velocity
from .splatrep import SceneInput
from .world import ANCHORS

QUERY_POINTS = np.concatenate(
    [ANCHORS, np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -0.03], [0.0, 0.0, 0.03]])]
)
RADII = (0.01, 0.02, 0.04)
CENTER_SCALE = 0.1
N_FEATURES = 2 * (len(RADII) + 6) + 3
LN2 = math.log(2.0)
SIGMA_FLOOR = 1e-4
# orientation enters the fusion layer directly as well; rotating by one radian
# should move the input about as much as translating by the centre scale
ROT_SCALE = 5.0
_GENERATORS = np.stack([skew(e) for e in np.eye(3)])


@dataclass
class EnergyOutput:
    a_S: np.ndarray
    a_F: np.ndarray
    p_S: np.ndarray
    p_F: np.ndarray
    E_S: np.ndarray
    E_F: np.ndarray
    T: float


def dirichlet_probs(a_S, a_F):
    """``p = e^a / (e^{a_S} + e^{a_F} + 2)`` for both heads, computed stably."""
    a_S = np.asarray(a_S, dtype=float)
    a_F = np.asarray(a_F, dtype=float)
    lse = np.logaddexp(np.logaddexp(a_S, a_F), LN2)
    return np.exp(a_S - lse), np.exp(a_F - lse)


def output_from_logits(a_S, a_F, T=1.0) -> EnergyOutput:
    a_S = np.asarray(a_S, dtype=float)
    a_F = np.asarray(a_F, dtype=float)
    lse = np.logaddexp(np.logaddexp(a_S, a_F), LN2)
    E_S, E_F = lse - a_S, lse - a_F
    return EnergyOutput(a_S, a_F, np.exp(-E_S), np.exp(-E_F), E_S, E_F, float(T))


def effective_energy(out: EnergyOutput, branch="S"):
    """Tempered energy ``E_branch / T``."""
    return (out.E_S if branch == "S" else out.E_F) / out.T


def noise_features(sigma, n_freq=8) -> np.ndarray:
    """Sinusoidal features of ``log sigma`` (2 * n_freq columns)."""
    s = np.log(np.maximum(np.asarray(sigma, dtype=float), SIGMA_FLOOR))
    freqs = 2.0 ** np.arange(n_freq) / 4.0
    ang = s[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# -- scene features -------------------------------------------------------------


@dataclass
class QueryFeatures:
    """Pooled features at query points with their Jacobians.

    ``J_q``: d feature / d query point (n, F, 3). Scene sensitivities are kept
    per (query, row) pair: ``pairs_fg = (query index, row index, dF/dp)``,
    likewise for background rows, and ``J_c`` for the foreground centroid.
    """

    F: np.ndarray
    J_q: np.ndarray
    J_c: np.ndarray
    pairs_fg: tuple
    pairs_bg: tuple


N_SET = len(RADII) + 6
POOL_SHARPNESS = 100.0


def _row_transform(r):
    """Per-row features of ``r = p - q`` and derivatives w.r.t. ``r``.

    Returns ``phi`` (P, N_SET) and the derivatives of the kernel channels
    (P, nr, 3) and of the positive offset channels (P, 3, 3); the negative
    offset channels are their negation.
    """
    rho = RADII[-1]
    d2 = np.einsum("pk,pk->p", r, r)
    radii2 = np.asarray(RADII) ** 2
    u = np.maximum(1.0 - d2[:, None] / radii2, 0.0)  # (P, nr)
    psi_all = u**3
    coef = -6.0 * u**2 / radii2
    psi = psi_all[:, -1]
    off = r * (psi / rho)[:, None]
    phi = np.concatenate([psi_all, off, -off], axis=1)
    d_ker = coef[:, :, None] * r[:, None, :]
    d_off = r[:, :, None] * (coef[:, -1:] * r / rho)[:, None, :]
    d_off[:, [0, 1, 2], [0, 1, 2]] += (psi / rho)[:, None]
    return phi, d_ker, d_off


def _segment_sum(values, starts, counts):
    """Sums of consecutive row blocks (``counts`` may contain zeros)."""
    out = np.zeros((counts.size,) + values.shape[1:])
    nz = counts > 0
    if values.shape[0]:
        out[nz] = np.add.reduceat(values, starts[nz], axis=0)
    return out


def _set_features(points, q):
    """Smooth max-pool over rows: ``log(mean_m exp(beta * phi_m)) / beta``.

    Rows farther than the widest radius have ``phi = 0`` and zero derivative,
    so only in-range (query, row) pairs are materialized; the rest enter the
    mean as ``exp(0) = 1``. With a fixed row count this is a smooth, order
    independent pooling that tends to the hard max as ``beta`` grows.
    """
    beta = POOL_SHARPNESS
    nr = len(RADII)
    n, m = q.shape[0], points.shape[0]
    d2 = np.sum(q * q, axis=1)[:, None] + np.sum(points * points, axis=1)[None, :] - 2.0 * q @ points.T
    # small slack: the exact distance is recomputed per pair below
    pq, pp = np.nonzero(d2 < RADII[-1] ** 2 + 1e-9)
    counts = np.bincount(pq, minlength=n)
    starts = np.cumsum(counts) - counts
    phi, d_ker, d_off = _row_transform(points[pp] - q[pq])
    ex = np.exp(beta * phi)
    S = _segment_sum(ex, starts, counts) + (m - counts)[:, None]
    F = np.log(S / m) / beta
    w = ex / S[pq]
    Jp = np.empty((pp.size, N_SET, 3))  # d F[query] / d row position, per pair
    Jp[:, :nr] = w[:, :nr, None] * d_ker
    Jp[:, nr : nr + 3] = w[:, nr : nr + 3, None] * d_off
    Jp[:, nr + 3 :] = -w[:, nr + 3 :, None] * d_off
    J_q = -_segment_sum(Jp, starts, counts)
    return F, J_q, (pq, pp, Jp)


def query_features(q: np.ndarray, scene: SceneInput) -> QueryFeatures:
    q = np.asarray(q, dtype=float)
    shape = q.shape[:-1]
    flat = q.reshape(-1, 3)
    F_fg, Jq_fg, pairs_fg = _set_features(scene.fg_points, flat)
    F_bg, Jq_bg, pairs_bg = _set_features(scene.bg_points, flat)
    n = flat.shape[0]
    F = np.concatenate([F_fg, F_bg, (flat - scene.center) / CENTER_SCALE], axis=1)
    J_q = np.zeros((n, N_FEATURES, 3))
    J_q[:, :N_SET] = Jq_fg
    J_q[:, N_SET : 2 * N_SET] = Jq_bg
    J_q[:, 2 * N_SET :] = np.eye(3) / CENTER_SCALE
    J_c = np.zeros((N_FEATURES, 3))
    J_c[2 * N_SET :] = -np.eye(3) / CENTER_SCALE
    return QueryFeatures(
        F.reshape(shape + (N_FEATURES,)), J_q.reshape(shape + (N_FEATURES, 3)), J_c, pairs_fg, pairs_bg
    )


def _scene_pullback(feat: QueryFeatures, dF: np.ndarray, scene: SceneInput) -> np.ndarray:
    """Chain a feature cotangent back to the scene row positions (rows x 3)."""
    out = np.zeros((scene.rows.shape[0], 3))
    nfg = scene.n_fg
    dF = dF.reshape(-1, N_FEATURES)
    pq, pp, Jp = feat.pairs_fg
    np.add.at(out, pp, np.einsum("pf,pfk->pk", dF[pq, :N_SET], Jp))
    pq, pp, Jp = feat.pairs_bg
    np.add.at(out, nfg + pp, np.einsum("pf,pfk->pk", dF[pq, N_SET : 2 * N_SET], Jp))
    out[:nfg] += (dF.sum(axis=0) @ feat.J_c) / nfg
    return out


# -- network ----------------------------------------------------------------------


def rotation_tangent(R: np.ndarray) -> np.ndarray:
    """Flattened ``d R / d xi`` under right perturbation (B, 6, 9); translation rows vanish."""
    out = np.zeros(R.shape[:-2] + (6, 9))
    out[..., 3:, :] = np.einsum("...ij,njk->...nik", R, _GENERATORS).reshape(R.shape[:-2] + (3, 9))
    return out


def _as_batch(g: GraspPose) -> tuple[GraspPose, bool]:
    if g.translation.ndim == 1:
        return GraspPose(g.rotation[None], g.translation[None]), True
    return g, False


class EnergyNetwork:
    """Parameters live in a :class:`~nbvgrasp.diffgraph.ParamStore`."""

    def __init__(self, hidden=(32, 128, 64), sdf_hidden=64, n_freq=8, seed=0, learn_temperature=True,
                 rot_scale=ROT_SCALE):
        self.hidden = tuple(int(h) for h in hidden)
        self.sdf_hidden = int(sdf_hidden)
        self.n_freq = int(n_freq)
        self.seed = seed
        self.learn_temperature = bool(learn_temperature)
        self.rot_scale = float(rot_scale)
        self.store = dg.ParamStore()
        rng = np.random.default_rng(seed)
        h1, h2, h3 = self.hidden
        nq = QUERY_POINTS.shape[0]
        ne = 2 * self.n_freq

        def lin(name, n_in, n_out, gain=1.0):
            self.store.add(f"{name}.W", gain * rng.standard_normal((n_in, n_out)) / math.sqrt(n_in))
            self.store.add(f"{name}.b", np.zeros(n_out))

        lin("enc", N_FEATURES, h1)
        lin("noise", ne, ne)
        lin("fuse_x", nq * h1, h2)
        self.store.add("fuse_e.W", rng.standard_normal((ne, h2)) / math.sqrt(ne))
        self.store.add("fuse_r.W", rng.standard_normal((9, h2)) / 3.0)
        lin("mid", h2, h3)
        lin("head", h3, 2, gain=0.1)
        lin("gain", ne, 1, gain=0.0)
        lin("sdf1", h1 + N_FEATURES, self.sdf_hidden)
        lin("sdf2", self.sdf_hidden, 1, gain=0.1)
        self.store.add("tau", np.zeros(()))
        if not self.learn_temperature:
            self.store.frozen.add("tau")

    # -- config / checkpoint
    def config(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "sdf_hidden": self.sdf_hidden,
            "n_freq": self.n_freq,
            "seed": self.seed,
            "learn_temperature": self.learn_temperature,
            "rot_scale": self.rot_scale,
        }

    def save(self, path, extra_meta=None):
        meta = {"kind": "energy_network", "architecture": self.config()}
        meta.update(extra_meta or {})
        return dg.save_arrays(path, self.store.snapshot(), meta)

    @classmethod
    def load(cls, path) -> "EnergyNetwork":
        arrays, meta = dg.load_arrays(path)
        net = cls(**meta["architecture"])
        net.store.load_state(arrays)
        return net

    def copy(self) -> "EnergyNetwork":
        net = EnergyNetwork(**self.config())
        net.store.load_state(self.store.snapshot())
        return net

    @property
    def temperature(self) -> float:
        return float(np.exp(self.store["tau"]))

    # -- graph construction
    def _params(self, leaves=None):
        if leaves is not None:
            return leaves
        return {k: dg.Tensor(v) for k, v in self.store.params.items()}

    def build(self, g: GraspPose, scene: SceneInput, sigma, tangent=True, P=None, feat_leaf=False):
        """Graph for logits (and their pose tangents).

        Returns a dict of tensors ``a`` (B, 2), ``da`` (B, 6, 2) when ``tangent``,
        plus the numpy features used.
        """
        P = self._params(P)
        R, t = g.rotation, g.translation
        B = t.shape[0]
        nq = QUERY_POINTS.shape[0]
        h1 = self.hidden[0]
        q = g.transform_points(np.broadcast_to(QUERY_POINTS, (B, nq, 3)))
        feat = query_features(q, scene)
        F = dg.Tensor(feat.F, requires_grad=feat_leaf)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (B,))
        e = dg.softplus(dg.Tensor(noise_features(sigma, self.n_freq)) @ P["noise.W"] + P["noise.b"])
        z1 = dg.check_finite(F @ P["enc.W"] + P["enc.b"], "layer 1 (encoder)")
        x = dg.reshape(dg.softplus(z1), (B, nq * h1))
        rot = dg.Tensor(R.reshape(B, 9) * self.rot_scale, requires_grad=feat_leaf)
        z2 = dg.check_finite(x @ P["fuse_x.W"] + e @ P["fuse_e.W"] + rot @ P["fuse_r.W"] + P["fuse_x.b"], "layer 2 (fusion)")
        h2 = dg.softplus(z2)
        z3 = dg.check_finite(h2 @ P["mid.W"] + P["mid.b"], "layer 3")
        h3 = dg.softplus(z3)
        # noise-dependent output scale: logits can steepen as sigma shrinks
        gain = dg.exp(e @ P["gain.W"] + P["gain.b"])
        a = dg.check_finite((h3 @ P["head.W"] + P["head.b"]) * gain, "layer 4 (heads)")
        out = {"a": a, "features": feat, "F": F, "rot": rot, "P": P}
        if tangent:
            V = tangent_point_velocity(QUERY_POINTS, R)  # (B, 6, nq, 3)
            dF = dg.Tensor(np.einsum("bqfk,bjqk->bjqf", feat.J_q, V))
            dz1 = dF @ P["enc.W"]
            dh1 = dg.reshape(dg.sigmoid(z1), (B, 1, nq, h1)) * dz1
            dx = dg.reshape(dh1, (B, 6, nq * h1))
            drot = dg.Tensor(rotation_tangent(R) * self.rot_scale)
            dh2 = dg.reshape(dg.sigmoid(z2), (B, 1, -1)) * (dx @ P["fuse_x.W"] + drot @ P["fuse_r.W"])
            dh3 = dg.reshape(dg.sigmoid(z3), (B, 1, -1)) * (dh2 @ P["mid.W"])
            out["da"] = (dh3 @ P["head.W"]) * dg.reshape(gain, (B, 1, 1))
        return out

    @staticmethod
    def energies(a):
        """(E_S, E_F, p_S, p_F) tensors from a logits tensor (B, 2)."""
        B = a.shape[0]
        lse = dg.logsumexp(dg.concat([a, dg.Tensor(np.full((B, 1), LN2))], axis=1), axis=1)
        E_S = lse - a[:, 0]
        E_F = lse - a[:, 1]
        return E_S, E_F, dg.exp(-E_S), dg.exp(-E_F)

    def pose_grad_tensor(self, built, branch="S", tempered=True):
        """Right-trivialized d E / d xi (B, 6) as a graph tensor."""
        a, da = built["a"], built["da"]
        B = a.shape[0]
        _, _, p_S, p_F = self.energies(a)
        pS = dg.reshape(p_S, (B, 1))
        pF = dg.reshape(p_F, (B, 1))
        if branch == "S":
            grad = (pS - 1.0) * da[:, :, 0] + pF * da[:, :, 1]
        else:
            grad = pS * da[:, :, 0] + (pF - 1.0) * da[:, :, 1]
        if tempered:
            grad = grad * dg.exp(-built["P"]["tau"])
        return grad

    # -- numpy-facing API
    def forward(self, g: GraspPose, scene: SceneInput, sigma) -> EnergyOutput:
        g, single = _as_batch(g)
        a = self.build(g, scene, sigma, tangent=False)["a"].value
        out = output_from_logits(a[:, 0], a[:, 1], self.temperature)
        if single:
            out = EnergyOutput(*(np.asarray(getattr(out, k))[0] for k in ("a_S", "a_F", "p_S", "p_F", "E_S", "E_F")), out.T)
        return out

    evaluate = forward

    def success_prob(self, g, scene, sigma) -> np.ndarray:
        return self.forward(g, scene, sigma).p_S

    def grad_energy_wrt_pose(self, g, scene, sigma, branch="S") -> np.ndarray:
        g, single = _as_batch(g)
        grad = self.pose_grad_tensor(self.build(g, scene, sigma), branch).value
        return grad[0] if single else grad

    pose_grad = grad_energy_wrt_pose

    def grad_energy_wrt_pose_reverse(self, g, scene, sigma, branch="S") -> np.ndarray:
        """Same gradient through reverse mode: energy -> features -> query points -> tangent."""
        g, single = _as_batch(g)
        built = self.build(g, scene, sigma, tangent=False, feat_leaf=True)
        E_S, E_F, _, _ = self.energies(built["a"])
        E = (E_S if branch == "S" else E_F) * math.exp(-float(self.store["tau"]))
        dg.backward(dg.reduce_sum(E))
        feat = built["features"]
        dq = np.einsum("bqf,bqfk->bqk", built["F"].grad, feat.J_q)
        V = tangent_point_velocity(QUERY_POINTS, g.rotation)
        grad = np.einsum("bqk,bjqk->bj", dq, V)
        grad += np.einsum("bf,bjf->bj", built["rot"].grad, rotation_tangent(g.rotation) * self.rot_scale)
        return grad[0] if single else grad

    def scene_vjp(self, g, scene, sigma, energy_weights=None, prob_weights=None, branch="S") -> np.ndarray:
        """Gradient of ``sum_i u_i E_i/T + sum_i v_i p_S,i`` w.r.t. scene row positions."""
        g, _ = _as_batch(g)
        B = len(g)
        built = self.build(g, scene, sigma, tangent=False, feat_leaf=True)
        E_S, E_F, p_S, _ = self.energies(built["a"])
        E = (E_S if branch == "S" else E_F) * math.exp(-float(self.store["tau"]))
        total = dg.Tensor(np.zeros(()))
        if energy_weights is not None:
            total = total + dg.reduce_sum(E * np.broadcast_to(energy_weights, (B,)))
        if prob_weights is not None:
            total = total + dg.reduce_sum(p_S * np.broadcast_to(prob_weights, (B,)))
        if not total.requires_grad:
            return np.zeros((scene.rows.shape[0], 3))
        dg.backward(total)
        return _scene_pullback(built["features"], built["F"].grad, scene)

    def grad_energy_wrt_scene(self, g, scene, sigma, branch="S") -> np.ndarray:
        """d (sum over the given grasps of E_branch / T) / d scene row positions (rows x 3)."""
        g, _ = _as_batch(g)
        return self.scene_vjp(g, scene, sigma, energy_weights=np.ones(len(g)), branch=branch)

    scene_grad = grad_energy_wrt_scene

    # -- SDF head
    def sdf_tensor(self, points, scene: SceneInput, P=None):
        P = self._params(P)
        feat = query_features(points, scene)
        F = dg.Tensor(feat.F)
        h = dg.softplus(F @ P["enc.W"] + P["enc.b"])
        z = dg.softplus(dg.concat([h, F], axis=-1) @ P["sdf1.W"] + P["sdf1.b"])
        out = z @ P["sdf2.W"] + P["sdf2.b"]
        return dg.reshape(out, out.shape[:-1])

    def sdf_predict(self, points, scene: SceneInput) -> np.ndarray:
        return self.sdf_tensor(np.asarray(points, dtype=float), scene).value

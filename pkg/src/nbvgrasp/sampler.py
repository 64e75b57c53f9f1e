"""Annealed Langevin sampling of grasp poses on SE(3) and candidate ranking.

One step is ``g <- g exp(-alpha^2 dE/dgamma + alpha eps)``. For a fixed
step the chain's stationary law is close to ``exp(-2 E)``, so the sampler
targets the energy at temperature 1/2; with ``alpha^2`` equal to the
curvature scale of a quadratic energy the update is an exact one-step draw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_rng
from .liegroup import GraspPose, random_rotations, relative_log, retract, se3_right_jacobian_inv
from .trainer import noise_schedule
from .world import WORKSPACE_HI, WORKSPACE_LO, gripper_clear_of_table

K_MIN = 1e-3
P_THRESHOLD = 0.05


class ChainDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AnnealSchedule:
    sigmas: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        a = np.asarray(self.alphas, dtype=float)
        if s.shape != a.shape or s.ndim != 1 or s.size == 0:
            raise ValueError("sigmas and alphas must be equal-length 1-D arrays")
        if np.any(np.diff(s) > 0):
            raise ValueError("sigmas must be nonincreasing along the run")
        if np.any(a <= 0) or np.any(s <= 0):
            raise ValueError("sigmas and alphas must be positive")
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "alphas", a)

    def __len__(self):
        return self.sigmas.size

    @property
    def sigma_min(self) -> float:
        return float(self.sigmas[-1])

    @classmethod
    def constant(cls, n_steps, sigma, alpha) -> "AnnealSchedule":
        return cls(np.full(n_steps, float(sigma)), np.full(n_steps, float(alpha)))


def make_schedule(n_steps: int = 150, eps0: float | None = None, step_ratio: float = 0.3, sigma: float = 0.5,
                  k_min: float = K_MIN) -> AnnealSchedule:
    """Geometric ``k`` from 1 to ``k_min``; ``alpha_k^2 = eps0 sigma_k^2 / sigma_min^2``.

    ``eps0`` defaults to ``step_ratio * sigma_min^2``, i.e. every step moves a
    fixed fraction of the current noise scale.
    """
    if n_steps < 2:
        raise ValueError("need at least two annealing steps")
    k = np.geomspace(1.0, k_min, n_steps)
    s = noise_schedule(k, sigma)
    s_min = s[-1]
    if eps0 is None:
        eps0 = step_ratio * s_min**2
    if eps0 <= 0:
        raise ValueError("eps0 must be > 0")
    return AnnealSchedule(s, np.sqrt(eps0 * s**2 / s_min**2))


# -- energies --------------------------------------------------------------------------


class NetworkEnergy:
    """Adapter: a trained network conditioned on one scene input."""

    def __init__(self, network, scene):
        self.network = network
        self.scene = scene

    def pose_grad(self, g, sigma):
        return self.network.grad_energy_wrt_pose(g, self.scene, sigma, "S")

    def evaluate(self, g, sigma):
        out = self.network.forward(g, self.scene, sigma)
        return out.p_S, out.E_S, out.E_F


class QuadraticEnergy:
    """``E(g) = |Log(g0^-1 g)|^2 / (2 tau^2)`` with a fixed success probability."""

    def __init__(self, g0: GraspPose, tau: float, p_success: float = 0.5):
        self.g0 = g0
        self.tau = float(tau)
        self.p_success = p_success

    def _xi(self, g):
        return relative_log(g, GraspPose(np.broadcast_to(self.g0.rotation, g.rotation.shape),
                                         np.broadcast_to(self.g0.translation, g.translation.shape)))

    def pose_grad(self, g, sigma):
        xi = self._xi(g)
        return np.einsum("...ji,...j->...i", se3_right_jacobian_inv(xi), xi) / self.tau**2

    def evaluate(self, g, sigma):
        xi = self._xi(g)
        E = 0.5 * np.sum(xi * xi, axis=-1) / self.tau**2
        p = np.full(E.shape, self.p_success)
        return p, E, np.zeros_like(E)


def as_energy(model, scene=None):
    if scene is not None:
        return NetworkEnergy(model, scene)
    # networks take the scene as an argument; analytic energies do not
    if hasattr(model, "scene_vjp") or not (hasattr(model, "pose_grad") and hasattr(model, "evaluate")):
        raise ValueError("a network needs a scene input")
    return model


# -- chains ----------------------------------------------------------------------------------


def langevin_step(g: GraspPose, energy, sigma, alpha, rng=None, noise=None, dof_mask=None) -> GraspPose:
    """One annealed Langevin update on the right; ``noise`` overrides the draw from ``rng``."""
    grad = np.asarray(energy.pose_grad(g, sigma), dtype=float)
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad).all(axis=-1))
        raise ChainDivergedError(f"non-finite pose gradient at sigma={sigma:.4g} for chains {bad.tolist()}")
    if noise is None:
        noise = check_rng(rng).standard_normal(grad.shape)
    xi = -(alpha**2) * grad + alpha * noise
    if dof_mask is not None:
        xi = xi * np.asarray(dof_mask, dtype=float)
    return retract(g, xi)


@dataclass(frozen=True)
class GraspCandidate:
    pose: GraspPose
    p_success: float
    energy_success: float
    energy_failure: float
    chain: int

    def to_record(self) -> dict:
        return {
            "pose": [round(float(x), 12) for x in self.pose.to_quat_xyz()],
            "p_S": self.p_success,
            "E_S": self.energy_success,
            "E_F": self.energy_failure,
            "chain": self.chain,
        }


def chain_rngs(rng, n):
    seeds = check_rng(rng).integers(0, 2**63, size=n)
    return [np.random.default_rng(int(s)) for s in seeds], seeds


def initial_poses(rngs, lo=WORKSPACE_LO, hi=WORKSPACE_HI) -> GraspPose:
    R = np.stack([random_rotations(1, r)[0] for r in rngs])
    t = np.stack([r.uniform(lo, hi) for r in rngs])
    return GraspPose(R, t)


def run_chains(energy, schedule: AnnealSchedule, rngs, g0: GraspPose | None = None, dof_mask=None):
    """Anneal every chain; each chain draws only from its own generator.

    Returns the final poses and a boolean mask of chains that stayed finite.
    """
    g = initial_poses(rngs) if g0 is None else g0
    alive = np.ones(len(g), dtype=bool)
    for sigma, alpha in zip(schedule.sigmas, schedule.alphas):
        noise = np.stack([r.standard_normal(6) for r in rngs])
        idx = np.flatnonzero(alive)
        sub = g[idx]
        try:
            new = langevin_step(sub, energy, sigma, alpha, noise=noise[idx], dof_mask=dof_mask)
        except ChainDivergedError:
            grad = np.asarray(energy.pose_grad(sub, sigma))
            ok = np.isfinite(grad).all(axis=-1)
            alive[idx[~ok]] = False
            idx, sub = idx[ok], sub[ok]
            if idx.size == 0:
                break
            new = langevin_step(sub, energy, sigma, alpha, noise=noise[idx], dof_mask=dof_mask)
        R, t = g.rotation.copy(), g.translation.copy()
        R[idx], t[idx] = new.rotation, new.translation
        finite = np.isfinite(t).all(axis=-1) & np.isfinite(R).all(axis=(-1, -2))
        alive &= finite
        g = GraspPose(np.where(finite[:, None, None], R, np.eye(3)), np.where(finite[:, None], t, 0.0))
    return g, alive


def generate_grasps(model, n: int = 64, schedule: AnnealSchedule | None = None, rng=None, scene=None,
                    dof_mask=None, init: GraspPose | None = None) -> list:
    """``n`` independent annealed chains, scored at the final noise level and sorted by ``p_S``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    energy = as_energy(model, scene)
    schedule = make_schedule() if schedule is None else schedule
    rngs, _ = chain_rngs(rng, n)
    if init is not None and init.translation.ndim == 1:
        init = GraspPose(np.broadcast_to(init.rotation, (n, 3, 3)), np.broadcast_to(init.translation, (n, 3)))
    g, alive = run_chains(energy, schedule, rngs, g0=init, dof_mask=dof_mask)
    if not alive.any():
        raise ChainDivergedError("all chains diverged")
    idx = np.flatnonzero(alive)
    p, E_S, E_F = energy.evaluate(g[idx], schedule.sigma_min)
    cands = [GraspCandidate(g[i], float(p[j]), float(E_S[j]), float(E_F[j]), int(i)) for j, i in enumerate(idx)]
    # stable sort keeps the lower chain index first on ties
    return sorted(cands, key=lambda c: -c.p_success)


def candidate_poses(cands) -> GraspPose:
    return GraspPose(np.stack([c.pose.rotation for c in cands]), np.stack([c.pose.translation for c in cands]))


def feasible(g: GraspPose, lo=WORKSPACE_LO, hi=WORKSPACE_HI) -> np.ndarray:
    t = np.atleast_2d(g.translation)
    inside = np.all((t >= lo) & (t <= hi), axis=-1)
    return inside & gripper_clear_of_table(g)


def select_best(candidates, threshold: float = P_THRESHOLD):
    """Highest-``p_S`` feasible candidate, or ``None`` (Invalid) when nothing qualifies."""
    if not candidates:
        return None
    ok = feasible(candidate_poses(candidates))
    for c, good in zip(candidates, ok):
        if good and c.p_success >= threshold:
            return c
    return None


def write_candidates(path, candidates) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for c in candidates:
            fh.write(json.dumps(c.to_record()) + "\n")
    return path


def tangent_moments(g: GraspPose, g0: GraspPose):
    """Mean and covariance of ``Log(g0^-1 g)`` over a batch."""
    xi = relative_log(g, GraspPose(np.broadcast_to(g0.rotation, g.rotation.shape),
                                   np.broadcast_to(g0.translation, g.translation.shape)))
    return xi.mean(axis=0), np.cov(xi, rowvar=False)


def stationary_variance(tau: float, alpha: float) -> float:
    """Per-coordinate variance of the fixed-step chain on a quadratic energy (linear regime)."""
    a = (alpha / tau) ** 2
    if not 0 < a < 2:
        raise ValueError("the chain is unstable unless 0 < alpha^2 / tau^2 < 2")
    return tau**2 / (2.0 - a)


"""Analytic stand-ins for the energy network, used to check the estimators."""

from __future__ import annotations

import numpy as np

from .liegroup import GraspPose, compose, relative_log, rotation_angle, se3_exp

LINE_MASK = np.array([1.0, 0, 0, 0, 0, 0])


class LineFamily:
    """Grasps ``g0 exp(x e_1)`` on a line with a Gaussian energy and a smooth success rate.

    Scene parameters ``w = (mu, offset, edge)``: the energy is
    ``(x - mu)^2 / (2 tau^2) + offset`` and the success probability is
    ``0.5 + amp tanh((x - edge) / width)``.
    """

    def __init__(self, w=(0.0, 0.0, 0.0), tau=0.1, amp=0.4, width=0.1, g0: GraspPose | None = None):
        self.w = np.asarray(w, dtype=float)
        self.tau = float(tau)
        self.amp = float(amp)
        self.width = float(width)
        self.g0 = se3_exp(np.zeros(6)) if g0 is None else g0

    def with_params(self, w) -> "LineFamily":
        return LineFamily(w, self.tau, self.amp, self.width, self.g0)

    def coordinate(self, g: GraspPose) -> np.ndarray:
        base = GraspPose(np.broadcast_to(self.g0.rotation, g.rotation.shape),
                         np.broadcast_to(self.g0.translation, g.translation.shape))
        return relative_log(g, base)[..., 0]

    def success(self, x):
        return 0.5 + self.amp * np.tanh((x - self.w[2]) / self.width)

    def energy(self, x):
        return 0.5 * (x - self.w[0]) ** 2 / self.tau**2 + self.w[1]

    def pose_grad(self, g, sigma):
        x = self.coordinate(g)
        out = np.zeros(x.shape + (6,))
        out[..., 0] = (x - self.w[0]) / self.tau**2
        return out

    def evaluate(self, g, sigma):
        x = self.coordinate(g)
        return self.success(x), self.energy(x), np.zeros_like(x)

    def scene_grads(self, g):
        """Per-sample ``(d p / d w, d E / d w)`` at fixed poses, each (m, 3)."""
        x = self.coordinate(g)
        u = (x - self.w[2]) / self.width
        dp = np.zeros(x.shape + (3,))
        dp[..., 2] = -self.amp / np.cosh(u) ** 2 / self.width
        dE = np.zeros(x.shape + (3,))
        dE[..., 0] = -(x - self.w[0]) / self.tau**2
        dE[..., 1] = 1.0
        return dp, dE

    def density(self, x):
        """Normalized grasp density along the line."""
        return np.exp(-0.5 * ((x - self.w[0]) / self.tau) ** 2) / (np.sqrt(2 * np.pi) * self.tau)


def _ring_poses(center, radius, phi) -> GraspPose:
    """Side grasps approaching ``center`` horizontally from azimuth ``phi``; fingers close tangentially."""
    c, s = np.cos(phi), np.sin(phi)
    approach = -np.stack([c, s, np.zeros_like(c)], axis=-1)
    closing = np.stack([-s, c, np.zeros_like(c)], axis=-1)
    R = np.stack([closing, np.cross(approach, closing), approach], axis=-1)
    t = np.asarray(center, dtype=float) - radius * approach
    return GraspPose(R, t)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


class OcclusionScenario:
    """Scripted before/after belief about grasps on a ring around an occluded target.

    Anchor grasps sit on a ring of approach azimuths; the ones inside the
    graspable arc succeed. A grasp touches the target at azimuths ``phi +- pi/2``
    and the belief only knows a contact once some view has seen that part of
    the surface. Grasps are proposed only where at least one contact was seen,
    and the success belief moves from 1/2 toward the true label with the number
    of seen contacts. ``stage=0`` sees a narrow sliver facing away from the
    graspable side; ``stage=1`` adds a view of the graspable side.
    """

    def __init__(self, seed=0, n_anchors=72, radius=0.05, graspable_width=np.pi / 2,
                 sliver=np.pi / 6, reveal=np.pi / 2, scale=(0.01, 0.1), confidence=0.9):
        rng = np.random.default_rng(seed)
        self.center = np.array([0.0, 0.0, 0.1]) + rng.uniform(-0.05, 0.05, 3) * [1, 1, 0]
        self.phi_g = rng.uniform(-np.pi, np.pi)
        self.phi = np.linspace(-np.pi, np.pi, n_anchors, endpoint=False) + rng.uniform(0, 2 * np.pi / n_anchors)
        self.anchors = _ring_poses(self.center, radius, self.phi)
        self.labels = (np.abs(_wrap(self.phi - self.phi_g)) <= graspable_width / 2).astype(float)
        # the sliver straddles one closing contact of the graspable grasps, so they are half seen
        self.seen_arcs = [[(self.phi_g + np.pi / 2, sliver / 2)],
                          [(self.phi_g + np.pi / 2, sliver / 2), (self.phi_g - np.pi / 2, reveal / 2)]]
        self.scale = np.asarray(scale, dtype=float)
        self.confidence = float(confidence)

    def seen_contacts(self, stage) -> np.ndarray:
        count = np.zeros(self.phi.size)
        for sign in (1.0, -1.0):
            a = self.phi + sign * np.pi / 2
            seen = np.zeros(self.phi.size, dtype=bool)
            for mid, half in self.seen_arcs[stage]:
                seen |= np.abs(_wrap(a - mid)) <= half
            count += seen
        return count

    def belief(self, stage):
        """Per-anchor proposal weights and success beliefs."""
        n = self.seen_contacts(stage)
        w = (n > 0).astype(float)
        p = 0.5 + (self.labels - 0.5) * self.confidence * n / 2
        return w, p

    def _sq_dist(self, g: GraspPose):
        # (m, n_anchors) scaled squared distance: translation gap and rotation angle
        dt = np.linalg.norm(g.translation[:, None] - self.anchors.translation[None], axis=-1)
        ang = rotation_angle(np.einsum("kji,mjl->mkil", self.anchors.rotation, g.rotation))
        return (dt / self.scale[0]) ** 2 + (ang / self.scale[1]) ** 2

    def evaluate(self, g: GraspPose, stage):
        """Success belief and energy ``-log sum_j w_j exp(-d_j(g)^2 / 2)``."""
        w, p = self.belief(stage)
        logk = -0.5 * self._sq_dist(g) + np.log(np.where(w > 0, w, 1e-300))
        top = logk.max(axis=1, keepdims=True)
        r = np.exp(logk - top)
        total = r.sum(axis=1)
        return (r @ p) / total, -(top[:, 0] + np.log(total))

    def sample(self, m, stage, rng) -> GraspPose:
        """Draws from the mixture, each a tangent-Gaussian perturbation of a weighted anchor."""
        rng = np.random.default_rng(rng)
        w, _ = self.belief(stage)
        idx = rng.choice(self.phi.size, size=m, p=w / w.sum())
        xi = rng.standard_normal((m, 6)) * np.repeat(self.scale, 3)
        return compose(self.anchors[idx], se3_exp(xi))

"""SO(3)/SE(3) group operations on batched numpy arrays.

Tangent vectors are ordered ``(v, w)``: translation first (meters), then
axis-angle rotation (radians). Perturbations compose on the right,
``g * exp(xi)``, and every manifold gradient in the package is expressed in
that right-trivialized frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

SMALL_ANGLE = 1e-8
# Jacobian coefficients suffer cancellation far above SMALL_ANGLE.
_JAC_SERIES_ANGLE = 0.1
_DEGENERATE_TRACE = -1.0 + 1e-9


class DegenerateRotationError(ValueError):
    """Rotation angle is (numerically) pi, where the log map is not unique."""


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _series(theta, coeffs):
    t2 = theta * theta
    out = np.zeros_like(theta)
    for c in reversed(coeffs):
        out = out * t2 + c
    return out


def _coef(theta, exact, coeffs, threshold):
    """Evaluate ``exact(theta)`` with a Taylor fallback below ``threshold``."""
    theta = np.asarray(theta, dtype=float)
    small = theta < threshold
    safe = np.where(small, 1.0, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        big = exact(safe)
    return np.where(small, _series(theta, coeffs), big)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; ``w`` has shape (..., 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a = _coef(theta, lambda t: np.sin(t) / t, [1.0, -1 / 6, 1 / 120], SMALL_ANGLE)
    b = _coef(theta, lambda t: 2.0 * np.sin(t / 2) ** 2 / t**2, [0.5, -1 / 24, 1 / 720], SMALL_ANGLE)
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    vee = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1
    )
    tr = np.trace(R, axis1=-2, axis2=-1)
    return np.arctan2(0.5 * np.linalg.norm(vee, axis=-1), 0.5 * (tr - 1.0))


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal-branch log map. Raises DegenerateRotationError near angle pi."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    if np.any(tr <= _DEGENERATE_TRACE):
        raise DegenerateRotationError("rotation angle is pi (trace(R) <= -1 + 1e-9); log is not unique")
    vee = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1
    )
    theta = np.arctan2(0.5 * np.linalg.norm(vee, axis=-1), 0.5 * (tr - 1.0))
    scale = _coef(theta, lambda t: t / (2.0 * np.sin(t)), [0.5, 1 / 12, 7 / 720], SMALL_ANGLE)
    return scale[..., None] * vee


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    b = _coef(theta, lambda t: 2.0 * np.sin(t / 2) ** 2 / t**2, [0.5, -1 / 24, 1 / 720, -1 / 40320], SMALL_ANGLE)
    c = _coef(theta, lambda t: (t - np.sin(t)) / t**3, [1 / 6, -1 / 120, 1 / 5040, -1 / 362880], _JAC_SERIES_ANGLE)
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    c = _coef(
        theta,
        lambda t: 1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
        [1 / 12, 1 / 720, 1 / 30240, 1 / 1209600],
        _JAC_SERIES_ANGLE,
    )
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + c[..., None, None] * (K @ K)


def _se3_q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(phi, axis=-1)
    c1 = _coef(theta, lambda t: (t - np.sin(t)) / t**3, [1 / 6, -1 / 120, 1 / 5040, -1 / 362880], _JAC_SERIES_ANGLE)
    c2 = _coef(
        theta,
        lambda t: (t**2 + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
        [1 / 24, -1 / 720, 1 / 40320, -1 / 3628800],
        _JAC_SERIES_ANGLE,
    )
    c3 = _coef(
        theta,
        lambda t: (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
        [1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200],
        _JAC_SERIES_ANGLE,
    )
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    c1 = c1[..., None, None]
    c2 = c2[..., None, None]
    c3 = c3[..., None, None]
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    J = so3_left_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = _se3_q(rho, phi)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., :3, 3:] = -Ji @ _se3_q(rho, phi) @ Ji
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


@dataclass(frozen=True)
class GraspPose:
    """Rigid transform ``x -> R x + t``; fields may carry a leading batch shape."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape[-2:] != (3, 3) or t.shape[-1] != 3 or R.shape[:-2] != t.shape[:-1]:
            raise ValueError(f"incompatible pose shapes {R.shape} and {t.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, batch_shape=()) -> "GraspPose":
        batch_shape = tuple(np.atleast_1d(batch_shape)) if batch_shape != () else ()
        R = np.broadcast_to(np.eye(3), batch_shape + (3, 3)).copy()
        return cls(R, np.zeros(batch_shape + (3,)))

    @classmethod
    def from_matrix(cls, T) -> "GraspPose":
        T = np.asarray(T, dtype=float)
        return cls(T[..., :3, :3], T[..., :3, 3])

    @classmethod
    def from_quat_xyz(cls, q) -> "GraspPose":
        """Build from 7 numbers ``(qw, qx, qy, qz, x, y, z)`` per pose."""
        q = np.asarray(q, dtype=float)
        flat = q.reshape(-1, 7)
        rot = _ScipyRotation.from_quat(flat[:, [1, 2, 3, 0]]).as_matrix()
        return cls(rot.reshape(q.shape[:-1] + (3, 3)), q[..., 4:])

    def to_quat_xyz(self) -> np.ndarray:
        flat = self.rotation.reshape(-1, 3, 3)
        xyzw = _ScipyRotation.from_matrix(flat).as_quat()
        wxyz = xyzw[:, [3, 0, 1, 2]]
        # canonical hemisphere keeps serialized records deterministic
        wxyz = np.where(wxyz[:, :1] < 0, -wxyz, wxyz)
        out = np.concatenate([wxyz, self.translation.reshape(-1, 3)], axis=1)
        return out.reshape(self.translation.shape[:-1] + (7,))

    def as_matrix(self) -> np.ndarray:
        out = np.zeros(self.batch_shape + (4, 4))
        out[..., :3, :3] = self.rotation
        out[..., :3, 3] = self.translation
        out[..., 3, 3] = 1.0
        return out

    @property
    def batch_shape(self) -> tuple:
        return self.translation.shape[:-1]

    def __len__(self):
        return self.batch_shape[0]

    def __getitem__(self, idx) -> "GraspPose":
        return GraspPose(self.rotation[idx], self.translation[idx])

    def transform_points(self, p: np.ndarray) -> np.ndarray:
        """Map points (..., n, 3) given in this frame to the parent frame."""
        return np.einsum("...ij,...nj->...ni", self.rotation, p) + self.translation[..., None, :]


def stack_poses(poses) -> GraspPose:
    return GraspPose(np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses]))


def compose(a: GraspPose, b: GraspPose) -> GraspPose:
    return GraspPose(a.rotation @ b.rotation, np.einsum("...ij,...j->...i", a.rotation, b.translation) + a.translation)


def inverse(a: GraspPose) -> GraspPose:
    Rt = np.swapaxes(a.rotation, -1, -2)
    return GraspPose(Rt, -np.einsum("...ij,...j->...i", Rt, a.translation))


def se3_exp(xi: np.ndarray) -> GraspPose:
    xi = np.asarray(xi, dtype=float)
    v, w = xi[..., :3], xi[..., 3:]
    R = so3_exp(w)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(w), v)
    return GraspPose(R, t)


def se3_log(g: GraspPose) -> np.ndarray:
    w = so3_log(g.rotation)
    v = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(w), g.translation)
    return np.concatenate([v, w], axis=-1)


def retract(g: GraspPose, xi: np.ndarray) -> GraspPose:
    """Right update ``g * exp(xi)``."""
    return compose(g, se3_exp(xi))


def perturb(g: GraspPose, sigma: float, rng: np.random.Generator) -> GraspPose:
    """Return ``g * exp(sigma * eps)`` with ``eps`` standard normal in the tangent space."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    eps = rng.standard_normal(g.batch_shape + (6,))
    if sigma == 0:
        return g
    return retract(g, sigma * eps)


def relative_log(gamma: GraspPose, g: GraspPose) -> np.ndarray:
    """``Log(g^-1 gamma)``."""
    return se3_log(compose(inverse(g), gamma))


def zeta_log_density(gamma: GraspPose, g: GraspPose, sigma) -> np.ndarray:
    """Unnormalized log of the tangent-Gaussian perturbation kernel."""
    xi = relative_log(gamma, g)
    return -0.5 * np.sum(xi * xi, axis=-1) / np.asarray(sigma, dtype=float) ** 2


def zeta_score(gamma: GraspPose, g: GraspPose, sigma) -> np.ndarray:
    """Right-trivialized gradient of ``zeta_log_density`` with respect to ``gamma``.

    Differentiating ``-|Log(g^-1 gamma)|^2 / (2 sigma^2)`` along ``gamma exp(eps e_i)``
    gives ``-J_r^{-T}(xi) xi / sigma^2``; the rotational block of ``J_r^{-T}``
    leaves ``xi`` unchanged, only the translation coupling differs from ``-xi``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be > 0")
    xi = relative_log(gamma, g)
    Jinv = se3_right_jacobian_inv(xi)
    return -np.einsum("...ji,...j->...i", Jinv, xi) / (sigma**2)[..., None]


def pose_distance(a: GraspPose, b: GraspPose):
    """Rotation angle between the two orientations and Euclidean translation gap."""
    rel = np.swapaxes(a.rotation, -1, -2) @ b.rotation
    return rotation_angle(rel), np.linalg.norm(a.translation - b.translation, axis=-1)


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotations via normalized Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return _ScipyRotation.from_quat(q).as_matrix()


def tangent_point_velocity(points: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """World-frame velocity of body points under each right tangent basis direction.

    For ``g exp(eps e_i)`` a body point ``p`` moves with ``R (v_i + w_i x p)``.
    ``points`` has shape (m, 3) and ``rotation`` shape (..., 3, 3); the result has
    shape (..., 6, m, 3).
    """
    points = np.asarray(points, dtype=float)
    m = points.shape[0]
    local = np.zeros((6, m, 3))
    local[0, :, 0] = 1.0
    local[1, :, 1] = 1.0
    local[2, :, 2] = 1.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        local[3 + i] = np.cross(e, points)
    return np.einsum("...ij,kmj->...kmi", rotation, local)

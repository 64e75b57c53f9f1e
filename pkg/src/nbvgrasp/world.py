"""Procedural ground-truth scenes made of boxes, cylinders and spheres.

The world offers the analytic quantities the rest of the package is checked
against: exact signed distance, exact ray casting for depth images, and a
deterministic antipodal grasp-success rule for a parallel-jaw gripper.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .liegroup import GraspPose, compose, random_rotations, se3_exp, so3_exp

# Gripper geometry in the gripper frame: x is the closing axis, z the approach axis,
# the origin is the grasp center between the fingertips.
HALF_OPENING = 0.04
MAX_OPENING = 2 * HALF_OPENING
FINGER_LENGTH = 0.06
CAPSULE_RADIUS = 0.005
CLEARANCE = 0.005
FRICTION_HALF_ANGLE = math.radians(30.0)

ANCHORS = np.array(
    [
        [-HALF_OPENING, 0.0, 0.0],
        [HALF_OPENING, 0.0, 0.0],
        [-HALF_OPENING, 0.0, -FINGER_LENGTH / 2],
        [HALF_OPENING, 0.0, -FINGER_LENGTH / 2],
        [0.0, 0.0, -FINGER_LENGTH],
    ]
)
ANCHOR_NAMES = ("tip_left", "tip_right", "mid_left", "mid_right", "palm")

WORKSPACE_LO = np.array([-0.5, -0.5, 0.0])
WORKSPACE_HI = np.array([0.5, 0.5, 1.0])
TABLE_TOP = 0.0

RAY_EPS = 1e-9


class PlacementError(RuntimeError):
    pass


class NoGraspError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    """Solid resting in the scene; ``size`` is half extents (box),
    ``(radius, half_height)`` (cylinder, axis along local z) or ``(radius,)``."""

    kind: str
    rotation: np.ndarray
    center: np.ndarray
    size: tuple
    semantic: str = "clutter"

    def __post_init__(self):
        if self.kind not in ("box", "cylinder", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.semantic not in ("target", "clutter", "table"):
            raise ValueError(f"unknown semantic {self.semantic!r}")
        if any(s <= 0 for s in self.size):
            raise ValueError("primitive sizes must be positive")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @property
    def height(self) -> float:
        if self.kind == "box":
            return 2 * self.size[2]
        if self.kind == "cylinder":
            return 2 * self.size[1]
        return 2 * self.size[0]

    @property
    def footprint_radius(self) -> float:
        if self.kind == "box":
            return math.hypot(self.size[0], self.size[1])
        return self.size[0]

    def to_local(self, p):
        return (np.asarray(p, dtype=float) - self.center) @ self.rotation

    def sdf(self, p) -> np.ndarray:
        q = self.to_local(p)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.size)
        else:
            r, hh = self.size
            d = np.stack([np.linalg.norm(q[..., :2], axis=-1) - r, np.abs(q[..., 2]) - hh], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside

    def ray_interval(self, origins, dirs):
        """Parametric entry/exit (t_near, t_far) of rays ``o + t d`` (d need not be unit)."""
        o = self.to_local(origins)
        d = np.asarray(dirs, dtype=float) @ self.rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "sphere":
                return _quadratic_interval(d, o, self.size[0])
            if self.kind == "box":
                h = np.asarray(self.size)
                t1 = (-h - o) / d
                t2 = (h - o) / d
                lo = np.minimum(t1, t2)
                hi = np.maximum(t1, t2)
                # rays parallel to a slab: inside -> unbounded, outside -> empty
                par = d == 0.0
                inside = np.abs(o) <= h
                lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
                hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
                return lo.max(axis=-1), hi.min(axis=-1)
            r, hh = self.size
            dz = d[..., 2]
            t1 = (-hh - o[..., 2]) / dz
            t2 = (hh - o[..., 2]) / dz
            zlo = np.minimum(t1, t2)
            zhi = np.maximum(t1, t2)
            zpar = dz == 0.0
            zin = np.abs(o[..., 2]) <= hh
            zlo = np.where(zpar, np.where(zin, -np.inf, np.inf), zlo)
            zhi = np.where(zpar, np.where(zin, np.inf, -np.inf), zhi)
            d2 = d.copy()
            d2[..., 2] = 0.0
            o2 = o.copy()
            o2[..., 2] = 0.0
            slo, shi = _quadratic_interval(d2, o2, r)
            return np.maximum(zlo, slo), np.minimum(zhi, shi)

    def normal(self, p, h=1e-6) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        g = np.zeros_like(p)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[..., i] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def to_dict(self):
        return {
            "kind": self.kind,
            "rotation": self.rotation.tolist(),
            "center": self.center.tolist(),
            "size": list(self.size),
            "semantic": self.semantic,
        }


def _quadratic_interval(d, o, r):
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    a_safe = np.where(a > 0, a, 1.0)
    lo = np.where(ok, (-b - sq) / (2 * a_safe), np.inf)
    hi = np.where(ok, (-b + sq) / (2 * a_safe), -np.inf)
    # axis-parallel rays (a == 0) inside the circle are unbounded
    par_in = (a == 0) & (c <= 0)
    lo = np.where(par_in, -np.inf, lo)
    hi = np.where(par_in, np.inf, hi)
    return lo, hi


def yaw_rotation(yaw: float) -> np.ndarray:
    return so3_exp(np.array([0.0, 0.0, yaw]))


@dataclass(frozen=True)
class WorldScene:
    primitives: tuple
    target_id: int
    bounds: tuple = (WORKSPACE_LO, WORKSPACE_HI)
    seed: int = 0
    band: tuple = (0.0, 1.0)

    def __post_init__(self):
        n_target = sum(p.semantic == "target" for p in self.primitives)
        if n_target != 1 or self.primitives[self.target_id].semantic != "target":
            raise ValueError("a scene needs exactly one target primitive at target_id")

    @property
    def target(self) -> Primitive:
        return self.primitives[self.target_id]

    def to_dict(self):
        return {
            "seed": self.seed,
            "target_id": self.target_id,
            "band": list(self.band),
            "bounds": [np.asarray(b).tolist() for b in self.bounds],
            "primitives": [p.to_dict() for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, d):
        prims = tuple(
            Primitive(p["kind"], np.array(p["rotation"]), np.array(p["center"]), tuple(p["size"]), p["semantic"])
            for p in d["primitives"]
        )
        bounds = tuple(np.array(b) for b in d["bounds"])
        return cls(prims, d["target_id"], bounds, d["seed"], tuple(d["band"]))


def make_table(half_extent=0.75) -> Primitive:
    return Primitive("box", np.eye(3), np.array([0.0, 0.0, TABLE_TOP - 0.025]), (half_extent, half_extent, 0.025), "table")


def resting(kind, size, xy, yaw, semantic) -> Primitive:
    if kind == "box":
        z = size[2]
    elif kind == "cylinder":
        z = size[1]
    else:
        z = size[0]
    return Primitive(kind, yaw_rotation(yaw), np.array([xy[0], xy[1], TABLE_TOP + z]), size, semantic)


def target_band(target: Primitive, lo=0.3, hi=0.9) -> tuple:
    base = target.center[2] - target.height / 2
    return (base + lo * target.height, base + hi * target.height)


def _random_size(kind, rng, role):
    if role == "target":
        if kind == "box":
            return (rng.uniform(0.015, 0.028), rng.uniform(0.015, 0.045), rng.uniform(0.035, 0.07))
        if kind == "cylinder":
            return (rng.uniform(0.015, 0.028), rng.uniform(0.035, 0.07))
        return (rng.uniform(0.02, 0.028),)
    if kind == "box":
        return (rng.uniform(0.02, 0.05), rng.uniform(0.02, 0.05), rng.uniform(0.03, 0.1))
    if kind == "cylinder":
        return (rng.uniform(0.02, 0.045), rng.uniform(0.03, 0.1))
    return (rng.uniform(0.02, 0.04),)


def gen_scene(seed: int, n_clutter: int = 4, max_attempts: int = 200) -> WorldScene:
    """Deterministic cluttered tabletop; the target sits near the workspace center."""
    if n_clutter < 0:
        raise ValueError("n_clutter must be >= 0")
    rng = np.random.default_rng(seed)
    kind = rng.choice(["box", "cylinder", "sphere"], p=[0.45, 0.4, 0.15])
    target = resting(kind, _random_size(kind, rng, "target"), rng.uniform(-0.1, 0.1, 2), rng.uniform(0, np.pi), "target")
    prims = [make_table(), target]
    placed = [target]
    for _ in range(n_clutter):
        for _attempt in range(max_attempts):
            ck = rng.choice(["box", "cylinder", "sphere"], p=[0.5, 0.35, 0.15])
            size = _random_size(ck, rng, "clutter")
            cand = resting(ck, size, np.zeros(2), rng.uniform(0, np.pi), "clutter")
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(target.footprint_radius + cand.footprint_radius + 0.02, 0.3)
            xy = target.center[:2] + dist * np.array([np.cos(ang), np.sin(ang)])
            if np.any(np.abs(xy) > 0.5 - cand.footprint_radius):
                continue
            cand = resting(ck, size, xy, rng.uniform(0, np.pi), "clutter")
            gap_ok = all(
                np.linalg.norm(cand.center[:2] - q.center[:2]) > cand.footprint_radius + q.footprint_radius + 0.01
                for q in placed
            )
            if gap_ok:
                prims.append(cand)
                placed.append(cand)
                break
        else:
            raise PlacementError(f"could not place clutter object after {max_attempts} attempts (seed {seed})")
    return WorldScene(tuple(prims), 1, (WORKSPACE_LO.copy(), WORKSPACE_HI.copy()), int(seed), target_band(target))


def sdf(scene: WorldScene, p) -> np.ndarray:
    """Exact signed distance to the union of all primitives."""
    p = np.asarray(p, dtype=float)
    return np.min(np.stack([prim.sdf(p) for prim in scene.primitives]), axis=0)


def sdf_split(scene: WorldScene, p):
    """(distance to target, distance to everything else)."""
    p = np.asarray(p, dtype=float)
    other = [prim.sdf(p) for i, prim in enumerate(scene.primitives) if i != scene.target_id]
    return scene.target.sdf(p), np.min(np.stack(other), axis=0)


def cast_rays(scene: WorldScene, origins, dirs, exclude=()):
    """Nearest hit parameter ``t`` (inf when nothing is hit) and primitive index (-1)."""
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    shape = np.broadcast_shapes(origins.shape, dirs.shape)[:-1]
    best = np.full(shape, np.inf)
    ids = np.full(shape, -1, dtype=int)
    for i, prim in enumerate(scene.primitives):
        if i in exclude:
            continue
        lo, hi = prim.ray_interval(origins, dirs)
        hit = (lo <= hi) & (hi > RAY_EPS)
        t = np.where(lo > RAY_EPS, lo, hi)
        t = np.where(hit, t, np.inf)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, i, ids)
    return best, ids


# -- cameras ----------------------------------------------------------------


@dataclass(frozen=True)
class ViewPose:
    """Pinhole camera; ``pose`` maps camera coordinates (z forward, y down) to world."""

    pose: GraspPose
    focal: float = 80.0
    width: int = 64
    height: int = 64
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def pixel_dirs_camera(self, pixels=None) -> np.ndarray:
        """Un-normalized camera-frame ray directions with unit z component."""
        if pixels is None:
            v, u = np.mgrid[0 : self.height, 0 : self.width]
            pixels = np.stack([u.ravel(), v.ravel()], axis=-1).astype(float)
        pixels = np.asarray(pixels, dtype=float)
        return np.stack(
            [(pixels[..., 0] - self.cx) / self.focal, (pixels[..., 1] - self.cy) / self.focal, np.ones(pixels.shape[:-1])],
            axis=-1,
        )

    def pixel_dirs_world(self, pixels=None) -> np.ndarray:
        return self.pixel_dirs_camera(pixels) @ self.pose.rotation.T

    def to_dict(self):
        return {
            "rotation": self.pose.rotation.tolist(),
            "translation": self.pose.translation.tolist(),
            "focal": self.focal,
            "width": self.width,
            "height": self.height,
            "cx": self.cx,
            "cy": self.cy,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(GraspPose(np.array(d["rotation"]), np.array(d["translation"])), d["focal"], d["width"], d["height"], d["cx"], d["cy"])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> GraspPose:
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(np.dot(up, z)) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    y = -(up - np.dot(up, z) * z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return GraspPose(np.stack([x, y, z], axis=1), eye)


def view_on_sphere(center, radius, azimuth, elevation, **intrinsics) -> ViewPose:
    center = np.asarray(center, dtype=float)
    d = np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)])
    return ViewPose(look_at(center + radius * d, center), **intrinsics)


@dataclass
class DepthImage:
    """z-depth (inf where nothing is hit) and per-pixel primitive index (-1)."""

    depth: np.ndarray
    prim_id: np.ndarray
    target_mask: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.depth)


def raycast_depth(scene: WorldScene, view: ViewPose, pixel):
    """z-depth along the ray through ``pixel`` = (u, v); ``None`` on no hit."""
    d = view.pixel_dirs_world(np.asarray(pixel, dtype=float)[None])
    t, _ = cast_rays(scene, view.center[None], d)
    return None if not np.isfinite(t[0]) else float(t[0])


def render_depth_image(scene: WorldScene, view: ViewPose) -> DepthImage:
    d = view.pixel_dirs_world()
    t, ids = cast_rays(scene, view.center[None], d)
    shape = (view.height, view.width)
    return DepthImage(t.reshape(shape), ids.reshape(shape), (ids == scene.target_id).reshape(shape))


def backproject(view: ViewPose, image: DepthImage):
    """World points of every hit pixel and their target labels."""
    dirs = view.pixel_dirs_world()
    depth = image.depth.ravel()
    ok = np.isfinite(depth)
    pts = view.center + dirs[ok] * depth[ok, None]
    return pts, image.target_mask.ravel()[ok]


# -- grasp oracle -------------------------------------------------------------


def _segment_points(a, b, n):
    s = np.linspace(0.0, 1.0, n)[:, None]
    return a[None] * (1 - s) + b[None] * s


_FINGER_L = _segment_points(np.array([-HALF_OPENING, 0, -FINGER_LENGTH]), np.array([-HALF_OPENING, 0, 0]), 7)
_FINGER_R = _segment_points(np.array([HALF_OPENING, 0, -FINGER_LENGTH]), np.array([HALF_OPENING, 0, 0]), 7)
_PALM = _segment_points(np.array([-HALF_OPENING, 0, -FINGER_LENGTH]), np.array([HALF_OPENING, 0, -FINGER_LENGTH]), 9)
BODY_POINTS = np.concatenate([_FINGER_L, _FINGER_R, _PALM])


def _as_batch(g: GraspPose) -> GraspPose:
    if g.translation.ndim == 1:
        return GraspPose(g.rotation[None], g.translation[None])
    return g


def grasp_oracle(scene: WorldScene, g: GraspPose, details: bool = False):
    """Deterministic antipodal success rule; returns a bool array (or scalar).

    A grasp succeeds when the rays from both fingertips along the closing axis
    first hit the target within the opening, both contact normals lie inside
    the friction cone, the open and closing gripper body keeps ``CLEARANCE``
    from every non-target surface and does not penetrate the target, and the
    grasp center lies in the target's graspable height band.
    """
    single = g.translation.ndim == 1
    g = _as_batch(g)
    R, t = g.rotation, g.translation
    n = t.shape[0]
    xg = R[:, :, 0]
    tip_l = t - HALF_OPENING * xg
    tip_r = t + HALF_OPENING * xg

    tl, idl = cast_rays(scene, tip_l, xg)
    tr, idr = cast_rays(scene, tip_r, -xg)
    contact = (idl == scene.target_id) & (idr == scene.target_id) & (tl <= MAX_OPENING) & (tr <= MAX_OPENING)
    contact &= (tl + tr) <= MAX_OPENING

    pl = tip_l + np.where(np.isfinite(tl), tl, 0.0)[:, None] * xg
    pr = tip_r - np.where(np.isfinite(tr), tr, 0.0)[:, None] * xg
    nl = scene.target.normal(pl)
    nr = scene.target.normal(pr)
    cos_lim = math.cos(FRICTION_HALF_ANGLE)
    friction = (np.sum(nl * -xg, axis=1) >= cos_lim) & (np.sum(nr * xg, axis=1) >= cos_lim)

    need = CAPSULE_RADIUS + CLEARANCE
    body = g.transform_points(np.broadcast_to(BODY_POINTS, (n,) + BODY_POINTS.shape))
    d_tgt, d_other = sdf_split(scene, body)
    # the target itself only has to stay unpenetrated; clearance is for everything else
    free_open = (d_other.min(axis=1) >= need) & (d_tgt.min(axis=1) >= CAPSULE_RADIUS)

    # closing sweep: fingers translate inward until they touch the contacts
    close_l = np.where(contact, tl - CAPSULE_RADIUS, 0.0)
    close_r = np.where(contact, tr - CAPSULE_RADIUS, 0.0)
    free_sweep = np.ones(n, dtype=bool)
    for frac in (0.5, 1.0):
        fl = g.transform_points(np.broadcast_to(_FINGER_L[:-1], (n,) + _FINGER_L[:-1].shape)) + (frac * close_l)[:, None, None] * xg[:, None, :]
        fr = g.transform_points(np.broadcast_to(_FINGER_R[:-1], (n,) + _FINGER_R[:-1].shape)) - (frac * close_r)[:, None, None] * xg[:, None, :]
        pts = np.concatenate([fl, fr], axis=1)
        dt, do = sdf_split(scene, pts)
        free_sweep &= (do.min(axis=1) >= need) & (dt.min(axis=1) >= 0.5 * CAPSULE_RADIUS)

    band = (t[:, 2] >= scene.band[0]) & (t[:, 2] <= scene.band[1])
    ok = contact & friction & free_open & free_sweep & band
    if details:
        info = {"contact": contact, "friction": friction, "free_open": free_open, "free_sweep": free_sweep, "band": band}
        return (ok[0] if single else ok), info
    return bool(ok[0]) if single else ok


def gripper_clear_of_table(g: GraspPose, table_top=TABLE_TOP) -> np.ndarray:
    """Feasibility filter: every body point stays above the table by the clearance."""
    g = _as_batch(g)
    body = g.transform_points(np.broadcast_to(BODY_POINTS, (len(g),) + BODY_POINTS.shape))
    return body[..., 2].min(axis=1) - table_top >= CAPSULE_RADIUS + CLEARANCE


# -- labeled grasps -------------------------------------------------------------


@dataclass(frozen=True)
class LabeledGrasp:
    pose: GraspPose
    label: bool
    scene_seed: int

    def to_record(self) -> dict:
        return {
            "pose": [round(float(x), 12) for x in self.pose.to_quat_xyz()],
            "label": "success" if self.label else "failure",
            "scene_seed": int(self.scene_seed),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledGrasp":
        if rec["label"] not in ("success", "failure"):
            raise ValueError(f"bad label {rec['label']!r}")
        return cls(GraspPose.from_quat_xyz(np.array(rec["pose"])), rec["label"] == "success", int(rec["scene_seed"]))


def approach_rotation(approach, yaw) -> np.ndarray:
    """Gripper rotation whose z axis is ``approach``, spun by ``yaw`` about it."""
    z = np.asarray(approach, dtype=float)
    z = z / np.linalg.norm(z)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = ref - np.dot(ref, z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    base = np.stack([x, y, z], axis=1)
    return base @ so3_exp(np.array([0.0, 0.0, yaw]))


def canonical_grasps(scene: WorldScene, n_heights=5) -> GraspPose:
    """Approach directions (top-down, horizontal, 45 degrees) x closing yaws x band heights."""
    dirs = [np.array([0.0, 0.0, -1.0])]
    for k in range(8):
        a = k * np.pi / 4
        dirs.append(np.array([np.cos(a), np.sin(a), 0.0]))
        dirs.append(np.array([np.cos(a), np.sin(a), -1.0]) / math.sqrt(2))
    yaws = np.arange(8) * np.pi / 8
    heights = np.linspace(scene.band[0], scene.band[1], n_heights)
    c = scene.target.center
    Rs, ts = [], []
    for d in dirs:
        for yaw in yaws:
            R = approach_rotation(d, yaw)
            for h in heights:
                Rs.append(R)
                ts.append(np.array([c[0], c[1], h]))
    return GraspPose(np.array(Rs), np.array(ts))


def uniform_poses(n, rng, lo=WORKSPACE_LO, hi=WORKSPACE_HI) -> GraspPose:
    return GraspPose(random_rotations(n, rng), rng.uniform(lo, hi, size=(n, 3)))


def jitter(g: GraspPose, rng, trans_sigma=0.01, rot_sigma=0.15) -> GraspPose:
    n = len(g)
    xi = np.concatenate([trans_sigma * rng.standard_normal((n, 3)), rot_sigma * rng.standard_normal((n, 3))], axis=1)
    return compose(g, se3_exp(xi))


def successful_seeds(scene: WorldScene) -> GraspPose:
    cand = canonical_grasps(scene)
    ok = grasp_oracle(scene, cand)
    return cand[ok]


def sample_labeled_grasps(
    scene: WorldScene, n: int, rng: np.random.Generator, balanced: bool = True, success_fraction: float = 0.5,
    max_rounds: int = 50,
) -> list:
    """Oracle-labeled grasps mixing jittered successful seeds with uniform poses.

    With ``balanced`` the success share is ``success_fraction`` (when the
    jitter search finds enough successes within ``max_rounds``).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    seeds = successful_seeds(scene)
    if len(seeds) == 0:
        raise NoGraspError(f"no successful grasp found for scene {scene.seed}")
    n_succ = int(round(n * success_fraction)) if balanced else n // 2
    succ_R, succ_t, fail_R, fail_t = [], [], [], []
    n_s = n_f = 0
    for _ in range(max_rounds):
        idx = rng.integers(0, len(seeds), size=max(2 * n, 16))
        cand = jitter(seeds[idx], rng)
        lab = grasp_oracle(scene, cand)
        if balanced:
            take = cand[lab]
            succ_R.append(take.rotation)
            succ_t.append(take.translation)
            n_s += len(take)
            bad = cand[~lab]
            fail_R.append(bad.rotation)
            fail_t.append(bad.translation)
            n_f += len(bad)
            if n_s >= n_succ:
                break
        else:
            succ_R.append(cand.rotation[: n // 2])
            succ_t.append(cand.translation[: n // 2])
            n_s = n // 2
            break
    if balanced:
        S = GraspPose(np.concatenate(succ_R)[:n_succ], np.concatenate(succ_t)[:n_succ])
        n_rest = n - len(S)
        n_hard = n_rest // 2
        F_hard = GraspPose(np.concatenate(fail_R)[:n_hard], np.concatenate(fail_t)[:n_hard])
        U = uniform_poses(n_rest - len(F_hard), rng)
        poses = GraspPose(
            np.concatenate([S.rotation, F_hard.rotation, U.rotation]),
            np.concatenate([S.translation, F_hard.translation, U.translation]),
        )
    else:
        J = GraspPose(np.concatenate(succ_R), np.concatenate(succ_t))
        U = uniform_poses(n - len(J), rng)
        poses = GraspPose(np.concatenate([J.rotation, U.rotation]), np.concatenate([J.translation, U.translation]))
    labels = grasp_oracle(scene, poses)
    order = rng.permutation(len(poses))
    return [LabeledGrasp(poses[i], bool(labels[i]), scene.seed) for i in order]


def write_dataset(path, grasps) -> Path:
    """One JSON object per line: ``{"pose": [qw,qx,qy,qz,x,y,z], "label", "scene_seed"}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for g in grasps:
            fh.write(json.dumps(g.to_record(), sort_keys=True) + "\n")
    return path


def read_dataset(path) -> list:
    with open(path) as fh:
        return [LabeledGrasp.from_record(json.loads(line)) for line in fh if line.strip()]


def grasps_to_pose(grasps) -> GraspPose:
    return GraspPose(np.stack([g.pose.rotation for g in grasps]), np.stack([g.pose.translation for g in grasps]))

"""Isotropic point-kernel scene estimate fitted to depth views.

Each kernel carries a center, an isotropic scale, an opacity and a foreground
probability. Depth is rendered by front-to-back alpha compositing along pixel
rays; analytic Jacobians of the rendered depth give the diagonal Gauss-Newton
precision of the kernel parameters, both for fitted views and for
hypothetical ones.

Parameter layout per kernel (6 numbers): ``mu_x, mu_y, mu_z, log s, logit alpha,
logit semantic``; the flat parameter vector is the row-major ravel of the
``(K, 6)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.special import expit, logit
from sklearn.base import BaseEstimator

from .diffgraph import Adam, load_arrays, save_arrays
from .world import DepthImage, ViewPose, backproject

N_PARAMS = 6
MU, LOG_S, LOGIT_A, LOGIT_SEM = slice(0, 3), 3, 4, 5
NEAR = 0.02
DEFAULT_LAMBDA = 1e-2


class EmptyViewError(ValueError):
    pass


class NoForegroundError(RuntimeError):
    pass


@dataclass(frozen=True)
class Observation:
    view: ViewPose
    image: DepthImage


@dataclass
class SceneEstimate:
    params: np.ndarray
    observations: list = field(default_factory=list)

    @property
    def n_kernels(self) -> int:
        return self.params.shape[0]

    @property
    def mu(self):
        return self.params[:, MU]

    @property
    def scale(self):
        return np.exp(self.params[:, LOG_S])

    @property
    def alpha(self):
        return expit(self.params[:, LOGIT_A])

    @property
    def semantic(self):
        return expit(self.params[:, LOGIT_SEM])

    @property
    def vector(self) -> np.ndarray:
        return self.params.ravel()

    @property
    def views(self) -> list:
        return [o.view for o in self.observations]

    def copy(self) -> "SceneEstimate":
        return SceneEstimate(self.params.copy(), list(self.observations))

    def save(self, path):
        arrays = {"params": self.params}
        meta = {"kind": "scene_estimate", "views": [o.view.to_dict() for o in self.observations]}
        for i, o in enumerate(self.observations):
            arrays[f"depth_{i}"] = o.image.depth
            arrays[f"prim_{i}"] = o.image.prim_id.astype(float)
            arrays[f"mask_{i}"] = o.image.target_mask.astype(float)
        return save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "SceneEstimate":
        arrays, meta = load_arrays(path)
        obs = []
        for i, vd in enumerate(meta.get("views", [])):
            img = DepthImage(arrays[f"depth_{i}"], arrays[f"prim_{i}"].astype(int), arrays[f"mask_{i}"] > 0.5)
            obs.append(Observation(ViewPose.from_dict(vd), img))
        return cls(arrays["params"], obs)


@dataclass(frozen=True)
class PrecisionDiag:
    """Data term per parameter plus the separately recorded regularizer."""

    data: np.ndarray
    lam: float = DEFAULT_LAMBDA

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel() + self.lam

    def __add__(self, other: "PrecisionDiag") -> "PrecisionDiag":
        return PrecisionDiag(self.data + other.data, self.lam)


# -- renderer ------------------------------------------------------------------


@dataclass
class _RenderCache:
    shape: tuple
    pix: np.ndarray
    ker: np.ndarray
    a: np.ndarray
    q: np.ndarray
    z: np.ndarray
    T: np.ndarray
    perp: np.ndarray
    alpha: np.ndarray
    scale2: np.ndarray
    sem: np.ndarray
    depth: np.ndarray
    sem_img: np.ndarray
    cum_depth: np.ndarray
    cum_sem: np.ndarray
    rotation: np.ndarray
    z_bg: float


def _pairs(mc, scale, view: ViewPose, cutoff):
    """Candidate (pixel, kernel) pairs; all pairs of visible kernels when ``cutoff`` is None."""
    W, H = view.width, view.height
    vis = np.flatnonzero(mc[:, 2] > NEAR)
    if cutoff is None:
        pix = np.repeat(np.arange(W * H), vis.size)
        ker = np.tile(vis, W * H)
        return pix, ker
    z = mc[vis, 2]
    u = view.focal * mc[vis, 0] / z + view.cx
    v = view.focal * mc[vis, 1] / z + view.cy
    rp = 1.25 * cutoff * scale[vis] * view.focal / z + 1.0
    u0 = np.clip(np.ceil(u - rp), 0, W).astype(int)
    u1 = np.clip(np.floor(u + rp), -1, W - 1).astype(int)
    v0 = np.clip(np.ceil(v - rp), 0, H).astype(int)
    v1 = np.clip(np.floor(v + rp), -1, H - 1).astype(int)
    wu = np.maximum(u1 - u0 + 1, 0)
    wv = np.maximum(v1 - v0 + 1, 0)
    counts = wu * wv
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, int), np.zeros(0, int)
    which = np.repeat(np.arange(vis.size), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    du = local % wu[which]
    dv = local // wu[which]
    pix = (v0[which] + dv) * W + (u0[which] + du)
    return pix, vis[which]


def _render(params: np.ndarray, view: ViewPose, cutoff=3.0, z_bg=2.0) -> _RenderCache:
    R, t = view.pose.rotation, view.pose.translation
    mc = (params[:, MU] - t) @ R
    scale = np.exp(params[:, LOG_S])
    alpha = expit(params[:, LOGIT_A])
    sem = expit(params[:, LOGIT_SEM])
    pix, ker = _pairs(mc, scale, view, cutoff)
    dirs = view.pixel_dirs_camera()
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    m = mc[ker]
    d = dirs[pix]
    along = np.sum(m * d, axis=1)
    perp = m - along[:, None] * d
    s2 = scale[ker] ** 2
    q = np.sum(perp * perp, axis=1) / (2 * s2)
    if cutoff is not None:
        keep = q < 0.5 * cutoff**2
        pix, ker, m, perp, q, s2 = pix[keep], ker[keep], m[keep], perp[keep], q[keep], s2[keep]
    z = m[:, 2]
    # kernels are ordered once per view by camera depth, then grouped per pixel; equal
    # depths are common (back-projected pixel rows) and are broken by the kernel's own
    # values so the order does not depend on storage order
    rank = np.empty(params.shape[0], dtype=np.int64)
    rank[np.lexsort((scale, mc[:, 1], mc[:, 0], mc[:, 2]))] = np.arange(params.shape[0])
    order = np.argsort(pix.astype(np.int64) * params.shape[0] + rank[ker], kind="stable")
    pix, ker, perp, q, s2, z = pix[order], ker[order], perp[order], q[order], s2[order], z[order]
    a = alpha[ker] * np.exp(-q)
    n_pix = view.width * view.height
    log1m = np.log1p(-a)
    cum = np.cumsum(log1m)
    seg_start = np.searchsorted(pix, np.arange(n_pix))
    seg_end = np.searchsorted(pix, np.arange(n_pix), side="right")
    base = np.concatenate([[0.0], cum])
    excl = cum - log1m - base[seg_start[pix]]
    T = np.exp(excl)
    total_log = base[seg_end] - base[seg_start]
    T_end = np.exp(total_log)
    w = T * a
    depth = np.bincount(pix, w * z, minlength=n_pix) + T_end * z_bg
    sem_img = np.bincount(pix, w * sem[ker], minlength=n_pix)
    # inclusive per-pixel cumulative sums for the compositing derivative
    cdz = np.cumsum(w * z)
    cdz = cdz - np.concatenate([[0.0], cdz])[seg_start[pix]]
    cds = np.cumsum(w * sem[ker])
    cds = cds - np.concatenate([[0.0], cds])[seg_start[pix]]
    return _RenderCache(
        (view.height, view.width), pix, ker, a, q, z, T, perp, alpha, s2, sem, depth, sem_img, cdz, cds, R, z_bg
    )


def _pair_jacobian(c: _RenderCache, depth_px, cum, value):
    """d(image)/d(params) per pair for the composited channel ``value`` (per pair)."""
    one_m = 1.0 - c.a
    dD_da = c.T * value - (depth_px[c.pix] - cum) / one_m
    k = c.ker
    J = np.zeros((c.pix.size, N_PARAMS))
    da_dmu_cam = -c.a[:, None] * c.perp / c.scale2[:, None]
    J[:, MU] = (dD_da[:, None] * da_dmu_cam) @ c.rotation.T
    J[:, LOG_S] = dD_da * 2.0 * c.q * c.a
    J[:, LOGIT_A] = dD_da * c.a * (1.0 - c.alpha[k])
    return J


def _depth_jacobian(c: _RenderCache):
    J = _pair_jacobian(c, c.depth, c.cum_depth, c.z)
    # the compositing order is piecewise constant, so only the value term of z moves
    J[:, MU] += (c.T * c.a)[:, None] * c.rotation[:, 2][None, :]
    return J


def _sem_jacobian(c: _RenderCache):
    J = _pair_jacobian(c, c.sem_img, c.cum_sem, c.sem[c.ker])
    s = c.sem[c.ker]
    J[:, LOGIT_SEM] = c.T * c.a * s * (1 - s)
    return J


def _scatter(ker, rows, n_kernels):
    out = np.zeros((n_kernels, N_PARAMS))
    for j in range(N_PARAMS):
        out[:, j] = np.bincount(ker, rows[:, j], minlength=n_kernels)
    return out


def render_expected_depth(w, view: ViewPose, cutoff=3.0, z_bg=2.0) -> np.ndarray:
    """Expected depth image; pixels no kernel reaches get ``z_bg``."""
    params = w.params if isinstance(w, SceneEstimate) else np.asarray(w, dtype=float)
    return _render(params, view, cutoff, z_bg).depth.reshape(view.height, view.width)


def render_semantic(w, view: ViewPose, cutoff=3.0) -> np.ndarray:
    params = w.params if isinstance(w, SceneEstimate) else np.asarray(w, dtype=float)
    return _render(params, view, cutoff).sem_img.reshape(view.height, view.width)


def depth_vjp(w, view: ViewPose, upstream: np.ndarray, cutoff=3.0, z_bg=2.0) -> np.ndarray:
    """Gradient of ``sum(upstream * depth)`` with respect to the ``(K, 6)`` parameters."""
    params = w.params if isinstance(w, SceneEstimate) else np.asarray(w, dtype=float)
    c = _render(params, view, cutoff, z_bg)
    J = _depth_jacobian(c)
    return _scatter(c.ker, J * np.ravel(upstream)[c.pix, None], params.shape[0])


def view_data_term(params: np.ndarray, view: ViewPose, cutoff=3.0, z_bg=2.0) -> np.ndarray:
    """Sum over pixels of squared depth Jacobians, per parameter, shape (K, 6)."""
    c = _render(params, view, cutoff, z_bg)
    J = _depth_jacobian(c)
    return _scatter(c.ker, J * J, params.shape[0])


def accumulate_precision(w: SceneEstimate, views=None, lam=DEFAULT_LAMBDA, cutoff=3.0) -> PrecisionDiag:
    views = w.views if views is None else views
    data = np.zeros_like(w.params)
    for v in views:
        data += view_data_term(w.params, v, cutoff)
    return PrecisionDiag(data, lam)


def precision_delta(w: SceneEstimate, x_acq: ViewPose, cutoff=3.0) -> PrecisionDiag:
    """Precision increment from hypothetically observing ``x_acq`` (image independent)."""
    return PrecisionDiag(view_data_term(w.params, x_acq, cutoff), 0.0)


# -- fitting ---------------------------------------------------------------------


def farthest_point_sampling(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Indices of ``min(k, n)`` points chosen greedily by max-min distance."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if k >= n:
        return np.arange(n)
    if k <= 0:
        return np.zeros(0, dtype=int)
    idx = np.empty(k, dtype=int)
    idx[0] = start
    dist = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, k):
        j = int(np.argmax(dist))
        idx[i] = j
        dist = np.minimum(dist, np.sum((points - points[j]) ** 2, axis=1))
    return idx


def _stratified_select(points, is_fg, k, fg_max):
    fg = np.flatnonzero(is_fg)
    bg = np.flatnonzero(~is_fg)
    sel_fg = fg[farthest_point_sampling(points[fg], min(fg_max, k))] if fg.size else fg
    sel_bg = bg[farthest_point_sampling(points[bg], k - sel_fg.size)] if bg.size else bg
    return np.concatenate([sel_fg, sel_bg])


def _fit_loss_grad(params, observations, cutoff, z_bg, sem_weight):
    loss = 0.0
    grad = np.zeros_like(params)
    n_views = len(observations)
    for o in observations:
        c = _render(params, o.view, cutoff, z_bg)
        target = np.where(np.isfinite(o.image.depth), o.image.depth, z_bg).ravel()
        mask = o.image.target_mask.ravel().astype(float)
        n = target.size
        res = c.depth - target
        loss += np.sum(res**2) / (n * n_views)
        s = np.clip(c.sem_img, 1e-6, 1 - 1e-6)
        bce = -(mask * np.log(s) + (1 - mask) * np.log(1 - s))
        loss += sem_weight * np.sum(bce) / (n * n_views)
        g_depth = 2 * res / (n * n_views)
        g_sem = sem_weight * (s - mask) / (s * (1 - s)) / (n * n_views)
        g_sem = np.where((c.sem_img > 1e-6) & (c.sem_img < 1 - 1e-6), g_sem, 0.0)
        Jd = _depth_jacobian(c)
        Js = _sem_jacobian(c)
        rows = Jd * g_depth[c.pix, None] + Js * g_sem[c.pix, None]
        grad += _scatter(c.ker, rows, params.shape[0])
    return loss, grad


def initial_params(points, labels, scale_floor=1e-3, alpha0=0.9):
    points = np.asarray(points, dtype=float)
    if points.shape[0] > 1:
        dist, _ = cKDTree(points).query(points, k=2)
        s = np.maximum(0.6 * dist[:, 1], scale_floor)
    else:
        s = np.full(points.shape[0], 0.01)
    out = np.zeros((points.shape[0], N_PARAMS))
    out[:, MU] = points
    out[:, LOG_S] = np.log(s)
    out[:, LOGIT_A] = logit(alpha0)
    out[:, LOGIT_SEM] = np.where(labels, 3.0, -3.0)
    return out


def fit_from_views(
    observations, k: int = 1024, fg_max: int = 512, steps: int = 300, lr: float = 1e-2, mu_lr_scale: float = 0.1,
    cutoff: float = 3.0, z_bg: float = 2.0, sem_weight: float = 1e-3, warm_start: SceneEstimate | None = None,
    callback=None,
) -> SceneEstimate:
    """Back-project, downsample with semantic-stratified FPS, refine with Adam.

    With ``warm_start`` the existing kernels join the candidate pool (listed
    first so FPS starts from them) and keep their parameters when chosen.
    """
    observations = list(observations)
    if not observations:
        raise EmptyViewError("need at least one view")
    pts, labs = [], []
    new_obs = observations if warm_start is None else observations[len(warm_start.observations):]
    for o in new_obs:
        p, lab = backproject(o.view, o.image)
        pts.append(p)
        labs.append(lab)
    new_pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    new_lab = np.concatenate(labs) if labs else np.zeros(0, bool)
    if warm_start is None and new_pts.shape[0] == 0:
        raise EmptyViewError("no view hit any surface")
    if warm_start is not None:
        old = warm_start.params
        pool = np.concatenate([old[:, MU], new_pts])
        pool_fg = np.concatenate([warm_start.semantic > 0.5, new_lab])
    else:
        pool, pool_fg = new_pts, new_lab
    sel = _stratified_select(pool, pool_fg, k, fg_max)
    params = initial_params(pool[sel], pool_fg[sel])
    if warm_start is not None:
        from_old = sel < warm_start.n_kernels
        params[from_old] = warm_start.params[sel[from_old]]
    if steps > 0:
        lr_arr = np.full(N_PARAMS, lr)
        lr_arr[MU] *= mu_lr_scale
        opt = Adam([params.shape], lr=1.0)
        for it in range(steps):
            loss, grad = _fit_loss_grad(params, observations, cutoff, z_bg, sem_weight)
            (step,) = opt.step([np.zeros_like(params)], [grad])
            params = params + step * lr_arr
            if callback is not None:
                callback(it, loss)
    return SceneEstimate(params, observations)


# -- foreground extraction ---------------------------------------------------------


@dataclass(frozen=True)
class SceneInput:
    """Network input rows ``position || semantic`` (fg rows first) plus provenance."""

    rows: np.ndarray
    kernel_index: np.ndarray
    n_fg: int = 512

    @property
    def points(self):
        return self.rows[:, :3]

    @property
    def fg_points(self):
        return self.rows[: self.n_fg, :3]

    @property
    def bg_points(self):
        return self.rows[self.n_fg :, :3]

    @property
    def center(self):
        return self.fg_points.mean(axis=0)

    @classmethod
    def from_points(cls, fg, bg, n_per=512, fg_index=None, bg_index=None):
        fg = np.asarray(fg, dtype=float)
        bg = np.asarray(bg, dtype=float)
        if fg.shape[0] == 0:
            raise NoForegroundError("empty foreground")
        if bg.shape[0] == 0:
            bg, bg_index = fg, fg_index
        fi = _fps_pad(fg, n_per)
        bi = _fps_pad(bg, n_per)
        rows = np.zeros((2 * n_per, 6))
        rows[:n_per, :3] = fg[fi]
        rows[:n_per, 3:] = 1.0
        rows[n_per:, :3] = bg[bi]
        fg_index = np.arange(fg.shape[0]) if fg_index is None else np.asarray(fg_index)
        bg_index = np.arange(bg.shape[0]) if bg_index is None else np.asarray(bg_index)
        return cls(rows, np.concatenate([fg_index[fi], bg_index[bi]]), n_per)

    def with_points(self, points) -> "SceneInput":
        rows = self.rows.copy()
        rows[:, :3] = points
        return SceneInput(rows, self.kernel_index, self.n_fg)


def _fps_pad(points, n):
    idx = farthest_point_sampling(points, n)
    if idx.size < n:
        # repeat rows to reach the fixed size; max-pooled features are unaffected
        idx = np.resize(idx, n)
    return idx


def extract_foreground(w: SceneEstimate, r: float = 0.2, link: float = 0.01, min_size: int = 50, n_per: int = 512):
    """Largest foreground cluster and the remaining kernels inside the ball of radius ``r``.

    Returns ``(fg_index, bg_index)`` kernel indices before downsampling.
    """
    fg = np.flatnonzero(w.semantic > 0.5)
    if fg.size == 0:
        raise NoForegroundError("no kernel is labeled foreground")
    pairs = cKDTree(w.mu[fg]).query_pairs(link, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(fg.size, fg.size))
    _, comp = connected_components(graph, directed=False)
    sizes = np.bincount(comp)
    best = int(np.argmax(sizes))
    if sizes[best] < min_size:
        raise NoForegroundError(f"largest foreground cluster has {sizes[best]} < {min_size} kernels")
    cluster = fg[comp == best]
    center = w.mu[cluster].mean(axis=0)
    in_ball = np.linalg.norm(w.mu - center, axis=1) <= r
    rest = np.setdiff1d(np.flatnonzero(in_ball), cluster)
    return cluster, rest


def scene_input_from_estimate(w: SceneEstimate, r: float = 0.2, n_per: int = 512, **kw) -> SceneInput:
    fg_idx, bg_idx = extract_foreground(w, r, **kw)
    return SceneInput.from_points(w.mu[fg_idx], w.mu[bg_idx], n_per, fg_idx, bg_idx)


def kernel_gradient(scene_input: SceneInput, row_grad: np.ndarray, n_kernels: int) -> np.ndarray:
    """Pull a per-row position gradient back to the (K, 6) kernel parameters."""
    out = np.zeros((n_kernels, N_PARAMS))
    np.add.at(out[:, MU], scene_input.kernel_index, row_grad)
    return out


class KernelSceneModel(BaseEstimator):
    """Estimator wrapper: ``fit`` on observations, ``transform`` to network input."""

    def __init__(self, n_kernels=1024, fg_max=512, steps=300, refine_steps=None, lr=1e-2, mu_lr_scale=0.1,
                 cutoff=3.0, sem_weight=1e-3, lam=DEFAULT_LAMBDA, radius=0.2):
        self.n_kernels = n_kernels
        self.fg_max = fg_max
        self.steps = steps
        self.refine_steps = refine_steps
        self.lr = lr
        self.mu_lr_scale = mu_lr_scale
        self.cutoff = cutoff
        self.sem_weight = sem_weight
        self.lam = lam
        self.radius = radius

    def _fit_kw(self, steps):
        return dict(k=self.n_kernels, fg_max=self.fg_max, steps=steps, lr=self.lr, mu_lr_scale=self.mu_lr_scale,
                    cutoff=self.cutoff, sem_weight=self.sem_weight)

    def fit(self, observations, y=None):
        self.estimate_ = fit_from_views(observations, **self._fit_kw(self.steps))
        return self

    def partial_fit(self, new_observations):
        """Warm-started refit after appending observations."""
        if not hasattr(self, "estimate_"):
            return self.fit(new_observations)
        steps = self.steps if self.refine_steps is None else self.refine_steps
        obs = list(self.estimate_.observations) + list(new_observations)
        self.estimate_ = fit_from_views(obs, warm_start=self.estimate_, **self._fit_kw(steps))
        return self

    def transform(self, X=None) -> SceneInput:
        return scene_input_from_estimate(self.estimate_, self.radius)

    def precision(self) -> PrecisionDiag:
        return accumulate_precision(self.estimate_, lam=self.lam, cutoff=self.cutoff)

    def precision_delta(self, view: ViewPose) -> PrecisionDiag:
        return precision_delta(self.estimate_, view, self.cutoff)

"""Active-grasping benchmark: episodes, view planners, aggregation and the manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .infogain import (
    CURVATURE_LAMBDA,
    CurvatureDiag,
    candidate_deltas,
    propose_views,
    score_views,
    select_nbv,
)
from .sampler import ChainDivergedError, generate_grasps, make_schedule, select_best
from .splatrep import (
    NoForegroundError,
    SceneEstimate,
    accumulate_precision,
    fit_from_views,
    scene_input_from_estimate,
)
from .trainer import ece, observe
from .world import NoGraspError, PlacementError, ViewPose, gen_scene, grasp_oracle, view_on_sphere

log = logging.getLogger(__name__)

PLANNERS = ("infogain", "random", "fisher", "coverage")
OUTCOMES = ("Success", "Fail", "Invalid")


@dataclass
class BenchConfig:
    episodes: int = 17
    n_initial: int = 2
    budget: int = 2
    n_candidates: int = 40
    planners: tuple = ("infogain", "random", "fisher")
    seeds: tuple = (0, 1, 2)
    checkpoint: str | None = None
    n_clutter: int = 4
    initial_radius: float = 0.4
    initial_elevation_deg: float = 45.0
    fit_steps: int = 0
    grasp_chains: int = 32
    grasp_steps: int = 80
    eta_samples: int = 32
    eta_steps: int = 60
    curvature_lambda: float = CURVATURE_LAMBDA

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate view")
        if self.episodes < 1:
            raise ValueError("need at least one episode")
        self.planners = tuple(self.planners)
        self.seeds = tuple(int(s) for s in self.seeds)
        unknown = set(self.planners) - set(PLANNERS)
        if unknown:
            raise ValueError(f"unknown planners {sorted(unknown)}; choose from {PLANNERS}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planners"] = list(self.planners)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class EpisodeRecord:
    bench_seed: int
    episode: int
    scene_seed: int
    planner: str
    initial_views: list
    selected_views: list
    gains: list
    executed_grasp: list | None
    outcome: str
    p_success: float | None
    reason: str = ""
    min_gain: float | None = None
    zero_delta_gains: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        """Hash of everything except wall-clock timings."""
        d = self.to_dict()
        d.pop("timings")
        blob = json.dumps(d, sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- planners --------------------------------------------------------------------------------


def planner_random(candidates, rng) -> int:
    if not candidates:
        raise ValueError("no candidates")
    return int(rng.integers(len(candidates)))


def fisher_scores(candidates, est: SceneEstimate, cutoff=3.0, prec=None, deltas=None) -> list:
    if not candidates:
        raise ValueError("no candidates")
    prec = accumulate_precision(est, cutoff=cutoff) if prec is None else prec
    ident = CurvatureDiag(np.ones(prec.values.size), 1.0)
    return score_views(ident, prec, est, candidates, cutoff, deltas)


def planner_fisher(candidates, est: SceneEstimate, cutoff=3.0) -> tuple[int, list]:
    """Trace of the posterior-variance reduction; curvature replaced by the identity."""
    gains = [s.gain for s in fisher_scores(candidates, est, cutoff)]
    return int(np.argmax(gains)), gains


def _visible(points, eye, occ_centers, occ_radius, view: ViewPose | None = None, skip_self=True):
    """Points seen from ``eye``: no occluder sphere cuts the segment, and inside the image when ``view`` is given."""
    d = points - eye
    L = np.linalg.norm(d, axis=1)
    u = d / L[:, None]
    rel = occ_centers[None, :, :] - eye  # (1, K, 3)
    t = np.einsum("nk,mk->nm", u, rel[0])
    perp2 = np.sum(rel[0] ** 2, axis=1)[None, :] - t**2
    blocked = (t > 0) & (t < L[:, None] - 1.5 * occ_radius) & (perp2 < occ_radius**2)
    vis = ~blocked.any(axis=1)
    if view is not None:
        pc = (points - view.center) @ view.pose.rotation
        z = pc[:, 2]
        u_px = view.focal * pc[:, 0] / np.maximum(z, 1e-9) + view.cx
        v_px = view.focal * pc[:, 1] / np.maximum(z, 1e-9) + view.cy
        vis &= (z > 0) & (u_px >= 0) & (u_px <= view.width - 1) & (v_px >= 0) & (v_px <= view.height - 1)
    return vis


def hidden_points(est: SceneEstimate, depth=0.02, occ_radius=0.006):
    """Space just behind each observed surface kernel, as seen from the views that observed it."""
    mu = est.mu
    out = []
    for v in est.views:
        seen = _visible(mu, v.center, mu, occ_radius, v)
        d = mu[seen] - v.center
        out.append(mu[seen] + depth * d / np.linalg.norm(d, axis=1, keepdims=True))
    if not out:
        return np.zeros((0, 3))
    pts = np.concatenate(out)
    known = np.zeros(len(pts), dtype=bool)
    for v in est.views:
        known |= _visible(pts, v.center, mu, occ_radius, v)
    return pts[~known]


def planner_coverage(candidates, est: SceneEstimate, occ_radius=0.006) -> tuple[int, list]:
    """Count previously occluded points each candidate would reveal; uses only the scene estimate."""
    if not candidates:
        raise ValueError("no candidates")
    pts = hidden_points(est, occ_radius=occ_radius)
    counts = [int(_visible(pts, v.center, est.mu, occ_radius, v).sum()) if len(pts) else 0 for v in candidates]
    return int(np.argmax(counts)), [float(c) for c in counts]


# -- episodes --------------------------------------------------------------------------------


def initial_views(center, cfg: BenchConfig) -> list:
    el = math.radians(cfg.initial_elevation_deg)
    az = [2 * math.pi * i / cfg.n_initial for i in range(cfg.n_initial)]
    return [view_on_sphere(center, cfg.initial_radius, a, el) for a in az]


def episode_streams(bench_seed: int, episode: int):
    """Named generators shared by every planner of one episode (paired comparison)."""
    ss = np.random.SeedSequence([int(bench_seed), int(episode)])
    names = ("scene", "candidates", "eta", "random", "grasps")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def scene_seed_for(bench_seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(bench_seed), int(episode), 7]).generate_state(1)[0])


@dataclass
class EpisodeContext:
    """State shared by all planners of one episode: world, initial estimate and candidate sets."""

    bench_seed: int
    episode: int
    world: object
    initial: SceneEstimate
    candidates: list
    initial_views: list
    _first_round: tuple | None = None

    def first_round_terms(self):
        """Precision and candidate increments for the initial estimate, shared by the planners."""
        if self._first_round is None:
            self._first_round = (accumulate_precision(self.initial), candidate_deltas(self.initial, self.candidates[0]))
        return self._first_round


def prepare_episode(cfg: BenchConfig, bench_seed: int, episode: int) -> EpisodeContext:
    scene_seed = scene_seed_for(bench_seed, episode)
    streams = episode_streams(bench_seed, episode)
    world = gen_scene(scene_seed, cfg.n_clutter)
    views = initial_views(world.target.center, cfg)
    est = fit_from_views(observe(world, views), steps=cfg.fit_steps)
    # candidates are proposed around the estimated (not the true) target position
    fg = est.mu[est.semantic > 0.5]
    center = fg.mean(axis=0) if len(fg) else est.mu.mean(axis=0)
    cand = [propose_views(center, cfg.n_candidates, streams["candidates"]) for _ in range(cfg.budget)]
    return EpisodeContext(bench_seed, episode, world, est, cand, views)


def _choose(planner, ctx, est, r, network, cfg, streams, scene_input):
    """Index of the chosen view, per-candidate scores and the zero-increment flags (scoring planners only)."""
    candidates = ctx.candidates[r]
    if planner == "random":
        return planner_random(candidates, streams["random"]), [], []
    if planner == "coverage":
        idx, counts = planner_coverage(candidates, est)
        return idx, counts, []
    prec, deltas = ctx.first_round_terms() if r == 0 else (None, None)
    if planner == "fisher":
        scores = fisher_scores(candidates, est, prec=prec, deltas=deltas)
        gains = [s.gain for s in scores]
        return int(np.argmax(gains)), gains, [s.zero_delta for s in scores]
    res = select_nbv(est, network, candidates, m=cfg.eta_samples, rng=streams["eta"],
                     schedule=make_schedule(cfg.eta_steps), lam=cfg.curvature_lambda, scene_input=scene_input,
                     prec=prec, deltas=deltas)
    return res.index, [s.gain for s in res.scores], [s.zero_delta for s in res.scores]


def run_episode(cfg: BenchConfig, network, planner: str, ctx: EpisodeContext) -> EpisodeRecord:
    """One episode for one planner; component failures become Invalid records."""
    streams = episode_streams(ctx.bench_seed, ctx.episode)
    world = ctx.world
    rec = EpisodeRecord(ctx.bench_seed, ctx.episode, int(world.seed), planner, [v.to_dict() for v in ctx.initial_views],
                        [], [], None, "Invalid", None)
    est = ctx.initial
    t_select = 0.0
    try:
        for r in range(cfg.budget):
            cands = ctx.candidates[r]
            scene_input = scene_input_from_estimate(est) if planner == "infogain" else None
            t0 = time.perf_counter()
            idx, gains, zero = _choose(planner, ctx, est, r, network, cfg, streams, scene_input)
            t_select += time.perf_counter() - t0
            if zero:
                g = np.asarray(gains)
                rec.min_gain = float(g.min()) if rec.min_gain is None else min(rec.min_gain, float(g.min()))
                rec.zero_delta_gains += [float(x) for x, z in zip(gains, zero) if z]
            rec.gains.append([round(float(x), 12) for x in gains])
            view = cands[idx]
            rec.selected_views.append(view.to_dict())
            obs = list(est.observations) + observe(world, [view])
            est = fit_from_views(obs, steps=cfg.fit_steps, warm_start=est)
        t0 = time.perf_counter()
        scene_input = scene_input_from_estimate(est)
        cands = generate_grasps(network, cfg.grasp_chains, make_schedule(cfg.grasp_steps), rng=streams["grasps"],
                                scene=scene_input)
        best = select_best(cands)
        rec.timings["grasp"] = time.perf_counter() - t0
        if best is None:
            rec.reason = "no feasible grasp above threshold"
        else:
            ok = bool(grasp_oracle(world, best.pose))
            rec.outcome = "Success" if ok else "Fail"
            rec.executed_grasp = [round(float(x), 12) for x in best.pose.to_quat_xyz()]
            rec.p_success = round(float(best.p_success), 12)
    except (NoForegroundError, ChainDivergedError, NoGraspError, FloatingPointError, ValueError) as exc:
        rec.outcome = "Invalid"
        rec.reason = f"{type(exc).__name__}: {exc}"
    rec.timings["selection"] = t_select
    return rec


def run_benchmark(cfg: BenchConfig, network, out_dir=None, progress=None) -> list:
    records = []
    for bs in cfg.seeds:
        for ep in range(cfg.episodes):
            try:
                ctx = prepare_episode(cfg, bs, ep)
            except (PlacementError, NoForegroundError, ValueError) as exc:
                for p in cfg.planners:
                    records.append(EpisodeRecord(bs, ep, scene_seed_for(bs, ep), p, [], [], [], None, "Invalid", None,
                                                 reason=f"{type(exc).__name__}: {exc}"))
                continue
            for p in cfg.planners:
                rec = run_episode(cfg, network, p, ctx)
                records.append(rec)
                if progress is not None:
                    progress(rec)
    if out_dir is not None:
        write_outputs(out_dir, records, cfg)
    return records


# -- aggregation ---------------------------------------------------------------------------------


def aggregate(records, by=("planner",)) -> list:
    """Per-group counts, success rate, ECE of executed grasps and mean selection time."""
    if not records:
        raise ValueError("no records")
    groups = {}
    for r in records:
        key = tuple(getattr(r, k) for k in by)
        groups.setdefault(key, []).append(r)
    rows = []
    for key, recs in sorted(groups.items()):
        counts = {o: sum(r.outcome == o for r in recs) for o in OUTCOMES}
        executed = [r for r in recs if r.outcome != "Invalid"]
        row = dict(zip(by, key))
        row.update(counts)
        row["episodes"] = len(recs)
        row["SR"] = counts["Success"] / len(recs)
        row["ECE"] = (ece([r.p_success for r in executed], [r.outcome == "Success" for r in executed])
                      if executed else float("nan"))
        row["selection_s"] = float(np.mean([r.timings.get("selection", 0.0) for r in recs]))
        rows.append(row)
    return rows


def manifest(records) -> dict:
    return {f"{r.bench_seed}:{r.episode}:{r.planner}": r.content_hash() for r in records}


def summary_table(rows) -> str:
    head = f"{'planner':<10} {'seed':>5} {'n':>4} {'Success':>8} {'Fail':>5} {'Invalid':>8} {'SR':>7} {'ECE':>6} {'sel[s]':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.get('planner', '-'):<10} {str(r.get('bench_seed', '-')):>5} {r['episodes']:>4} {r['Success']:>8} "
            f"{r['Fail']:>5} {r['Invalid']:>8} {100 * r['SR']:>6.1f}% {r['ECE']:>6.3f} {r['selection_s']:>7.2f}"
        )
    lines.append("Fail includes drops: the analytic oracle has no dynamics.")
    return "\n".join(lines)


def write_records(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_records(path) -> list:
    with open(path) as fh:
        return [EpisodeRecord(**json.loads(line)) for line in fh if line.strip()]


def write_aggregate_csv(path, rows):
    path = Path(path)
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path


def write_outputs(out_dir, records, cfg: BenchConfig | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "episodes.jsonl", records)
    rows = aggregate(records)
    write_aggregate_csv(out / "aggregate.csv", rows)
    per_seed = aggregate(records, by=("planner", "bench_seed"))
    write_aggregate_csv(out / "aggregate_by_seed.csv", per_seed)
    (out / "summary.txt").write_text(summary_table(rows) + "\n\n" + summary_table(per_seed) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest(records), indent=1, sort_keys=True))
    if cfg is not None:
        (out / "bench_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    return out

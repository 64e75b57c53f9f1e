"""Acceptance criteria 1-12.

Every test appends one line to ``REPORT``; ``conftest.py`` prints the lines
in the terminal summary. Tolerances are the ones fixed by the criteria; the
heavy fixtures (training runs, benchmark) are shared so the whole file runs
once in under an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import trapezoid

from nbvgrasp import bench as B
from nbvgrasp import diffgraph as dg
from nbvgrasp import infogain as I
from nbvgrasp import sampler as S
from nbvgrasp import splatrep as sr
from nbvgrasp import trainer as T
from nbvgrasp.cli import evaluate_calibration
from nbvgrasp.ebm import EnergyNetwork
from nbvgrasp.liegroup import GraspPose, random_rotations, retract, se3_exp, se3_log, zeta_log_density, zeta_score
from nbvgrasp.toys import LINE_MASK, LineFamily, OcclusionScenario
from nbvgrasp.world import ViewPose, gen_scene, grasp_oracle, look_at, render_depth_image, sdf, view_on_sphere

REPORT = {}

TRAIN_SCENES = range(100, 140)
EVAL_SCENES = range(900, 910)
TRAIN_STEPS = 5000
TRAIN_LR = 3e-3
CALIB_SEEDS = (0, 1, 2)
ABLATED = dict(lambda_ap=0.0, use_failure_dsm=False, learn_temperature=False)


def report(n, ok, detail, seconds, limit):
    within = seconds < limit
    REPORT[n] = f"criterion {n:>2}: {'PASS' if ok and within else 'FAIL'}  {detail}  [{seconds:.1f} s, limit {limit:.0f} s]"
    print(REPORT[n])
    return ok and within


# -- 1-3: exactness of the building blocks ---------------------------------------------------------


def test_criterion_01_lie_group_exactness():
    from conftest import random_tangents

    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    xi = random_tangents(rng, 10_000)
    roundtrip = float(np.max(np.abs(se3_log(se3_exp(xi)) - xi)))
    xi = random_tangents(rng, 50, max_angle=2.5, trans=0.3)
    g = GraspPose(random_rotations(50, rng), rng.standard_normal((50, 3)))
    gamma = retract(g, xi)
    score = zeta_score(gamma, g, 0.7)
    fd = np.stack([dg.numerical_gradient(lambda e: zeta_log_density(retract(gamma[i], e), g[i], 0.7), np.zeros(6),
                                         h=1e-6) for i in range(50)])
    zeta_err = dg.relative_error(score, fd)
    ok = roundtrip <= 1e-9 and zeta_err <= 1e-4
    assert report(1, ok, f"roundtrip {roundtrip:.1e} (<= 1e-9), zeta_score FD {zeta_err:.1e} (<= 1e-4)",
                  time.perf_counter() - t0, 10)


def test_criterion_02_autodiff_soundness():
    from test_diffgraph import OPS, fd_check
    from test_trainer import _param_fd

    t0 = time.perf_counter()
    failed = []
    for name, (build, inputs) in OPS.items():
        try:
            fd_check(build, *inputs)
        except AssertionError:
            failed.append(name)
    ts = T.make_training_scene(7, n_grasps=64)
    cfg = T.TrainConfig(batch_size=8, ap_batch_size=8, sdf_points=8)
    batch = T.sample_batch(ts, cfg, np.random.default_rng(0))
    net = EnergyNetwork(seed=3)
    net.store.params["tau"] = np.array(0.2)
    names = net.store.names()
    loss_err = _param_fd(net, batch, cfg, names, np.random.default_rng(1), n_probe=2)
    ok = not failed and loss_err <= 1e-4
    assert report(2, ok, f"{len(OPS) - len(failed)}/{len(OPS)} ops pass, full loss FD over {len(names)} parameter "
                         f"arrays {loss_err:.1e} (<= 1e-4)", time.perf_counter() - t0, 60)


def test_criterion_03_renderer_and_precision():
    from test_splatrep import random_params, small_view

    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        params = random_params(rng)
        view = small_view(eye=rng.uniform([-0.3, -0.3, 0.8], [0.3, 0.3, 1.2]))
        for _ in range(25):
            px = rng.integers(0, view.width * view.height)
            up = np.zeros(view.width * view.height)
            up[px] = 1.0
            J = sr.depth_vjp(params, view, up, cutoff=None)
            k, j = rng.integers(0, params.shape[0]), rng.integers(0, sr.N_PARAMS)
            pp, pm = params.copy(), params.copy()
            pp[k, j] += 1e-6
            pm[k, j] -= 1e-6
            num = (sr.render_expected_depth(pp, view, cutoff=None).ravel()[px]
                   - sr.render_expected_depth(pm, view, cutoff=None).ravel()[px]) / 2e-6
            worst = max(worst, dg.relative_error(J[k, j], num))
    world = gen_scene(0)
    views = [view_on_sphere(world.target.center, 0.4, a, math.pi / 4) for a in (0.0, math.pi)]
    est = sr.fit_from_views([sr.Observation(v, render_depth_image(world, v)) for v in views], steps=0)
    extra = [view_on_sphere(world.target.center, rng.uniform(0.3, 0.5), a, rng.uniform(0.2, 1.2))
             for a in rng.uniform(0, 2 * math.pi, 4)]
    monotone = True
    prev = sr.accumulate_precision(est, views=[])
    empty_exact = np.array_equal(prev.values, np.full(est.params.size, prev.lam))
    for i in range(1, len(extra) + 1):
        cur = sr.accumulate_precision(est, views=extra[:i])
        monotone &= bool(np.all(cur.values >= prev.values))
        prev = cur
    ok = worst <= 1e-4 and monotone and empty_exact
    assert report(3, ok, f"500-probe Jacobian FD {worst:.1e} (<= 1e-4), monotone {monotone}, "
                         f"empty view = lambda I exactly {empty_exact}", time.perf_counter() - t0, 60)


# -- 4-7: sampler and entropy estimators ---------------------------------------------------------------


def test_criterion_04_sampler_on_quadratic():
    t0 = time.perf_counter()
    tau, n = 0.1, 2000
    g0 = se3_exp(np.array([0.1, -0.05, 0.3, 0.2, 0.1, -0.3]))
    cands = S.generate_grasps(S.QuadraticEnergy(g0, tau), n, S.AnnealSchedule.constant(30, tau, tau), rng=0)
    mean, cov = S.tangent_moments(S.candidate_poses(cands), g0)
    mean_bound = 3 * tau / math.sqrt(n)
    cov_err = float(np.max(np.abs(cov - tau**2 * np.eye(6))) / tau**2)
    ok = bool(np.all(np.abs(mean) <= mean_bound)) and cov_err <= 0.2
    assert report(4, ok, f"max |mean| {np.max(np.abs(mean)):.4f} (<= {mean_bound:.4f}), covariance off by "
                         f"{100 * cov_err:.1f}% of tau^2 (<= 20%)", time.perf_counter() - t0, 300)


LINE_W = (0.02, 0.0, 0.05)


def _line_toy(w=LINE_W):
    return LineFamily(w, amp=0.3, width=0.2)


def _line_eta(toy, m, seed):
    sch = S.AnnealSchedule.constant(3, toy.tau, toy.tau)
    return I.estimate_eta(toy, m=m, schedule=sch, rng=seed, dof_mask=LINE_MASK, init=toy.g0)


def test_criterion_05_entropy_estimator():
    t0 = time.perf_counter()
    toy = _line_toy()
    xs = np.linspace(-1, 1, 40001)
    ref = trapezoid(I.bernoulli_entropy(toy.success(xs)) * toy.density(xs), xs)
    est = _line_eta(toy, 128, 0)
    err = abs(est.eta / ref - 1)
    # context only: how often an arbitrary seed lands inside 2%
    rate = np.mean([abs(_line_eta(toy, 128, s).eta / ref - 1) <= 0.02 for s in range(1, 51)])
    ok = err <= 0.02
    assert report(5, ok, f"eta {est.eta:.5f} vs quadrature {ref:.5f}: {100 * err:.2f}% (<= 2%); "
                         f"{100 * rate:.0f}% of 50 other seeds within 2%", time.perf_counter() - t0, 60)


def test_criterion_06_eta_gradient_crn():
    t0 = time.perf_counter()
    toy = _line_toy()
    m, h = 100_000, 1e-4
    est = _line_eta(toy, m, 0)
    dp, dE = toy.scene_grads(est.poses)
    dh = I.bernoulli_entropy_grad(est.p)[:, None] * dp
    fd = np.array([(_line_eta(toy.with_params(toy.w + h * e), m, 0).eta
                    - _line_eta(toy.with_params(toy.w - h * e), m, 0).eta) / (2 * h) for e in np.eye(3)])
    errs = {}
    for sign in (1.0, -1.0):
        g = I.combine_eta_gradient(est.h, dh, dE, sign)
        errs[sign] = float(np.linalg.norm(g - fd) / np.linalg.norm(fd))
    ok = errs[1.0] <= 5e-2 and errs[1.0] < errs[-1.0]
    assert report(6, ok, f"CRN FD rel. error {errs[1.0]:.1e} with third term +, {errs[-1.0]:.1e} with - "
                         f"(<= 5e-2; sign fixed to +)", time.perf_counter() - t0, 120)


def test_criterion_07_entropy_behaviour_under_occlusion():
    t0 = time.perf_counter()
    passed, rows = 0, []
    for seed in range(10):
        sc = OcclusionScenario(seed)
        eta, proxy = [], []
        for stage in (0, 1):
            g = sc.sample(128, stage, [seed, stage])
            p, _ = sc.evaluate(g, stage)
            eta.append(float(I.bernoulli_entropy(p).mean()))
            proxy.append(I.knn_entropy(I.pose_embedding(g)))
        good = eta[1] < eta[0] and proxy[1] > proxy[0]
        passed += good
        rows.append(f"{eta[0]:.3f}->{eta[1]:.3f}/{proxy[0]:.1f}->{proxy[1]:.1f}")
    ok = passed >= 9
    assert report(7, ok, f"{passed}/10 seeds with eta down and density proxy up (>= 9); seed 0: {rows[0]}",
                  time.perf_counter() - t0, 300)


# -- 8-9: trained models ----------------------------------------------------------------------------------

_MODELS = {}


def _train(seed, ablated=False):
    key = (seed, ablated)
    if key not in _MODELS:
        if "scenes" not in _MODELS:
            _MODELS["scenes"] = T.make_training_set(TRAIN_SCENES, n_grasps=256)
        cfg = T.TrainConfig(steps=TRAIN_STEPS, lr=TRAIN_LR, seed=seed, log_every=0, **(ABLATED if ablated else {}))
        t0 = time.perf_counter()
        net, _ = T.train(cfg, _MODELS["scenes"])
        _MODELS[key] = (net, time.perf_counter() - t0)
    return _MODELS[key]


def test_criterion_08_calibration_trend():
    full, abl, lines, per_run = [], [], [], []
    for seed in CALIB_SEEDS:
        for ablated, sink in ((False, full), (True, abl)):
            net, train_s = _train(seed, ablated)
            t0 = time.perf_counter()
            ev = evaluate_calibration(net, EVAL_SCENES, n_chains=32, sampler_steps=80, rng=seed)
            per_run.append(train_s + time.perf_counter() - t0)
            sink.append(ev["ECE_sampled"])
        lines.append(f"seed {seed}: {full[-1]:.3f} vs {abl[-1]:.3f}")
    ratio = float(np.mean(full) / np.mean(abl))
    ok = ratio <= 0.7
    # the time limit applies to one training plus evaluation run
    assert report(8, ok, f"mean ECE full {np.mean(full):.3f} vs ablated {np.mean(abl):.3f}, ratio {ratio:.2f} (<= 0.70); "
                         + "; ".join(lines), max(per_run), 1800)


def _scene7():
    """Scene-7 model shared by criterion 9 and the training properties below."""
    if "scene7" not in _MODELS:
        ts = T.make_training_scene(7)
        t0 = time.perf_counter()
        net, curve = T.train(T.TrainConfig(steps=TRAIN_STEPS, lr=TRAIN_LR, log_every=0), [ts])
        _MODELS["scene7"] = (ts, net, curve, time.perf_counter() - t0)
    return _MODELS["scene7"]


def _sampled_grasps(model, ts):
    cands = S.generate_grasps(model, 64, S.make_schedule(100), rng=1, scene=ts.scene)
    return T.set_distances(S.candidate_poses(cands), ts.success)[3], cands


def test_criterion_09_generation_quality():
    ts, net, _, train_s = _scene7()
    t0 = time.perf_counter()
    trained, _ = _sampled_grasps(net, ts)
    untrained, _ = _sampled_grasps(EnergyNetwork(seed=0), ts)
    ok = trained <= 0.5 * untrained and trained <= 0.05
    assert report(9, ok, f"trans_rec trained {trained:.4f} m vs untrained {untrained:.4f} m (<= 50% and <= 0.05 m); "
                         f"training {train_s:.0f} s", time.perf_counter() - t0, 600)


def test_single_scene_dsm_loss_halves():
    _, _, curve, _ = _scene7()
    dsm = np.array([c.dsm_S + c.dsm_F for c in curve])
    start, end = dsm[:50].mean(), dsm[-500:].mean()
    print(f"DSM loss {start:.2f} -> {end:.2f} ({100 * (1 - end / start):.0f}% lower)")
    assert end <= 0.5 * start


def test_top_ranked_grasps_succeed_more_often_on_single_box():
    seed = next(k for k in range(100) if gen_scene(k, 0).target.kind == "box")
    ts = T.make_training_scene(seed, n_clutter=(0, 0))
    net, _ = T.train(T.TrainConfig(steps=TRAIN_STEPS, lr=TRAIN_LR, log_every=0), [ts])
    _, cands = _sampled_grasps(net, ts)
    ok = grasp_oracle(ts.world, S.candidate_poses(cands))
    print(f"scene {seed}: oracle success top-10 {ok[:10].mean():.2f}, bottom-10 {ok[-10:].mean():.2f}")
    assert ok[:10].mean() > ok[-10:].mean()


def test_trained_sdf_head_beats_initialization():
    ts, net, _, _ = _scene7()
    pts = T.sdf_reference_points(ts, 400, np.random.default_rng(99))
    truth = sdf(ts.world, pts)
    err = np.mean(np.abs(net.sdf_predict(pts, ts.scene) - truth))
    err0 = np.mean(np.abs(EnergyNetwork(seed=0).sdf_predict(pts, ts.scene) - truth))
    print(f"SDF mean abs error trained {err:.4f} m vs untrained {err0:.4f} m")
    assert err < err0


# -- 10-12: benchmark ---------------------------------------------------------------------------------------------

_BENCH = {}


@pytest.fixture(scope="module")
def bench_runs(tmp_path_factory):
    net = _train(0)[0]
    cfg = B.BenchConfig()
    out = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    first = B.run_benchmark(cfg, net, out / "run1")
    second = B.run_benchmark(cfg, net, out / "run2")
    return cfg, net, first, second, time.perf_counter() - t0


def test_criterion_10_nbv_benefit(bench_runs):
    cfg, _, recs, _, elapsed = bench_runs
    rows = {(r["planner"], r["bench_seed"]): r for r in B.aggregate(recs, by=("planner", "bench_seed"))}
    pooled = {r["planner"]: r for r in B.aggregate(recs)}
    n_eps = pooled["infogain"]["episodes"]
    vs_random = pooled["infogain"]["SR"] >= pooled["random"]["SR"]
    wins = sum(rows[("infogain", s)]["SR"] >= rows[("fisher", s)]["SR"] for s in cfg.seeds)
    per_seed = ", ".join(f"{s}: {rows[('infogain', s)]['SR']:.2f}/{rows[('random', s)]['SR']:.2f}/"
                         f"{rows[('fisher', s)]['SR']:.2f}" for s in cfg.seeds)
    ok = n_eps >= 50 and vs_random and wins >= 2
    assert report(10, ok, f"{n_eps} paired episodes; SR infogain {pooled['infogain']['SR']:.3f}, random "
                          f"{pooled['random']['SR']:.3f}, fisher {pooled['fisher']['SR']:.3f}; infogain >= fisher in "
                          f"{wins}/3 seeds (info/rand/fisher per seed {per_seed})", elapsed, 1800)


def test_criterion_11_information_gain_properties(bench_runs):
    t0 = time.perf_counter()
    _, _, first, second, _ = bench_runs
    recs = [r for r in first + second if r.planner in ("infogain", "fisher")]
    scored = [g for r in recs for round_gains in r.gains for g in round_gains]
    zero = [g for r in recs for g in r.zero_delta_gains]
    # benchmark candidates all see some kernel, so add one that looks at the sky
    cfg, net = bench_runs[0], bench_runs[1]
    ctx = B.prepare_episode(cfg, 0, 0)
    eye = ctx.world.target.center + np.array([0.0, 0.0, 0.4])
    sky = ViewPose(look_at(eye, eye + np.array([0.0, 0.0, 1.0]), up=(0.0, 1.0, 0.0)))
    res = I.select_nbv(ctx.initial, net, list(ctx.candidates[0]) + [sky], m=cfg.eta_samples,
                       schedule=S.make_schedule(cfg.eta_steps), rng=0, lam=cfg.curvature_lambda)
    scored += [s.gain for s in res.scores]
    zero += [s.gain for s in res.scores if s.zero_delta]
    ok = min(scored) >= 0 and res.scores[-1].zero_delta and len(zero) >= 1 and all(g == 0.0 for g in zero)
    assert report(11, ok, f"{len(scored)} candidate gains, min {min(scored):.3e} (>= 0); {len(zero)} zero-increment "
                          f"candidates, all exactly 0: {all(g == 0.0 for g in zero)}", time.perf_counter() - t0, 1800)


def test_criterion_12_determinism(bench_runs):
    t0 = time.perf_counter()
    _, _, first, second, _ = bench_runs
    m1, m2 = B.manifest(first), B.manifest(second)
    same = m1 == m2
    assert report(12, same, f"{len(m1)} manifest entries identical across two runs: {same}",
                  time.perf_counter() - t0, 1800)


def test_recorded_outcomes_reproduce_under_the_oracle(bench_runs):
    _, _, recs, _, _ = bench_runs
    executed = [r for r in recs if r.executed_grasp is not None]
    assert executed
    for r in executed:
        pose = GraspPose.from_quat_xyz(np.asarray(r.executed_grasp))
        assert bool(grasp_oracle(gen_scene(r.scene_seed, B.BenchConfig().n_clutter), pose)) == (r.outcome == "Success")


def test_sharpened_logits_worsen_benchmark_ece(bench_runs):
    cfg, net, recs, _, _ = bench_runs
    sharp = net.copy()
    for name in ("head.W", "head.b"):
        sharp.store.params[name] = 5.0 * sharp.store[name]
    sub = B.BenchConfig(**{**cfg.to_dict(), "planners": ["random"], "seeds": [0]})
    base = [r for r in recs if r.planner == "random" and r.bench_seed == 0]
    distorted = B.run_benchmark(sub, sharp)
    ece_base = B.aggregate(base)[0]["ECE"]
    ece_sharp = B.aggregate(distorted)[0]["ECE"]
    print(f"benchmark ECE calibrated {ece_base:.3f} vs logits x5 {ece_sharp:.3f}")
    assert ece_sharp > ece_base

"""Command-line entry point: ``nbvgrasp <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__

log = logging.getLogger("nbvgrasp")

DEFAULT_TRAIN_SCENES = list(range(100, 140))
DEFAULT_EVAL_SCENES = list(range(900, 910))


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """YAML or JSON mapping with optional sections ``data``, ``train``, ``sampler``, ``bench``."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(cfg) - {"data", "train", "sampler", "bench", "eval"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_seeds(section: dict, key: str, default):
    seeds = section.get(key, default)
    if isinstance(seeds, dict):
        return list(range(seeds["start"], seeds["stop"]))
    return [int(s) for s in seeds]


def _load_network(path):
    from .ebm import EnergyNetwork

    if path is None:
        raise ConfigError("a --checkpoint is required")
    return EnergyNetwork.load(path)


# -- subcommands ------------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    from .world import gen_scene, sample_labeled_grasps, write_dataset

    data = cfg.get("data", {})
    seeds = _scene_seeds(data, "scenes", DEFAULT_TRAIN_SCENES)
    if args.scenes:
        seeds = list(range(args.seed, args.seed + args.scenes))
    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    grasps, scenes = [], []
    for s in seeds:
        world = gen_scene(s, int(data.get("n_clutter", 4)))
        scenes.append(world.to_dict())
        grasps += sample_labeled_grasps(world, int(data.get("grasps_per_scene", args.grasps)), rng)
    write_dataset(out / "grasps.jsonl", grasps)
    (out / "scenes.json").write_text(json.dumps(scenes))
    n_succ = sum(g.label for g in grasps)
    print(f"wrote {len(grasps)} grasps ({n_succ} successes) from {len(seeds)} scenes to {out}")


def cmd_train(args, cfg):
    from .trainer import TrainConfig, make_training_set, train

    tcfg = dict(cfg.get("train", {}))
    tcfg.setdefault("seed", args.seed)
    if args.steps is not None:
        tcfg["steps"] = args.steps
    config = TrainConfig.from_dict(tcfg)
    data = cfg.get("data", {})
    seeds = _scene_seeds(data, "scenes", DEFAULT_TRAIN_SCENES)
    out = _out_dir(args)
    scenes = make_training_set(seeds, n_grasps=int(data.get("grasps_per_scene", 256)))
    log.info("training on %d scenes for %d steps", len(scenes), config.steps)
    net, curve = train(config, scenes, out_dir=out)
    print(f"final loss {curve[-1].total:.4f}, T = {net.temperature:.4f}; checkpoint {out / 'model.npz'}")


def evaluate_calibration(net, seeds, n_chains=32, sampler_steps=100, rng=0, n_grasps=256):
    """Held-out metrics: AP/ECE on labeled grasps, ECE and set distances on sampled grasps."""
    from .liegroup import stack_poses
    from .sampler import candidate_poses, generate_grasps, make_schedule
    from .trainer import average_precision_exact, ece, make_training_set, noise_schedule, set_distances
    from .world import grasp_oracle

    scenes = make_training_set(seeds, n_grasps=n_grasps)
    sigma = noise_schedule(1e-3)
    aps, lab_p, lab_y, samp_p, samp_y, dists = [], [], [], [], [], []
    for i, ts in enumerate(scenes):
        g = stack_poses([ts.success[j] for j in range(len(ts.success))] + [ts.failure[j] for j in range(len(ts.failure))])
        y = np.r_[np.ones(len(ts.success)), np.zeros(len(ts.failure))]
        p = net.success_prob(g, ts.scene, sigma)
        aps.append(average_precision_exact(p, y))
        lab_p.append(p)
        lab_y.append(y)
        cands = generate_grasps(net, n_chains, make_schedule(sampler_steps), rng=np.random.default_rng([rng, i]),
                                scene=ts.scene)
        poses = candidate_poses(cands)
        samp_p.append([c.p_success for c in cands])
        samp_y.append(grasp_oracle(ts.world, poses))
        dists.append(set_distances(poses, ts.success))
    samp_p, samp_y = np.concatenate(samp_p), np.concatenate(samp_y)
    d = np.mean(dists, axis=0)
    return {
        "scenes": len(scenes),
        "AP": float(np.mean(aps)),
        "ECE_labeled": ece(np.concatenate(lab_p), np.concatenate(lab_y)),
        "ECE_sampled": ece(samp_p, samp_y),
        "sample_success_rate": float(samp_y.mean()),
        "ang_acc": float(d[0]),
        "trans_acc": float(d[1]),
        "ang_rec": float(d[2]),
        "trans_rec": float(d[3]),
        "T": net.temperature,
    }


def cmd_eval_calib(args, cfg):
    net = _load_network(args.checkpoint)
    ev = cfg.get("eval", {})
    seeds = _scene_seeds(ev, "scenes", DEFAULT_EVAL_SCENES)
    metrics = evaluate_calibration(net, seeds, int(ev.get("chains", 32)), int(ev.get("sampler_steps", 100)), args.seed)
    out = _out_dir(args)
    (out / "calibration.json").write_text(json.dumps(metrics, indent=1))
    for k, v in metrics.items():
        print(f"{k:>20}: {v:.4f}" if isinstance(v, float) else f"{k:>20}: {v}")


def _scene_input_for(seed, n_views, rng):
    from .splatrep import fit_from_views, scene_input_from_estimate
    from .trainer import observe, random_views
    from .world import gen_scene

    world = gen_scene(seed)
    est = fit_from_views(observe(world, random_views(world.target.center, n_views, rng)), steps=0)
    return world, est, scene_input_from_estimate(est)


def cmd_sample(args, cfg):
    from .sampler import candidate_poses, generate_grasps, make_schedule, write_candidates
    from .world import grasp_oracle

    net = _load_network(args.checkpoint)
    scfg = cfg.get("sampler", {})
    rng = np.random.default_rng(args.seed)
    world, _, scene = _scene_input_for(args.scene_seed, 3, rng)
    cands = generate_grasps(net, int(scfg.get("chains", args.n)),
                            make_schedule(int(scfg.get("steps", 150)), step_ratio=float(scfg.get("step_ratio", 0.3))),
                            rng=rng, scene=scene)
    out = _out_dir(args)
    write_candidates(out / "candidates.jsonl", cands)
    ok = grasp_oracle(world, candidate_poses(cands))
    print(f"wrote {len(cands)} candidates to {out / 'candidates.jsonl'}; best p_S = {cands[0].p_success:.3f}; "
          f"oracle success among candidates {ok.mean():.2f}")


def cmd_nbv(args, cfg):
    from .infogain import propose_views, select_nbv
    from .sampler import make_schedule
    from .splatrep import SceneEstimate

    net = _load_network(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    if args.scene is not None:
        est = SceneEstimate.load(args.scene)
    else:
        _, est, _ = _scene_input_for(args.scene_seed, 2, rng)
    fg = est.mu[est.semantic > 0.5]
    bcfg = cfg.get("bench", {})
    cands = propose_views(fg.mean(axis=0), int(bcfg.get("n_candidates", 40)), rng)
    res = select_nbv(est, net, cands, m=int(bcfg.get("eta_samples", 64)), rng=rng,
                     schedule=make_schedule(int(bcfg.get("eta_steps", 100))))
    out = _out_dir(args)
    order = np.argsort([-s.gain for s in res.scores], kind="stable")
    with open(out / "view_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "index", "gain", "trace_before", "trace_after", "x", "y", "z"])
        for rank, i in enumerate(order):
            s = res.scores[i]
            w.writerow([rank, int(i), s.gain, s.trace_before, s.trace_after, *np.round(s.view.center, 6)])
    print(f"eta = {res.eta.eta:.4f}; best view #{res.index} gain {res.scores[res.index].gain:.4g}; "
          f"scores in {out / 'view_scores.csv'}")


def cmd_bench(args, cfg):
    from .bench import BenchConfig, aggregate, run_benchmark, summary_table

    bcfg = dict(cfg.get("bench", {}))
    if args.planner:
        bcfg["planners"] = args.planner
    if args.episodes is not None:
        bcfg["episodes"] = args.episodes
    if args.budget is not None:
        bcfg["budget"] = args.budget
    if args.checkpoint:
        bcfg["checkpoint"] = args.checkpoint
    bcfg.setdefault("seeds", [args.seed])
    config = BenchConfig.from_dict(bcfg)
    net = _load_network(config.checkpoint)
    out = _out_dir(args)
    records = run_benchmark(config, net, out, progress=lambda r: log.info(
        "seed %d episode %d %-8s %s", r.bench_seed, r.episode, r.planner, r.outcome))
    print(summary_table(aggregate(records)))
    print(f"records, aggregate CSV and manifest in {out}")


def cmd_report(args, cfg):
    from .bench import aggregate, read_records, summary_table, write_aggregate_csv

    src = Path(args.records) if args.records else Path(args.out) / "episodes.jsonl"
    if not src.exists():
        raise ConfigError(f"no episode records at {src}")
    records = read_records(src)
    rows = aggregate(records)
    per_seed = aggregate(records, by=("planner", "bench_seed"))
    out = _out_dir(args)
    write_aggregate_csv(out / "aggregate.csv", rows)
    print(summary_table(rows))
    print()
    print(summary_table(per_seed))


# -- parser ---------------------------------------------------------------------------------------


def _planner_list(text):
    return [p.strip() for p in text.split(",") if p.strip()]


def _common_flags(suppress=False) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their copies must not reset values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="YAML/JSON config file")
    common.add_argument("--seed", type=int, default=d(0))
    common.add_argument("--out", default=d("runs"))
    common.add_argument("--planner", type=_planner_list, default=d(None), help="comma-separated planner names")
    common.add_argument("--episodes", type=int, default=d(None))
    common.add_argument("--budget", type=int, default=d(None))
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    p = argparse.ArgumentParser(prog="nbvgrasp", description=__doc__, parents=[_common_flags()])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="oracle-labeled grasp datasets")
    s.add_argument("--scenes", type=int, help="number of consecutive scene seeds starting at --seed")
    s.add_argument("--grasps", type=int, default=256, help="grasps per scene")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train the energy network")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-calib", parents=[common], help="AP, ECE and set distances on held-out scenes")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_eval_calib)

    s = sub.add_parser("sample", parents=[common], help="sample grasps for one procedural scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene-seed", type=int, default=0)
    s.add_argument("-n", type=int, default=64)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("nbv", parents=[common], help="rank candidate views by information gain")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", help="scene-estimate checkpoint (.npz); default: fit one from --scene-seed")
    s.add_argument("--scene-seed", type=int, default=0)
    s.set_defaults(func=cmd_nbv)

    s = sub.add_parser("bench", parents=[common], help="active-grasping benchmark")
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", parents=[common], help="aggregate existing episode records")
    s.add_argument("--records", help="episodes.jsonl (default: <out>/episodes.jsonl)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"nbvgrasp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``cablelab`` command line: gen-data, train, eval-rollout, run, benchmark, estimate.

Exit status is 0 on success, 2 for configuration or usage errors and 3 for
runtime failures (simulation, training, solver, estimation).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import sim
from .bench import (generate_dataset, make_mlp, rollout_errors, run_benchmark, split_paths,
                    train_model, write_rollout_csv, finetune_model)
from .checkpoint import CheckpointError, load_model, save_model
from .config import (ConfigError, RunConfig, cable_params, desk_scale, dumps, load, mpc_config,
                     paper_scale)
from .dataset import trajectory_paths
from .gnn import RolloutError
from .mpc import ControllerError, run_task
from .neural import TrainingError
from .perception import (EstimationError, GmmKeypointEstimator, read_cloud_jsonl, render_cloud,
                         straight_init, write_cloud_jsonl)
from .svg import write_line_chart

logger = logging.getLogger("cablelab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int, help="base random seed (default: run.seed)")
    p.add_argument("--out", type=Path, help="output directory or file")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--paper-scale", action="store_true", help="use full-size datasets and training")
    scale.add_argument("--desk-scale", action="store_true",
                       help="mini-batch float32 training on 222 trajectories (the acceptance setting)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set train.epochs=5")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cablelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="simulate random-policy trajectories")
    _common(p)
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--steps", type=int, help="steps per trajectory")
    p.add_argument("--mode", choices=["direct", "domrand"], default="direct",
                   help="domrand perturbs stiffness per trajectory")
    p.add_argument("--stiffness-scale", type=float, default=1.0)
    p.add_argument("--clouds", action="store_true", help="also write synthetic point clouds")

    p = sub.add_parser("train", help="train a dynamics model on a dataset directory")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", choices=["gnn", "mlp"], default="gnn")
    p.add_argument("--mode", choices=["direct", "finetune", "domrand"], default="direct",
                   help="finetune continues training --checkpoint on --data")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("eval-rollout", help="per-step rollout error on held-out trajectories")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--baseline", type=Path, help="MLP checkpoint to compare against")
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("run", help="closed-loop shape control on one scenario")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--scenario", choices=["U", "S", "Z", "random"], default="U")
    p.add_argument("--mode", choices=["direct", "servo", "hybrid", "finetune", "domrand", "oracle"],
                   default="hybrid")
    p.add_argument("--stiffness-scale", type=float, default=1.0)
    p.add_argument("--tolerance", type=float, help="settling threshold in metres")

    p = sub.add_parser("benchmark", help="scenario x stiffness x mode x seed grid")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--domrand-checkpoint", type=Path)
    p.add_argument("--scenario", choices=["U", "S", "Z", "random"], action="append")
    p.add_argument("--mode", choices=["direct", "servo", "hybrid", "finetune", "domrand", "oracle"],
                   action="append")
    p.add_argument("--stiffness-scale", type=float, action="append")

    p = sub.add_parser("estimate", help="GMM keypoint tracking on a point-cloud file")
    _common(p)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--init", type=Path,
                   help="JSON keypoint array for the first frame (default: straight cable)")
    return parser


def _config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    if getattr(args, "paper_scale", False):
        cfg = paper_scale(cfg)
    elif getattr(args, "desk_scale", False):
        cfg = desk_scale(cfg)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides({"run.seed": args.seed})
    if args.out is not None:
        cfg = cfg.with_overrides({"run.out": str(args.out)})
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    paths = generate_dataset(cfg, out, seed=cfg.run.seed, n=args.n, steps=args.steps,
                             stiffness_scale=args.stiffness_scale,
                             domain_randomization=args.mode == "domrand" or None)
    if args.clouds:
        pc = cfg.perception
        for k, path in enumerate(paths):
            _, X, _ = sim.read_trajectory(path)
            clouds = [render_cloud(x, pc.pts_per_segment, pc.noise_sigma, pc.outlier_ratio,
                                   seed=[cfg.run.seed, k, t]) for t, x in enumerate(X)]
            write_cloud_jsonl(out / path.name.replace("traj_", "cloud_"), clouds)
    # the dataset directory is where the config lives, so record it as "."
    (out / "config.txt").write_text(dumps(cfg.with_overrides({"run.out": "."})))
    print(f"wrote {len(paths)} trajectories to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.run.out)
    ckpt = out if out.suffix == ".json" else out / f"{args.model}.json"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model = None
    if args.mode == "finetune":
        if args.checkpoint is None:
            raise ConfigError("--mode finetune needs --checkpoint")
        model = load_model(args.checkpoint)
        model.set_params(warm_start=True, epochs=cfg.train.finetune_epochs)
    elif args.model == "mlp":
        model = make_mlp(cfg, cfg.run.seed)
    model, metrics = train_model(cfg, args.data, args.model, cfg.run.seed, model=model)
    save_model(model, ckpt, extra={"mode": args.mode, "metrics": metrics})
    print(json.dumps({"checkpoint": str(ckpt), **{k: v for k, v in metrics.items() if k != "loss_curve"}}))
    return EXIT_OK


def cmd_eval_rollout(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    steps = args.max_steps or cfg.bench.rollout_steps
    paths = trajectory_paths(args.data)
    _, held = split_paths(paths, cfg.train.holdout)
    trajs = [sim.read_trajectory(p)[1:] for p in (held or paths)]
    columns = {"gnn": rollout_errors(load_model(args.checkpoint), trajs, steps, cfg.gnn.window, cfg.mpc.dt)}
    if args.baseline:
        columns["mlp"] = rollout_errors(load_model(args.baseline), trajs, steps, cfg.gnn.window, cfg.mpc.dt)
    write_rollout_csv(out / "rollout.csv", columns)
    x = list(range(1, steps + 1))
    write_line_chart(out / "rollout.svg", {k: (x, v) for k, v in columns.items()},
                     title="Rollout error", xlabel="rollout step", ylabel="RMSE (m)")
    print(json.dumps({k: float(v[-1]) for k, v in columns.items()}))
    return EXIT_OK


def _load_optional(path):
    return load_model(path) if path else None


def cmd_run(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    if args.mode not in ("servo", "oracle") and args.checkpoint is None:
        raise ConfigError(f"--mode {args.mode} needs --checkpoint")
    mcfg = mpc_config(cfg)
    if args.tolerance is not None:
        from dataclasses import replace
        mcfg = replace(mcfg, tolerance=args.tolerance)
    params = cable_params(cfg)
    model = _load_optional(args.checkpoint)
    if args.mode == "finetune":
        model = finetune_model(cfg, model, args.stiffness_scale, out, seed=cfg.run.seed)
    scenario = sim.make_scenario(args.scenario, params, args.stiffness_scale, seed=cfg.run.seed)
    log = run_task(scenario, model, args.mode, mcfg, params=params, seed=cfg.run.seed)
    log.write(out)
    print(json.dumps(log.summary(), sort_keys=True))
    if log.status == "error":
        logger.error(log.message)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_benchmark(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    over = {}
    if args.scenario:
        over["bench.scenarios"] = tuple(args.scenario)
    if args.mode:
        over["bench.modes"] = tuple(args.mode)
    if args.stiffness_scale:
        over["bench.scales"] = tuple(args.stiffness_scale)
    cfg = cfg.with_overrides(over)
    modes = set(cfg.bench.modes)
    base = _load_optional(args.checkpoint)
    if modes & {"direct", "hybrid", "finetune"} and base is None:
        raise ConfigError("benchmark modes direct/hybrid/finetune need --checkpoint")
    models = {"direct": base, "hybrid": base}
    if "domrand" in modes:
        if args.domrand_checkpoint is None:
            raise ConfigError("benchmark mode domrand needs --domrand-checkpoint")
        models["domrand"] = load_model(args.domrand_checkpoint)
    if "finetune" in modes:
        for scale in cfg.bench.scales:
            models[("finetune", float(scale))] = finetune_model(cfg, base, float(scale), out / "finetune",
                                                                seed=cfg.run.seed)
    report = run_benchmark(cfg, models, out)
    print(f"{len(report['runs'])} runs; report in {out / 'report.json'}")
    return EXIT_OK


def cmd_estimate(args, cfg: RunConfig) -> int:
    clouds = read_cloud_jsonl(args.cloud)
    n = cfg.cable.n_keypoints
    if args.init:
        init = np.asarray(json.loads(args.init.read_text()), dtype=float)
    else:
        half = cfg.cable.length / 2
        init = straight_init(n, [-half, 0.0], [half, 0.0])
    pc = cfg.perception
    est = GmmKeypointEstimator(n_keypoints=n, mu=pc.mu, max_iters=pc.max_iters, tol=pc.tol)
    X = est.track(clouds, init)
    out = Path(cfg.run.out)
    path = out if out.suffix == ".jsonl" else out / (args.cloud.stem.replace("cloud_", "keypoints_") + ".jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    sim.write_keypoint_jsonl(path, list(X), seed=cfg.run.seed, meta={"source": args.cloud.name})
    print(f"wrote {len(X)} frames to {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval-rollout": cmd_eval_rollout,
            "run": cmd_run, "benchmark": cmd_benchmark, "estimate": cmd_estimate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"cablelab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, UsageError, FileNotFoundError) as exc:
        print(f"cablelab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (sim.SimulationError, TrainingError, RolloutError, ControllerError, EstimationError) as exc:
        print(f"cablelab: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"cablelab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

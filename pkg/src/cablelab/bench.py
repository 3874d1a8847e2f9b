"""Data generation, training, rollout evaluation and the benchmark grid."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim
from .baseline import MlpDynamics
from .config import RunConfig, cable_params, mpc_config
from .dataset import histories_from_states, load_transitions, trajectory_paths
from .gnn import GnnDynamics, RolloutError, rollout_model
from .mpc import run_task

logger = logging.getLogger(__name__)


def trajectory_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(cfg: RunConfig, out_dir, seed: int = 0, n: int | None = None,
                     steps: int | None = None, stiffness_scale: float = 1.0,
                     domain_randomization: bool | None = None) -> list:
    """Write ``traj_XXXXX.jsonl`` files and ``manifest.json``; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    n = d.n_trajectories if n is None else n
    steps = d.steps if steps is None else steps
    domrand = d.domain_randomization if domain_randomization is None else domain_randomization
    if n < 1 or steps < 1:
        raise ValueError("need at least one trajectory of at least one step")
    base = sim.perturb(cable_params(cfg), stiffness_scale)
    scale_rng = np.random.default_rng([seed, 7])
    paths, entries = [], []
    for i in range(n):
        tseed = trajectory_seed(seed, i)
        scale = float(scale_rng.uniform(d.scale_min, d.scale_max)) if domrand else 1.0
        params = sim.perturb(base, scale)
        controls = sim.random_policy(tseed, steps, d.max_speed, angular_scale=d.angular_scale,
                                     hold_prob=d.hold_prob, length=params.length)
        traj = sim.rollout(sim.make_cable(params), controls, params, cfg.mpc.dt, seed=tseed)
        traj.meta["stiffness_scale"] = stiffness_scale * scale
        path = out / f"traj_{i:05d}.jsonl"
        sim.write_trajectory(path, traj)
        paths.append(path)
        entries.append({"file": path.name, "seed": tseed, "stiffness_scale": stiffness_scale * scale})
    manifest = {"seed": seed, "n_trajectories": n, "steps": steps,
                "domain_randomization": domrand, "params": base.to_dict(), "trajectories": entries}
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / "manifest.json")
    return paths


def make_gnn(cfg: RunConfig, seed: int = 0, **overrides) -> GnnDynamics:
    g, t = cfg.gnn, cfg.train
    kw = dict(n_keypoints=cfg.cable.n_keypoints, window=g.window, radius=g.radius,
              latent_dim=g.latent_dim, hidden_width=g.hidden_width, hidden_layers=g.hidden_layers,
              message_passing=g.message_passing, epochs=t.epochs, ae_epochs=t.ae_epochs,
              batch_size=t.batch_size, lr_start=t.lr_start, lr_end=t.lr_end,
              noise_std=g.noise_std, dtype=t.dtype, init_scale=g.init_scale, random_state=seed)
    kw.update(overrides)
    return GnnDynamics(**kw)


def make_mlp(cfg: RunConfig, seed: int = 0, **overrides) -> MlpDynamics:
    t = cfg.train
    kw = dict(n_keypoints=cfg.cable.n_keypoints, window=cfg.gnn.window,
              hidden_width=cfg.gnn.hidden_width, hidden_layers=cfg.gnn.hidden_layers,
              epochs=t.baseline_epochs, batch_size=t.batch_size, lr_start=t.lr_start,
              lr_end=t.lr_end, dtype=t.dtype, random_state=seed)
    kw.update(overrides)
    return MlpDynamics(**kw)


def split_paths(paths, holdout: float):
    """Last ``holdout`` fraction of trajectories (at least one) is held out."""
    paths = list(paths)
    if len(paths) < 2 or holdout <= 0:
        return paths, []
    k = max(1, int(round(holdout * len(paths))))
    return paths[:-k], paths[-k:]


def train_model(cfg: RunConfig, data_dir, kind: str = "gnn", seed: int = 0, model=None):
    """Fit (or continue fitting, if ``model`` is given) on the training split of ``data_dir``."""
    paths = trajectory_paths(data_dir)
    train, held = split_paths(paths, cfg.train.holdout)
    X, y, _ = load_transitions(train, cfg.gnn.window)
    if model is None:
        model = make_gnn(cfg, seed) if kind == "gnn" else make_mlp(cfg, seed)
    model.fit(X, y)
    metrics = {"n_train": len(X), "loss_curve": list(model.loss_curve_)}
    if held:
        Xh, yh, _ = load_transitions(held, cfg.gnn.window)
        metrics["val_one_step_rmse_m"] = one_step_rmse(model, Xh, yh, cfg.mpc.dt)
    return model, metrics


def one_step_rmse(model, X, y, dt: float = 1.0) -> float:
    """RMS over transitions and keypoints of the Euclidean next-state error."""
    err = (model.predict(X) - y).reshape(len(y), -1, 2) * dt
    return float(np.sqrt(np.mean(np.sum(err * err, axis=2))))


def rollout_errors(model, trajectories, steps: int = 20, window: int = 5, dt: float = 1.0,
                   starts_every: int = 10) -> np.ndarray:
    """Per-step keypoint RMSE of autoregressive rollouts started along each trajectory.

    ``trajectories`` yields ``(X, R)`` pairs.  Rollouts start every
    ``starts_every`` steps wherever ``steps`` future states exist; the history
    before a start comes from the true trajectory.  Returns ``(steps,)``.
    """
    hist, ctrl, truth = [], [], []
    for X, R in trajectories:
        X = np.asarray(X, float)
        R = np.asarray(R, float)
        H = histories_from_states(X, window)
        for t0 in range(0, len(R) - steps + 1, starts_every):
            hist.append(H[t0])
            ctrl.append(R[t0:t0 + steps])
            truth.append(X[t0 + 1:t0 + steps + 1])
    if not hist:
        raise ValueError(f"no trajectory is long enough for {steps}-step rollouts")
    try:
        pred = rollout_model(model, np.stack(hist), np.stack(ctrl), dt)
    except RolloutError:
        return np.full(steps, np.inf)
    err = pred - np.stack(truth)
    return np.sqrt(np.mean(np.sum(err * err, axis=3), axis=(0, 2)))


def write_rollout_csv(path, columns: dict) -> Path:
    """``step`` plus one column per model; the first model's column is named ``rmse_m``."""
    path = Path(path)
    names = list(columns)
    steps = len(columns[names[0]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "rmse_m"] + [f"{n}_rmse_m" for n in names[1:]])
        for k in range(steps):
            w.writerow([k + 1] + [f"{columns[n][k]:.9f}" for n in names])
    return path


# -- benchmark ----------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    scenario: str
    scale: float
    mode: str
    seed: int

    @property
    def stem(self) -> str:
        return f"{self.scenario}_{self.mode}_{self.scale:g}x_seed{self.seed}"


def benchmark_cells(cfg: RunConfig) -> list:
    b = cfg.bench
    return [Cell(str(s), float(k), str(m), int(seed))
            for s in b.scenarios for k in b.scales for m in b.modes for seed in b.seeds]


def finetune_model(cfg: RunConfig, base_model, scale: float, work_dir, seed: int = 0):
    """Collect ``train.finetune_transitions`` at the test stiffness and continue training."""
    steps = cfg.data.steps
    n = max(1, math.ceil(cfg.train.finetune_transitions / steps))
    data_dir = Path(work_dir) / f"finetune_{scale:g}x"
    generate_dataset(cfg, data_dir, seed=seed + 1000, n=n, steps=steps, stiffness_scale=scale,
                     domain_randomization=False)
    X, y, _ = load_transitions(trajectory_paths(data_dir), cfg.gnn.window)
    model = type(base_model).from_dict(base_model.to_dict())
    model.set_params(warm_start=True, epochs=cfg.train.finetune_epochs)
    model.fit(X, y)
    return model


def run_cell(cell: Cell, cfg: RunConfig, models: dict, out_dir):
    params = cable_params(cfg)
    scenario = sim.make_scenario(cell.scenario, params, cell.scale, seed=cell.seed)
    model = models.get((cell.mode, cell.scale), models.get(cell.mode))
    mode = cell.mode
    log = run_task(scenario, model, mode, mpc_config(cfg), params=params, seed=cell.seed)
    log.write(Path(out_dir) / "logs", cell.stem)
    return log


def aggregate(rows: list) -> list:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["stiffness_scale"], r["mode"]), []).append(r)
    out = []
    for (scen, scale, mode), rs in groups.items():
        err = np.array([r["terminal_error_cm"] for r in rs])
        st = np.array([r["settling_time_s"] for r in rs])
        ddof = 1 if len(rs) > 1 else 0
        out.append({"scenario": scen, "stiffness_scale": scale, "mode": mode, "n": len(rs),
                    "terminal_error_cm_mean": float(err.mean()),
                    "terminal_error_cm_std": float(err.std(ddof=ddof)),
                    "settling_time_s_mean": float(st.mean()),
                    "settling_time_s_std": float(st.std(ddof=ddof)),
                    "settled": int(sum(r["settled"] for r in rs))})
    return out


def run_benchmark(cfg: RunConfig, models: dict, out_dir) -> dict:
    """Run every grid cell and write ``runs.csv``, ``summary.csv`` and ``report.json``.

    ``models`` maps a mode (or ``(mode, scale)``) to the dynamics model it
    uses; servo and oracle need none.  A run that never settles is given the
    full episode length as its settling time.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, violations = [], []
    for cell in benchmark_cells(cfg):
        log = run_cell(cell, cfg, models, out)
        st = log.settling_time
        rows.append({"scenario": cell.scenario, "stiffness_scale": cell.scale, "mode": cell.mode,
                     "seed": cell.seed, "terminal_error_cm": 100 * log.terminal_error,
                     "settling_time_s": st if st is not None else len(log.controls) * log.dt,
                     "settled": st is not None, "steps": len(log.controls), "status": log.status})
        if log.controls:
            violations.append(log.max_constraint_violation())
    summary = aggregate(rows)
    _write_csv(out / "runs.csv", rows)
    _write_csv(out / "summary.csv", summary)
    report = {"runs": rows, "summary": summary,
              "max_constraint_violation": max(violations) if violations else None}
    tmp = out / "report.json.tmp"
    tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / "report.json")
    return report


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def _write_csv(path: Path, rows: list) -> None:
    if not rows:
        path.write_text("")
        return
    tmp = path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    tmp.replace(path)

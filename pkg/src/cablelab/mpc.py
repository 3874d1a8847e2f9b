"""Trust-region MPC over a hybrid (offline model + online residual) cable model.

Controls are optimised in scaled coordinates ``u = (vx, vy, w * wz)`` with
``w = 0.1 m/rad`` so that a single Euclidean ball of radius ``eps`` per robot
bounds translation and rotation together.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import sim
from .dataset import bootstrap_history
from .residual import ResidualBuffer, ZeroDynamics, predict_residual, solve

logger = logging.getLogger(__name__)

MODES = ("direct", "servo", "hybrid", "oracle", "finetune", "domrand")


class ControllerError(RuntimeError):
    pass


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 5
    dt: float = 1.0
    eps_init: float = 0.05
    eta_plus: float = 0.8
    eta_minus: float = 0.4
    tau_plus: float = 1.05
    tau_minus: float = 0.95
    tolerance: float = 0.01
    max_steps: int = 60
    eps_min: float = 1e-4
    eps_max: float = 0.5
    angular_weight: float = 0.1
    ridge_lambda: float = 10.0
    window: int = 5
    max_iters: int = 12
    step_tol: float = 1e-6
    warmup_steps: int = 3
    warmup_speed: float = 0.01

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not 0 < self.eta_minus < self.eta_plus < 1:
            raise ValueError("need 0 < eta_minus < eta_plus < 1")
        if not self.tau_minus < 1 < self.tau_plus:
            raise ValueError("need tau_minus < 1 < tau_plus")
        if not 0 < self.eps_min <= self.eps_init <= self.eps_max:
            raise ValueError("eps_init must lie within [eps_min, eps_max]")
        if self.max_steps < 1 or self.max_iters < 1:
            raise ValueError("max_steps and max_iters must be >= 1")

    @property
    def n_controls(self) -> int:
        return self.horizon + 1


@dataclass(frozen=True)
class TrustRegionState:
    eps: float
    rhos: tuple = ()


def trust_update(tr: TrustRegionState, de_actual: float, de_pred: float,
                 config: MpcConfig = MpcConfig()) -> TrustRegionState:
    """Resize the trust region from the ratio of actual to predicted error reduction."""
    if abs(de_pred) < 1e-12:
        logger.debug("predicted reduction %.3e too small; treating rho as 0", de_pred)
        rho = 0.0
    else:
        rho = de_actual / de_pred
    eps = tr.eps
    if rho >= config.eta_plus:
        eps = config.tau_plus * eps
    elif rho <= config.eta_minus:
        eps = config.tau_minus * eps
    eps = min(max(eps, config.eps_min), config.eps_max)
    return TrustRegionState(eps, tr.rhos + (rho,))


def shape_error(X, X_d) -> float:
    d = np.asarray(X, dtype=float) - np.asarray(X_d, dtype=float)
    return float(np.sum(d * d))


def mean_keypoint_error(X, X_d) -> float:
    d = np.asarray(X, dtype=float) - np.asarray(X_d, dtype=float)
    return float(np.mean(np.linalg.norm(d, axis=-1)))


# -- control scaling and projection ------------------------------------------------

def to_scaled(R, angular_weight: float = 0.1) -> np.ndarray:
    u = np.array(R, dtype=float, copy=True)
    u[..., 2] *= angular_weight
    return u


def from_scaled(u, angular_weight: float = 0.1) -> np.ndarray:
    R = np.array(u, dtype=float, copy=True)
    R[..., 2] /= angular_weight
    return R


def control_norms(R, angular_weight: float = 0.1) -> np.ndarray:
    """Per robot weighted norm ``||(vx, vy, w*wz)||``."""
    return np.linalg.norm(to_scaled(R, angular_weight), axis=-1)


def project(u, eps: float) -> np.ndarray:
    """Radially shrink every per-robot vector in ``u`` (``(..., 3)``) into the ball of radius eps."""
    u = np.asarray(u, dtype=float)
    if eps <= 0:
        return np.zeros_like(u)
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    return u * np.minimum(1.0, eps / np.maximum(n, 1e-300))


# -- predictors ---------------------------------------------------------------------

class LearnedPredictor:
    """Horizon rollout of ``X(t+1) = X(t) + (f(H, R) + R J) dt`` with reverse-mode gradients."""

    def __init__(self, model, history, X_d, J=None, dt: float = 1.0, angular_weight: float = 0.1):
        self.model = model
        self.history = np.asarray(history, dtype=float)
        self.X_d = np.asarray(X_d, dtype=float)
        self.J = None if J is None else np.asarray(J, dtype=float)
        self.dt = dt
        self.w = angular_weight

    def _velocity(self, H, R, with_cache: bool):
        if with_cache:
            vel, cache = self.model.velocity_with_cache(H, R)
        else:
            vel, cache = self.model.velocity_with_cache(H, R)[0], None
        if self.J is not None:
            vel = vel + predict_residual(self.J, R)
        return vel, cache

    def rollout(self, u, with_cache: bool = False):
        R_all = from_scaled(u, self.w)
        m1 = len(self.history)
        S = list(self.history)
        caches = []
        cost = 0.0
        for t, R in enumerate(R_all):
            H = np.stack(S[t:t + m1])
            vel, cache = self._velocity(H, R, with_cache)
            nxt = S[-1] + vel * self.dt
            if not np.all(np.isfinite(nxt)):
                raise ControllerError("model prediction is not finite")
            S.append(nxt)
            caches.append(cache)
            cost += shape_error(nxt, self.X_d)
        return cost, np.stack(S[m1:]), caches

    def cost(self, u) -> float:
        return self.rollout(u)[0]

    def cost_and_grad(self, u):
        cost, states, caches = self.rollout(u, with_cache=True)
        m1 = len(self.history)
        T = len(states)
        gS = np.zeros((m1 + T,) + self.X_d.shape)
        gS[m1:] = 2.0 * (states - self.X_d)
        gR = np.zeros((T, u.shape[1], 3))
        for t in range(T - 1, -1, -1):
            g_next = gS[t + m1]
            gS[t + m1 - 1] += g_next
            g_vel = self.dt * g_next
            g_hist, g_ctrl = self.model.velocity_vjp(caches[t], g_vel)
            gS[t:t + m1] += g_hist
            if self.J is not None:
                g_ctrl = g_ctrl + (self.J @ g_vel.ravel()).reshape(g_ctrl.shape)
            gR[t] = g_ctrl
        gu = gR.copy()
        gu[..., 2] /= self.w
        return cost, gu, states


class SimulatorModel:
    """Marker model: plan with the true simulator (the oracle controller)."""

    def __init__(self, params: sim.CableParams):
        self.params = params


class SimulatorPredictor:
    """Plans on the exact simulator; gradients by forward differences reusing causality."""

    def __init__(self, state: sim.CableState, params, X_d, dt: float = 1.0,
                 angular_weight: float = 0.1, fd_step: float = 1e-4):
        self.state = state
        self.params = params
        self.X_d = np.asarray(X_d, dtype=float)
        self.dt = dt
        self.w = angular_weight
        self.h = fd_step

    def _run(self, start_state, R_seq):
        s = start_state
        states = []
        for R in R_seq:
            s = sim.step(s, R, self.params, self.dt)
            states.append(s)
        return states

    def rollout(self, u):
        states = self._run(self.state, from_scaled(u, self.w))
        kp = np.stack([s.keypoints for s in states])
        return sum(shape_error(k, self.X_d) for k in kp), kp, states

    def cost(self, u) -> float:
        return self.rollout(u)[0]

    def cost_and_grad(self, u):
        cost, kp, states = self.rollout(u)
        R = from_scaled(u, self.w)
        prefix = [shape_error(k, self.X_d) for k in kp]
        g = np.zeros_like(u)
        T = len(u)
        for t in range(T):
            start = self.state if t == 0 else states[t - 1]
            base = sum(prefix[:t])
            for q in range(u.shape[1]):
                for c in range(3):
                    up = u.copy()
                    up[t, q, c] += self.h
                    traj = self._run(start, from_scaled(up[t:], self.w))
                    val = base + sum(shape_error(s.keypoints, self.X_d) for s in traj)
                    g[t, q, c] = (val - cost) / self.h
        del R
        return cost, g, kp


# -- solver -------------------------------------------------------------------------

@dataclass
class MpcSolution:
    controls: np.ndarray
    scaled: np.ndarray
    cost: float
    initial_cost: float
    predicted_first: np.ndarray
    predicted_reduction: float
    iterations: int
    costs: list = field(default_factory=list)
    stalled: bool = False


def projected_gradient(predictor, u0, eps: float, max_iters: int = 12, step_tol: float = 1e-6,
                       max_halvings: int = 12):
    """Minimise ``predictor.cost`` over the product of per-robot balls.

    Backtracking accepts a step only if it lowers the cost, so the recorded
    cost sequence is non-increasing.  Returns ``(u_best, cost_best, costs, iters)``.
    """
    u = project(u0, eps)
    cost, g, _ = predictor.cost_and_grad(u)
    costs = [cost]
    gmax = np.max(np.linalg.norm(g, axis=-1)) if g.size else 0.0
    alpha = eps / gmax if gmax > 0 else 0.0
    it = 0
    for it in range(1, max_iters + 1):
        if alpha <= 0 or eps <= 0:
            break
        accepted = False
        for _ in range(max_halvings):
            cand = project(u - alpha * g, eps)
            step = np.linalg.norm(cand - u)
            if step <= step_tol * max(eps, 1e-12):
                break
            c = predictor.cost(cand)
            if c < cost:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        improvement = cost - c
        assert c <= costs[-1]
        u = cand
        cost, g, _ = predictor.cost_and_grad(u)
        costs.append(cost)
        alpha *= 2.0
        if improvement <= step_tol * max(costs[0], 1e-12):
            break
    return u, cost, costs, it


def solve_mpc(history, X_d, model, J, eps: float, config: MpcConfig = MpcConfig(),
              warm_start=None, state: sim.CableState | None = None) -> MpcSolution:
    """Plan ``horizon + 1`` controls minimising the summed squared shape error.

    ``model`` is a learned dynamics model (``J`` adds the online residual,
    ``None`` means no residual) or a :class:`SimulatorModel`, which needs the
    full simulator ``state``.
    """
    history = np.asarray(history, dtype=float)
    X_now = history[-1]
    n_robots = 2
    if isinstance(model, SimulatorModel):
        if state is None:
            raise ValueError("planning on the simulator needs the full state")
        predictor = SimulatorPredictor(state, model.params, X_d, config.dt, config.angular_weight)
    else:
        predictor = LearnedPredictor(model, history, X_d, J, config.dt, config.angular_weight)
    shape = (config.n_controls, n_robots, 3)
    u0 = np.zeros(shape) if warm_start is None else to_scaled(warm_start, config.angular_weight)
    if u0.shape != shape:
        raise ValueError(f"warm start must have shape {shape}")
    eps = max(float(eps), 0.0)
    u, cost, costs, iters = projected_gradient(predictor, u0, eps, config.max_iters, config.step_tol)
    if not np.isfinite(cost):
        raise ControllerError("solver produced a non-finite cost")
    _, states, _ = predictor.rollout(u)[:3]
    e_now = shape_error(X_now, X_d)
    predicted_reduction = e_now - shape_error(states[0], X_d)
    return MpcSolution(
        controls=from_scaled(u, config.angular_weight),
        scaled=u,
        cost=cost,
        initial_cost=costs[0],
        predicted_first=states[0],
        predicted_reduction=predicted_reduction,
        iterations=iters,
        costs=costs,
        stalled=abs(predicted_reduction) < 1e-12,
    )


# -- closed loop --------------------------------------------------------------------

@dataclass
class TaskLog:
    mode: str
    seed: int
    scenario: str
    stiffness_scale: float
    target: np.ndarray
    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    rhos: list = field(default_factory=list)
    predicted_reductions: list = field(default_factory=list)
    j_norms: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    status: str = "running"
    message: str = ""
    dt: float = 1.0
    tolerance: float = 0.01

    @property
    def terminal_error(self) -> float:
        return self.errors[-1]

    @property
    def settling_time(self) -> float | None:
        """Time of the first step after which the error stays below the tolerance."""
        below = np.asarray(self.errors) < self.tolerance
        if not below[-1]:
            return None
        k = len(below)
        while k > 0 and below[k - 1]:
            k -= 1
        return k * self.dt

    def max_constraint_violation(self, angular_weight: float = 0.1) -> float:
        worst = -math.inf
        for R, eps in zip(self.controls, self.eps):
            worst = max(worst, float(np.max(control_norms(R, angular_weight))) - eps)
        return worst

    def summary(self) -> dict:
        st = self.settling_time
        return {"scenario": self.scenario, "mode": self.mode, "seed": self.seed,
                "stiffness_scale": self.stiffness_scale,
                "terminal_error_cm": round(100 * self.terminal_error, 6),
                "settling_time_s": st, "steps": len(self.controls),
                "status": self.status, "message": self.message}

    def write(self, directory, stem: str | None = None) -> tuple[Path, Path]:
        """``<stem>.csv`` per step and ``<stem>.json`` summary; deterministic content only."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.scenario}_{self.mode}_{self.stiffness_scale:g}x_seed{self.seed}"
        csv_path = directory / f"{stem}.csv"
        tmp = csv_path.with_suffix(".csv.tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "time_s", "error_m", "eps", "rho", "mode", "seed"])
            for k, err in enumerate(self.errors):
                eps = self.eps[k] if k < len(self.eps) else ""
                rho = self.rhos[k] if k < len(self.rhos) else ""
                w.writerow([k, f"{k * self.dt:g}", f"{err:.9f}",
                            f"{eps:.9f}" if eps != "" else "", f"{rho:.9f}" if rho != "" else "",
                            self.mode, self.seed])
        tmp.replace(csv_path)
        json_path = directory / f"{stem}.json"
        tmp = json_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        tmp.replace(json_path)
        return csv_path, json_path


def run_task(scenario: sim.Scenario, model, mode: str, config: MpcConfig = MpcConfig(),
             params: sim.CableParams | None = None, seed: int = 0) -> TaskLog:
    """Closed loop: plan, execute the first control, learn the residual, resize the trust region.

    ``params`` are the training-time cable parameters; the executed dynamics
    use them scaled by ``scenario.stiffness_scale``.  A few small random
    moves first fill the history window (and the residual buffer), which
    also makes runs with different seeds start from slightly different states.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    params = params or sim.CableParams()
    true_params = sim.perturb(params, scenario.stiffness_scale)
    if mode == "oracle":
        model = SimulatorModel(true_params)
    elif mode == "servo":
        model = ZeroDynamics(params.n_keypoints, config.window)
    elif model is None:
        raise ValueError(f"mode {mode!r} needs a trained model")
    use_residual = mode in ("servo", "hybrid")
    learned = not isinstance(model, SimulatorModel)

    log = TaskLog(mode=mode, seed=seed, scenario=scenario.name,
                  stiffness_scale=scenario.stiffness_scale, target=scenario.target,
                  dt=config.dt, tolerance=config.tolerance)
    X_d = scenario.target
    state = scenario.initial
    history = bootstrap_history(state.keypoints, config.window)
    buffer = ResidualBuffer(config.window + 1)
    J = np.zeros((6, 2 * params.n_keypoints)) if use_residual else None

    def advance(state, history, R, k):
        nxt = sim.step(state, R, true_params, config.dt, step_index=k)
        if learned and use_residual:
            pred = model.predict_velocity(history, R)
            buffer.observe(R, history[-1], nxt.keypoints, pred, config.dt)
        history = np.concatenate([history[1:], nxt.keypoints[None]])
        return nxt, history

    try:
        warm = sim.random_policy(seed, config.warmup_steps, config.warmup_speed,
                                 angular_scale=10.0) if config.warmup_steps > 0 else []
        for k, R in enumerate(warm):
            state, history = advance(state, history, R, -config.warmup_steps + k)
        if use_residual and len(buffer):
            J = solve(buffer, config.ridge_lambda)
    except sim.SimulationError as exc:
        log.status, log.message = "error", str(exc)
        log.errors.append(mean_keypoint_error(state.keypoints, X_d))
        return log

    tr = TrustRegionState(config.eps_init)
    plan = None
    log.states.append(state.keypoints.copy())
    log.errors.append(mean_keypoint_error(state.keypoints, X_d))
    for k in range(config.max_steps):
        if log.errors[-1] < config.tolerance:
            log.status = "converged"
            break
        t0 = time.perf_counter()
        try:
            warm_u = None
            if plan is not None:
                warm_u = np.concatenate([plan[1:], plan[-1:]])
            sol = solve_mpc(history, X_d, model, J, tr.eps, config, warm_start=warm_u, state=state)
        except (ControllerError, FloatingPointError) as exc:
            log.status, log.message = "error", f"solver failure at step {k}: {exc}"
            break
        R = sol.controls[0]
        norms = control_norms(R, config.angular_weight)
        assert np.all(norms <= tr.eps * (1 + 1e-9) + 1e-15), "executed control leaves the trust region"
        e_before = shape_error(history[-1], X_d)
        try:
            state, history = advance(state, history, R, k)
        except sim.SimulationError as exc:
            log.status, log.message = "error", str(exc)
            break
        if use_residual:
            J = solve(buffer, config.ridge_lambda)
        de_actual = e_before - shape_error(history[-1], X_d)
        log.controls.append(R.copy())
        log.eps.append(tr.eps)
        tr = trust_update(tr, de_actual, sol.predicted_reduction, config)
        log.rhos.append(tr.rhos[-1])
        log.predicted_reductions.append(sol.predicted_reduction)
        log.j_norms.append(float(np.linalg.norm(J)) if J is not None else 0.0)
        log.states.append(state.keypoints.copy())
        log.errors.append(mean_keypoint_error(state.keypoints, X_d))
        log.wall_times.append(time.perf_counter() - t0)
        plan = sol.controls
    else:
        log.status = "converged" if log.errors[-1] < config.tolerance else "max_steps"
    if log.status == "running":
        log.status = "converged" if log.errors[-1] < config.tolerance else "max_steps"
    return log


def config_dict(config: MpcConfig) -> dict:
    return asdict(config)

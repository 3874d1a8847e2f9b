"""Ground-truth 2D cable simulator.

A planar mass-spring chain with stretch springs between neighbours, angular
springs over consecutive triples, axial dashpots and viscous drag against the
table.  Two grippers hold the two outermost particles at each end as a rigid
body, so a commanded yaw rate bends the cable.

Springs are integrated explicitly; dashpots and table drag are integrated
implicitly (block-tridiagonal solve per substep), which keeps the stiff axial
damping unconditionally stable.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

# |omega * dt| must stay below 2 for symplectic Euler; keep a 10% margin
_STABILITY_MARGIN = 1.8
_SEGMENT_BOUNDS = (0.2, 3.0)


def _stable_dt(ks: float, kth: float, rest: float, mass: float) -> float:
    # Gershgorin bound on the spring Hessian: 4 k_s for stretch, 16 k_theta / l0^2 for bending
    omega2 = (4.0 * ks + 16.0 * kth / rest ** 2) / mass
    return _STABILITY_MARGIN / math.sqrt(omega2) if omega2 > 0 else math.inf


class SimulationError(RuntimeError):
    """Raised when the integrator diverges or the chain leaves its sanity bounds."""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


@dataclass(frozen=True)
class CableParams:
    """Physical and numerical parameters of the simulated cable.

    ``bending_stiffness`` is converted to a per-joint angular spring constant
    ``bending_stiffness * diameter**2`` (a linear spring acting on the cable
    surface), so the three Table-style constants share the same N/m scale and
    the joint constant does not depend on the particle count.  ``ground_drag`` models the table and
    is deliberately left untouched by :func:`perturb`.
    """

    length: float = 1.0
    diameter: float = 0.01
    n_particles: int = 25
    n_keypoints: int = 13
    elastic_stiffness: float = 4e3
    damping_stiffness: float = 2e3
    bending_stiffness: float = 3e3
    particle_mass: float = 0.06
    ground_drag: float = 5.0
    tangential_drag: float = 0.1
    inner_dt: float = 1e-3
    global_scale: float = 2.0

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("length must be positive")
        if not self.diameter > 0:
            raise ValueError("diameter must be positive")
        if self.n_particles < 4:
            raise ValueError("n_particles must be >= 4 (two grasped pairs)")
        if self.n_keypoints < 2 or self.n_keypoints > self.n_particles:
            raise ValueError("need 2 <= n_keypoints <= n_particles")
        if (self.n_particles - 1) % (self.n_keypoints - 1):
            raise ValueError("keypoints must land on particles: "
                             "(n_particles - 1) % (n_keypoints - 1) != 0")
        for name in ("elastic_stiffness", "damping_stiffness", "bending_stiffness", "ground_drag",
                     "tangential_drag"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.particle_mass > 0:
            raise ValueError("particle_mass must be positive")
        if not self.inner_dt > 0:
            raise ValueError("inner_dt must be positive")
        if self.inner_dt > self.max_stable_dt:
            raise ValueError(
                f"inner_dt={self.inner_dt:g} s is unstable for these stiffnesses "
                f"(limit {self.max_stable_dt:g} s)")

    @property
    def rest_length(self) -> float:
        return self.length / (self.n_particles - 1)

    @property
    def keypoint_stride(self) -> int:
        return (self.n_particles - 1) // (self.n_keypoints - 1)

    @property
    def joint_stiffness(self) -> float:
        return self.bending_stiffness * self.diameter ** 2

    @property
    def max_stable_dt(self) -> float:
        return _stable_dt(self.elastic_stiffness, self.joint_stiffness, self.rest_length,
                          self.particle_mass)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CableState:
    """Full simulator state; ``keypoints`` is the N-point view used everywhere else."""

    particles: np.ndarray
    particle_velocities: np.ndarray
    velocities: np.ndarray
    keypoint_stride: int
    timestamp: float = 0.0

    @property
    def keypoints(self) -> np.ndarray:
        return self.particles[:: self.keypoint_stride]

    @property
    def gripper_angles(self) -> np.ndarray:
        p = self.particles
        left = p[1] - p[0]
        right = p[-2] - p[-1]
        return np.array([math.atan2(left[1], left[0]), math.atan2(right[1], right[0])])

    def mirrored(self) -> "CableState":
        """Reflect across the y axis and reverse particle order (swaps the grippers)."""
        flip = np.array([-1.0, 1.0])
        return CableState(
            particles=self.particles[::-1] * flip,
            particle_velocities=self.particle_velocities[::-1] * flip,
            velocities=self.velocities[::-1] * flip,
            keypoint_stride=self.keypoint_stride,
            timestamp=self.timestamp,
        )


def make_cable(params: CableParams) -> CableState:
    """Straight horizontal cable centred at the origin, at rest."""
    x = np.linspace(-params.length / 2, params.length / 2, params.n_particles)
    particles = np.column_stack([x, np.zeros_like(x)])
    return CableState(
        particles=particles,
        particle_velocities=np.zeros_like(particles),
        velocities=np.zeros((params.n_keypoints, 2)),
        keypoint_stride=params.keypoint_stride,
    )


def perturb(params: CableParams, scale: float) -> CableParams:
    """Scale the three spring constants, shrinking ``inner_dt`` if stability demands it."""
    if not 0.05 <= scale <= 10:
        raise ValueError(f"stiffness scale {scale} outside [0.05, 10]")
    if scale == 1:
        return params
    ks = params.elastic_stiffness * scale
    cs = params.damping_stiffness * scale
    kb = params.bending_stiffness * scale
    limit = _stable_dt(ks, kb * params.diameter ** 2, params.rest_length, params.particle_mass)
    inner_dt = params.inner_dt
    if inner_dt > limit:
        inner_dt = params.inner_dt / math.ceil(params.inner_dt / limit)
    return replace(params, elastic_stiffness=ks, damping_stiffness=cs,
                   bending_stiffness=kb, inner_dt=inner_dt)


@numba.njit(cache=True)
def _integrate(x, v, controls, n_sub, h, ks, cs, kth, rest, mass, drag_n, drag_t):
    """Advance particles in place by ``n_sub`` substeps; returns failing substep or -1."""
    P = x.shape[0]
    F = np.zeros((P, 2))
    D = np.zeros((P, 2, 2))
    E = np.zeros((P, 2, 2))
    rhs = np.zeros((P, 2))
    Cp = np.zeros((P, 2, 2))
    dp = np.zeros((P, 2))

    pl0x, pl0y = x[0, 0], x[0, 1]
    pr0x, pr0y = x[P - 1, 0], x[P - 1, 1]
    phl0 = math.atan2(x[1, 1] - x[0, 1], x[1, 0] - x[0, 0])
    phr0 = math.atan2(x[P - 2, 1] - x[P - 1, 1], x[P - 2, 0] - x[P - 1, 0])
    vlx, vly, wl = controls[0, 0], controls[0, 1], controls[0, 2]
    vrx, vry, wr = controls[1, 0], controls[1, 1], controls[1, 2]

    for s in range(n_sub):
        for i in range(P):
            F[i, 0] = 0.0
            F[i, 1] = 0.0
        # stretch springs
        for i in range(P - 1):
            dx = x[i + 1, 0] - x[i, 0]
            dy = x[i + 1, 1] - x[i, 1]
            L = math.sqrt(dx * dx + dy * dy)
            f = ks * (L - rest) / L
            F[i, 0] += f * dx
            F[i, 1] += f * dy
            F[i + 1, 0] -= f * dx
            F[i + 1, 1] -= f * dy
        # angular springs over triples
        for i in range(1, P - 1):
            ax = x[i, 0] - x[i - 1, 0]
            ay = x[i, 1] - x[i - 1, 1]
            bx = x[i + 1, 0] - x[i, 0]
            by = x[i + 1, 1] - x[i, 1]
            th = math.atan2(ax * by - ay * bx, ax * bx + ay * by)
            a2 = ax * ax + ay * ay
            b2 = bx * bx + by * by
            gax = -ay / a2
            gay = ax / a2
            gbx = -by / b2
            gby = bx / b2
            c = -kth * th
            F[i - 1, 0] += c * gax
            F[i - 1, 1] += c * gay
            F[i, 0] -= c * (gax + gbx)
            F[i, 1] -= c * (gay + gby)
            F[i + 1, 0] += c * gbx
            F[i + 1, 1] += c * gby

        # implicit damping: (m + h G_i) v_i + h * sum_j c u u^T (v_i - v_j) = m v_i + h F_i
        # with anisotropic table drag G_i = g_n I + (g_t - g_n) t t^T
        for i in range(P):
            j0 = i - 1 if i > 0 else 0
            j1 = i + 1 if i < P - 1 else P - 1
            tx = x[j1, 0] - x[j0, 0]
            ty = x[j1, 1] - x[j0, 1]
            tn = tx * tx + ty * ty
            g = h * (drag_t - drag_n) / tn
            D[i, 0, 0] = mass + h * drag_n + g * tx * tx
            D[i, 0, 1] = g * tx * ty
            D[i, 1, 0] = g * tx * ty
            D[i, 1, 1] = mass + h * drag_n + g * ty * ty
            rhs[i, 0] = mass * v[i, 0] + h * F[i, 0]
            rhs[i, 1] = mass * v[i, 1] + h * F[i, 1]
        for i in range(P - 1):
            dx = x[i + 1, 0] - x[i, 0]
            dy = x[i + 1, 1] - x[i, 1]
            L2 = dx * dx + dy * dy
            k = h * cs / L2
            uxx = k * dx * dx
            uxy = k * dx * dy
            uyy = k * dy * dy
            D[i, 0, 0] += uxx
            D[i, 0, 1] += uxy
            D[i, 1, 0] += uxy
            D[i, 1, 1] += uyy
            D[i + 1, 0, 0] += uxx
            D[i + 1, 0, 1] += uxy
            D[i + 1, 1, 0] += uxy
            D[i + 1, 1, 1] += uyy
            E[i, 0, 0] = -uxx
            E[i, 0, 1] = -uxy
            E[i, 1, 0] = -uxy
            E[i, 1, 1] = -uyy

        # grasped pairs follow the gripper kinematics at the end of the substep
        t1 = (s + 1) * h
        phl = phl0 + wl * t1
        phr = phr0 + wr * t1
        plx = pl0x + vlx * t1
        ply = pl0y + vly * t1
        prx = pr0x + vrx * t1
        pry = pr0y + vry * t1
        cl, sl = math.cos(phl), math.sin(phl)
        cr, sr = math.cos(phr), math.sin(phr)
        v[0, 0] = vlx
        v[0, 1] = vly
        v[1, 0] = vlx - wl * rest * sl
        v[1, 1] = vly + wl * rest * cl
        v[P - 1, 0] = vrx
        v[P - 1, 1] = vry
        v[P - 2, 0] = vrx - wr * rest * sr
        v[P - 2, 1] = vry + wr * rest * cr

        # move known velocities of the grasped neighbours to the right-hand side
        lo = 2
        hi = P - 3
        rhs[lo, 0] -= E[lo - 1, 0, 0] * v[lo - 1, 0] + E[lo - 1, 0, 1] * v[lo - 1, 1]
        rhs[lo, 1] -= E[lo - 1, 1, 0] * v[lo - 1, 0] + E[lo - 1, 1, 1] * v[lo - 1, 1]
        rhs[hi, 0] -= E[hi, 0, 0] * v[hi + 1, 0] + E[hi, 0, 1] * v[hi + 1, 1]
        rhs[hi, 1] -= E[hi, 1, 0] * v[hi + 1, 0] + E[hi, 1, 1] * v[hi + 1, 1]

        # block Thomas sweep over the free particles lo..hi
        if hi >= lo:
            for i in range(lo, hi + 1):
                a00 = D[i, 0, 0]
                a01 = D[i, 0, 1]
                a10 = D[i, 1, 0]
                a11 = D[i, 1, 1]
                r0 = rhs[i, 0]
                r1 = rhs[i, 1]
                if i > lo:
                    # D_i - E_{i-1} C'_{i-1},  r_i - E_{i-1} d'_{i-1}
                    e00 = E[i - 1, 0, 0]
                    e01 = E[i - 1, 0, 1]
                    e10 = E[i - 1, 1, 0]
                    e11 = E[i - 1, 1, 1]
                    a00 -= e00 * Cp[i - 1, 0, 0] + e01 * Cp[i - 1, 1, 0]
                    a01 -= e00 * Cp[i - 1, 0, 1] + e01 * Cp[i - 1, 1, 1]
                    a10 -= e10 * Cp[i - 1, 0, 0] + e11 * Cp[i - 1, 1, 0]
                    a11 -= e10 * Cp[i - 1, 0, 1] + e11 * Cp[i - 1, 1, 1]
                    r0 -= e00 * dp[i - 1, 0] + e01 * dp[i - 1, 1]
                    r1 -= e10 * dp[i - 1, 0] + e11 * dp[i - 1, 1]
                det = a00 * a11 - a01 * a10
                i00 = a11 / det
                i01 = -a01 / det
                i10 = -a10 / det
                i11 = a00 / det
                if i < hi:
                    e00 = E[i, 0, 0]
                    e01 = E[i, 0, 1]
                    e10 = E[i, 1, 0]
                    e11 = E[i, 1, 1]
                    Cp[i, 0, 0] = i00 * e00 + i01 * e10
                    Cp[i, 0, 1] = i00 * e01 + i01 * e11
                    Cp[i, 1, 0] = i10 * e00 + i11 * e10
                    Cp[i, 1, 1] = i10 * e01 + i11 * e11
                dp[i, 0] = i00 * r0 + i01 * r1
                dp[i, 1] = i10 * r0 + i11 * r1
            v[hi, 0] = dp[hi, 0]
            v[hi, 1] = dp[hi, 1]
            for i in range(hi - 1, lo - 1, -1):
                v[i, 0] = dp[i, 0] - (Cp[i, 0, 0] * v[i + 1, 0] + Cp[i, 0, 1] * v[i + 1, 1])
                v[i, 1] = dp[i, 1] - (Cp[i, 1, 0] * v[i + 1, 0] + Cp[i, 1, 1] * v[i + 1, 1])

        for i in range(lo, hi + 1):
            x[i, 0] += h * v[i, 0]
            x[i, 1] += h * v[i, 1]
        x[0, 0] = plx
        x[0, 1] = ply
        x[1, 0] = plx + rest * cl
        x[1, 1] = ply + rest * sl
        x[P - 1, 0] = prx
        x[P - 1, 1] = pry
        x[P - 2, 0] = prx + rest * cr
        x[P - 2, 1] = pry + rest * sr

        for i in range(P):
            if not (math.isfinite(x[i, 0]) and math.isfinite(x[i, 1])):
                return s
    return -1


def _check_control(control, n_robots: int = 2) -> np.ndarray:
    control = np.asarray(control, dtype=float)
    if control.shape == (3 * n_robots,):
        control = control.reshape(n_robots, 3)
    if control.shape != (n_robots, 3):
        raise ValueError(f"control must have shape ({n_robots}, 3), got {control.shape}")
    if not np.all(np.isfinite(control)):
        raise ValueError("control contains non-finite values")
    return control


def _substeps(dt: float, inner_dt: float) -> int:
    n = int(round(dt / inner_dt))
    if n < 1 or abs(n * inner_dt - dt) > 1e-9 * max(1.0, dt):
        raise ValueError(f"dt={dt} is not an integer multiple of inner_dt={inner_dt}")
    return n


def step(state: CableState, control, params: CableParams, dt: float = 1.0,
         step_index: int = 0) -> CableState:
    """Advance the cable by one control period with the grippers at constant velocity."""
    control = _check_control(control)
    n_sub = _substeps(dt, params.inner_dt)
    x = np.array(state.particles, dtype=np.float64, copy=True)
    v = np.array(state.particle_velocities, dtype=np.float64, copy=True)
    bad = _integrate(x, v, control, n_sub, params.inner_dt, params.elastic_stiffness,
                     params.damping_stiffness, params.joint_stiffness, params.rest_length,
                     params.particle_mass, params.ground_drag, params.tangential_drag)
    if bad >= 0 or not np.all(np.isfinite(v)):
        raise SimulationError(f"integration diverged at substep {bad}", step_index)
    seg = np.linalg.norm(np.diff(x, axis=0), axis=1) / params.rest_length
    if seg.min() < _SEGMENT_BOUNDS[0] or seg.max() > _SEGMENT_BOUNDS[1]:
        raise SimulationError(
            f"segment length ratio left [{_SEGMENT_BOUNDS[0]}, {_SEGMENT_BOUNDS[1]}]: "
            f"[{seg.min():.3f}, {seg.max():.3f}]", step_index)
    stride = state.keypoint_stride
    return CableState(
        particles=x,
        particle_velocities=v,
        velocities=(x[::stride] - state.particles[::stride]) / dt,
        keypoint_stride=stride,
        timestamp=state.timestamp + dt,
    )


def energy(state: CableState, params: CableParams) -> float:
    """Kinetic plus stretch and bend potential energy (J)."""
    x, v = state.particles, state.particle_velocities
    kinetic = 0.5 * params.particle_mass * float(np.sum(v * v))
    seg = np.diff(x, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    stretch = 0.5 * params.elastic_stiffness * float(np.sum((lengths - params.rest_length) ** 2))
    a, b = seg[:-1], seg[1:]
    theta = np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], np.sum(a * b, axis=1))
    bend = 0.5 * params.joint_stiffness * float(np.sum(theta ** 2))
    return kinetic + stretch + bend


def polyline_length(points: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# target shapes

def _resample(curve: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    q = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(q, s, curve[:, 0]), np.interp(q, s, curve[:, 1])])


def target_shape(kind: str, n: int = 13, length: float = 1.0) -> np.ndarray:
    """Keypoints of a canonical target shape, equally spaced in arc length.

    U is a lower half circle, S two opposed half circles, Z a top bar, a
    diagonal and a bottom bar whose corners fall on keypoints.  Every shape
    is translated so its keypoint centroid is the origin, like the straight
    initial cable.
    """
    if n < 2:
        raise ValueError("need at least 2 keypoints")
    kind = kind.upper() if kind.lower() != "line" else "line"
    if kind == "line":
        pts = np.column_stack([np.linspace(-length / 2, length / 2, n), np.zeros(n)])
        return pts
    if kind == "U":
        r = length / np.pi
        th = np.linspace(np.pi, 2 * np.pi, n)
        pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    elif kind == "S":
        r = length / (2 * np.pi)
        dense = 4000
        th = np.linspace(0.0, np.pi, dense)
        first = np.column_stack([-r - r * np.cos(th), r * np.sin(th)])
        second = np.column_stack([r - r * np.cos(th), -r * np.sin(th)])
        pts = _resample(np.vstack([first, second[1:]]), n)
    elif kind == "Z":
        if n < 5:
            raise ValueError("Z shape needs n >= 5 so both corners land on keypoints")
        spacing = length / (n - 1)
        k_bar = max(1, round((n - 1) / 4))
        k_diag = (n - 1) - 2 * k_bar
        a, d = k_bar * spacing, k_diag * spacing
        h = math.sqrt(d * d - a * a)
        corners = np.array([[0.0, h], [a, h], [0.0, 0.0], [a, 0.0]])
        rot = -math.atan2(corners[3, 1] - corners[0, 1], corners[3, 0] - corners[0, 0])
        R = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
        counts = [k_bar, k_diag, k_bar]
        pieces = [corners[:1]]
        for (p, q), c in zip(zip(corners[:-1], corners[1:]), counts):
            t = np.linspace(0, 1, c + 1)[1:, None]
            pieces.append(p + t * (q - p))
        pts = np.vstack(pieces) @ R.T
    else:
        raise ValueError(f"unknown target shape {kind!r}; expected U, S, Z or line")
    return pts - pts.mean(axis=0)


@dataclass
class Scenario:
    name: str
    target: np.ndarray
    initial: CableState
    stiffness_scale: float = 1.0


def make_scenario(name: str, params: CableParams, stiffness_scale: float = 1.0,
                  seed: int = 0) -> Scenario:
    """Straight cable to a U/S/Z target, or a random target reached by a random walk."""
    initial = make_cable(params)
    if name.lower() == "random":
        controls = random_policy(seed, 15, 0.05, angular_scale=10.0, length=params.length)
        traj = rollout(initial, controls, params)
        target = traj.keypoints[-1].copy()
    else:
        target = target_shape(name, params.n_keypoints, params.length)
    return Scenario(name=name, target=target, initial=initial, stiffness_scale=stiffness_scale)


# ---------------------------------------------------------------------------
# data collection

def random_policy(seed, steps: int, max_speed: float = 0.05, n_robots: int = 2, *,
                  angular_scale: float = 1.0, smoothing: float = 0.8, hold_prob: float = 0.0,
                  length: float = 1.0, dt: float = 1.0) -> np.ndarray:
    """Smooth random end-effector velocities, shape ``(steps, n_robots, 3)``.

    Each component follows an Ornstein-Uhlenbeck style low-pass filtered noise
    drifting towards a gripper pose goal that is resampled every 20 steps.
    Linear components are clipped to ``max_speed`` and the yaw rate to
    ``max_speed * angular_scale``.  The implied gripper separation is kept
    above 0.3 of the cable length and below a ceiling of 0.97 that shrinks
    as the grippers turn away from each other, so random data never pulls
    the cable taut.  With ``hold_prob > 0`` the policy occasionally pauses for a
    few steps, which puts resting cables into the data.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if n_robots != 2:
        raise ValueError("the random policy drives exactly two grippers")
    rng = np.random.default_rng(seed)
    limit = np.array([max_speed, max_speed, max_speed * angular_scale])
    out = np.zeros((steps, n_robots, 3))
    if max_speed == 0:
        return out
    pose = np.array([[-length / 2, 0.0, 0.0], [length / 2, 0.0, 0.0]])
    u = np.zeros((n_robots, 3))
    sigma = 0.6 * limit
    gain = np.array([0.15, 0.15, 0.15])
    goal = pose
    hold = 0
    for t in range(steps):
        if t % 20 == 0:
            goal = np.array([
                [rng.uniform(-0.5, -0.15) * length, rng.uniform(-0.3, 0.3) * length, rng.uniform(-2, 2)],
                [rng.uniform(0.15, 0.5) * length, rng.uniform(-0.3, 0.3) * length, rng.uniform(-2, 2)],
            ])
        noise = rng.standard_normal((n_robots, 3))
        pause = rng.random() < hold_prob
        drive = np.clip(gain * (goal - pose) / dt, -limit, limit)
        u = smoothing * u + (1 - smoothing) * drive + math.sqrt(1 - smoothing ** 2) * sigma * noise
        u = np.clip(u, -limit, limit)
        if hold > 0 or pause:
            hold = hold - 1 if hold > 0 else int(rng.integers(2, 8))
            u = np.zeros_like(u)
        vel = u.copy()
        sep_vec = pose[1, :2] - pose[0, :2]
        sep = np.linalg.norm(sep_vec)
        axis = sep_vec / sep if sep > 0 else np.array([1.0, 0.0])
        rel = float((vel[1, :2] - vel[0, :2]) @ axis) * dt
        # grippers turned away from the chord need slack for the cable to curve between them
        chord = math.atan2(axis[1], axis[0])
        misalign = 2.0 - math.cos(pose[0, 2] - chord) - math.cos(pose[1, 2] - chord)
        hi = max(0.3, 0.97 - 0.2 * misalign) * length
        allowed = min(max(rel, 0.3 * length - sep), hi - sep)
        if allowed != rel:
            corr = rel - allowed
            vel[0, :2] += 0.5 * corr / dt * axis
            vel[1, :2] -= 0.5 * corr / dt * axis
            vel = np.clip(vel, -limit, limit)
        out[t] = vel
        pose = pose + vel * dt
    return out


@dataclass
class Trajectory:
    """States X(0..T) and controls R(0..T-1) of one simulated episode."""

    states: list
    controls: np.ndarray
    params: CableParams
    dt: float = 1.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def keypoints(self) -> np.ndarray:
        return np.stack([s.keypoints for s in self.states])

    def __len__(self) -> int:
        return len(self.states)


def rollout(state: CableState, controls, params: CableParams, dt: float = 1.0,
            seed: int | None = None) -> Trajectory:
    controls = np.asarray(controls, dtype=float).reshape(-1, 2, 3)
    states = [state]
    for t, r in enumerate(controls):
        states.append(step(states[-1], r, params, dt, step_index=t))
    return Trajectory(states=states, controls=controls, params=params, dt=dt, seed=seed)


# ---------------------------------------------------------------------------
# JSON Lines trajectory files

def _header(params: CableParams | None, seed, dt, meta) -> dict:
    return {"header": True, "params": None if params is None else params.to_dict(),
            "seed": seed, "dt": dt, "meta": meta or {}}


def write_keypoint_jsonl(path, keypoints: Sequence[np.ndarray], controls=None, *,
                         params: CableParams | None = None, seed=None, dt: float = 1.0,
                         meta: dict | None = None) -> None:
    """Write ``{"t", "X", "R"}`` records after a header line; the last state has ``R: null``."""
    path = Path(path)
    lines = [json.dumps(_header(params, seed, dt, meta), sort_keys=True)]
    for t, X in enumerate(keypoints):
        R = None
        if controls is not None and t < len(controls):
            R = np.asarray(controls[t]).reshape(-1, 3).tolist()
        lines.append(json.dumps({"t": t, "X": np.asarray(X).tolist(), "R": R}))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def write_trajectory(path, traj: Trajectory) -> None:
    write_keypoint_jsonl(path, list(traj.keypoints), traj.controls, params=traj.params,
                         seed=traj.seed, dt=traj.dt, meta=traj.meta)


def read_trajectory(path) -> tuple[dict, np.ndarray, np.ndarray]:
    """Returns ``(header, X (T+1, N, 2), R (T, Q, 3))``."""
    header = None
    X, R = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("header"):
                header = rec
                continue
            X.append(rec["X"])
            if rec.get("R") is not None:
                R.append(rec["R"])
    if header is None:
        raise ValueError(f"{path}: missing header line")
    X = np.asarray(X, dtype=float)
    R = np.asarray(R, dtype=float).reshape(-1, 2, 3) if R else np.zeros((0, 2, 3))
    return header, X, R


def params_from_dict(d: dict) -> CableParams:
    return CableParams(**d)


def iter_trajectories(paths: Iterable) -> Iterable[tuple[dict, np.ndarray, np.ndarray]]:
    for p in paths:
        yield read_trajectory(p)

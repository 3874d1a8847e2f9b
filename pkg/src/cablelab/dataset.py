"""Turning trajectories into supervised transitions and flat feature rows.

A feature row is ``[history (m+1, N, 2) flattened, controls (Q, 3) flattened]``
with the history in chronological order (oldest first); the target row is
the keypoint velocity ``(X(t+1) - X(t)) / dt`` flattened.  Flat rows keep the
dynamics models compatible with ordinary estimator tooling.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.utils.validation import check_array

from .sim import read_trajectory


def bootstrap_history(X0: np.ndarray, window: int) -> np.ndarray:
    """History of an episode start: the initial state replicated ``window + 1`` times."""
    X0 = np.asarray(X0, dtype=float)
    return np.repeat(X0[None], window + 1, axis=0)


def histories_from_states(X: np.ndarray, window: int) -> np.ndarray:
    """Sliding windows ``X[t-m..t]`` for every t, padding the start with X[0]."""
    X = np.asarray(X, dtype=float)
    pad = np.concatenate([np.repeat(X[:1], window, axis=0), X], axis=0)
    idx = np.arange(len(X))[:, None] + np.arange(window + 1)[None, :]
    return pad[idx]


def transitions(X: np.ndarray, R: np.ndarray, window: int, dt: float = 1.0):
    """``(histories, controls, velocities)`` for each of the T transitions of one episode."""
    X = np.asarray(X, dtype=float)
    R = np.asarray(R, dtype=float)
    if len(X) != len(R) + 1:
        raise ValueError(f"expected T+1 states for T controls, got {len(X)} and {len(R)}")
    H = histories_from_states(X[:-1], window)
    V = (X[1:] - X[:-1]) / dt
    return H, R, V


def pack_features(histories, controls) -> np.ndarray:
    histories = np.asarray(histories)
    controls = np.asarray(controls)
    n = histories.shape[0]
    return np.concatenate([histories.reshape(n, -1), controls.reshape(n, -1)], axis=1)


def history_slots(histories) -> np.ndarray:
    """Recode chronological histories ``(..., m+1, N, 2)`` as current position plus displacements.

    Slot 0 is ``X(t)``; slot k is ``X(t-k+1) - X(t-k)``.  The map is linear and
    invertible, so no information is lost, but the small per-step motions no
    longer ride on top of the much larger absolute coordinates.
    """
    H = np.asarray(histories, dtype=float)
    return np.concatenate([H[..., -1:, :, :], (H[..., 1:, :, :] - H[..., :-1, :, :])[..., ::-1, :, :]],
                          axis=-3)


def history_slots_vjp(g_slots) -> np.ndarray:
    """Adjoint of :func:`history_slots` for a single window ``(m+1, N, 2)``."""
    g = np.asarray(g_slots, dtype=float)
    m = len(g) - 1
    g_hist = np.zeros_like(g)
    g_hist[m] += g[0]
    for k in range(1, m + 1):
        g_hist[m - k + 1] += g[k]
        g_hist[m - k] -= g[k]
    return g_hist


def unpack_features(X, n_keypoints: int, window: int, n_robots: int = 2):
    X = np.asarray(X)
    n_hist = (window + 1) * n_keypoints * 2
    if X.shape[1] != n_hist + 3 * n_robots:
        raise ValueError(f"feature rows have {X.shape[1]} columns, expected "
                         f"{n_hist + 3 * n_robots} for N={n_keypoints}, m={window}, Q={n_robots}")
    H = X[:, :n_hist].reshape(-1, window + 1, n_keypoints, 2)
    R = X[:, n_hist:].reshape(-1, n_robots, 3)
    return H, R


def check_history(history, n_keypoints: int, window: int) -> np.ndarray:
    h = check_array(np.asarray(history, dtype=float).reshape(window + 1, -1),
                    ensure_min_samples=window + 1)
    if h.shape[1] != 2 * n_keypoints:
        raise ValueError(f"history has {h.shape[1] // 2} keypoints, model expects {n_keypoints}")
    return h.reshape(window + 1, n_keypoints, 2)


def check_control(control, n_robots: int = 2) -> np.ndarray:
    c = np.asarray(control, dtype=float)
    if c.size != 3 * n_robots:
        raise ValueError(f"control must hold {n_robots} x 3 values, got shape {c.shape}")
    c = check_array(c.reshape(1, -1)).reshape(n_robots, 3)
    return c


def load_transitions(paths, window: int):
    """Stack the transitions of several trajectory files into ``(X_rows, y_rows, episode_ids)``."""
    Xs, ys, ids = [], [], []
    for k, path in enumerate(paths):
        header, X, R = read_trajectory(path)
        H, C, V = transitions(X, R, window, header.get("dt", 1.0))
        Xs.append(pack_features(H, C))
        ys.append(V.reshape(len(V), -1))
        ids.append(np.full(len(V), k))
    if not Xs:
        raise ValueError("no trajectories given")
    return np.concatenate(Xs), np.concatenate(ys), np.concatenate(ids)


def trajectory_paths(directory) -> list:
    paths = sorted(Path(directory).glob("traj_*.jsonl"))
    if not paths:
        raise FileNotFoundError(f"no traj_*.jsonl files in {directory}")
    return paths

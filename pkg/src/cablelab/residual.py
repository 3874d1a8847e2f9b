"""Online linear residual ``dXdot = R J`` fitted by ridge regression over a short window."""
from __future__ import annotations

from collections import deque

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


class ResidualBuffer:
    """The last ``capacity`` pairs of flat control ``R (3Q,)`` and velocity error ``dXdot (2N,)``."""

    def __init__(self, capacity: int = 6):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._controls: deque = deque(maxlen=capacity)
        self._errors: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._controls)

    def push(self, control, error) -> None:
        self._controls.append(np.asarray(control, dtype=float).ravel().copy())
        self._errors.append(np.asarray(error, dtype=float).ravel().copy())

    def observe(self, control, X_now, X_next, predicted_velocity, dt: float = 1.0) -> np.ndarray:
        """Push the error between the observed and predicted velocity; returns it as ``(N, 2)``."""
        X_now = np.asarray(X_now, dtype=float)
        actual = (np.asarray(X_next, dtype=float) - X_now) / dt
        err = actual - np.asarray(predicted_velocity, dtype=float).reshape(X_now.shape)
        self.push(control, err)
        return err

    def arrays(self):
        """``(R, dXdot)`` stacked oldest first, shapes ``(K, 3Q)`` and ``(K, 2N)``."""
        if not self._controls:
            raise ValueError("buffer is empty")
        return np.stack(self._controls), np.stack(self._errors)

    def clear(self) -> None:
        self._controls.clear()
        self._errors.clear()

    def copy(self) -> "ResidualBuffer":
        new = ResidualBuffer(self.capacity)
        for r, e in zip(self._controls, self._errors):
            new.push(r, e)
        return new


def ridge(R, D, lam: float) -> np.ndarray:
    """Minimiser of ``||D - R J||_F^2 + lam ||J||_F^2``: ``(R^T R + lam I)^-1 R^T D``."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if not lam > 0:
        raise ValueError("lambda must be positive")
    A = R.T @ R + lam * np.eye(R.shape[1])
    return np.linalg.solve(A, R.T @ D)


def solve(buffer: ResidualBuffer, lam: float = 10.0) -> np.ndarray:
    R, D = buffer.arrays()
    return ridge(R, D, lam)


def ridge_objective(J, R, D, lam: float) -> float:
    r = D - R @ J
    return float(np.sum(r * r) + lam * np.sum(J * J))


def ridge_gradient(J, R, D, lam: float) -> np.ndarray:
    return 2.0 * (R.T @ (R @ J - D) + lam * J)


def predict_residual(J, control) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    r = np.asarray(control, dtype=float).ravel()
    if r.size != J.shape[0]:
        raise ValueError(f"control has {r.size} entries, J expects {J.shape[0]}")
    return (r @ J).reshape(-1, 2)


def hybrid_predict(history, control, model, J) -> np.ndarray:
    """Offline model prediction plus the residual ``R J``."""
    return model.predict_velocity(history, control) + predict_residual(J, control)


class ZeroDynamics:
    """Offline model that always predicts rest; with it the hybrid model is pure Jacobian servoing."""

    def __init__(self, n_keypoints: int = 13, window: int = 5, n_robots: int = 2):
        self.n_keypoints = n_keypoints
        self.window = window
        self.n_robots = n_robots

    def predict(self, X):
        return np.zeros((len(X), 2 * self.n_keypoints))

    def predict_velocity(self, history, control) -> np.ndarray:
        return np.zeros((self.n_keypoints, 2))

    def velocity_with_cache(self, history, control):
        return np.zeros((self.n_keypoints, 2)), None

    def velocity_vjp(self, cache, g_velocity):
        return (np.zeros((self.window + 1, self.n_keypoints, 2)), np.zeros((self.n_robots, 3)))


class ResidualRidge(RegressorMixin, BaseEstimator):
    """Ridge without intercept on flat controls; ``coef_`` is the residual Jacobian J."""

    def __init__(self, alpha: float = 10.0):
        self.alpha = alpha

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self.coef_ = ridge(X, y if y.ndim == 2 else y[:, None], self.alpha)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X) @ self.coef_

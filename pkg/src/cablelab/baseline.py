"""Flat MLP dynamics baseline: the whole history and control vector in, all keypoint velocities out."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import check_control, check_history, history_slots, history_slots_vjp, unpack_features
from .neural import Adam, ExponentialDecay, Mlp

logger = logging.getLogger(__name__)


class MlpDynamics(RegressorMixin, BaseEstimator):
    """Two hidden layers of 128 by default; inputs standardised, targets scaled.

    The history part of each row is recoded with :func:`cablelab.dataset.history_slots`,
    the same encoding the graph model sees, so the comparison is about architecture.
    """

    def __init__(self, n_keypoints: int = 13, window: int = 5, n_robots: int = 2,
                 hidden_width: int = 128, hidden_layers: int = 2, epochs: int = 10,
                 batch_size: int = 1, lr_start: float = 1e-4, lr_end: float = 1e-6,
                 dtype: str = "float64", random_state: int = 0, warm_start: bool = False,
                 verbose: int = 0):
        self.n_keypoints = n_keypoints
        self.window = window
        self.n_robots = n_robots
        self.hidden_width = hidden_width
        self.hidden_layers = hidden_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.dtype = dtype
        self.random_state = random_state
        self.warm_start = warm_start
        self.verbose = verbose

    def _encode(self, X):
        H, R = unpack_features(X, self.n_keypoints, self.window, self.n_robots)
        return np.concatenate([history_slots(H).reshape(len(X), -1), R.reshape(len(X), -1)], axis=1)

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        X = self._encode(X)
        rng = np.random.default_rng(self.random_state)
        if not (self.warm_start and hasattr(self, "net_")):
            self.x_mean_ = X.mean(axis=0)
            self.x_std_ = np.maximum(X.std(axis=0), 1e-8)
            self.target_scale_ = max(float(np.sqrt(np.mean(y * y))), 1e-8)
            widths = [X.shape[1]] + [self.hidden_width] * self.hidden_layers + [y.shape[1]]
            self.net_ = Mlp(widths, rng, self.dtype)
            self.loss_curve_ = []
        Xn = ((X - self.x_mean_) / self.x_std_).astype(self.dtype)
        yn = (y / self.target_scale_).astype(self.dtype)
        n = len(X)
        bs = max(1, int(self.batch_size))
        total = max(1, self.epochs * -(-n // bs))
        opt = Adam(self.net_.params(), lr=ExponentialDecay(self.lr_start, self.lr_end, total))
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            running = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                out, cache = self.net_.forward(Xn[idx], True)
                diff = out - yn[idx]
                running += float(np.sum(diff * diff))
                grads, _ = self.net_.backward(cache, (2.0 / diff.size) * diff)
                opt.step(grads)
            self.loss_curve_.append(running / yn.size)
            if self.verbose:
                logger.info("epoch %d loss %.3e", epoch + 1, self.loss_curve_[-1])
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = self._encode(check_array(X))
        out = self.net_((X - self.x_mean_) / self.x_std_)
        return out.astype(np.float64) * self.target_scale_

    def predict_velocity(self, history, control) -> np.ndarray:
        H = check_history(history, self.n_keypoints, self.window)
        R = check_control(control, self.n_robots)
        row = np.concatenate([H.ravel(), R.ravel()])[None]
        return self.predict(row).reshape(self.n_keypoints, 2)

    def velocity_with_cache(self, history, control):
        check_is_fitted(self, "net_")
        row = self._encode(np.concatenate([np.ravel(history), np.ravel(control)])[None])[0]
        out, cache = self.net_.forward(((row - self.x_mean_) / self.x_std_)[None], True)
        return out[0].astype(np.float64).reshape(-1, 2) * self.target_scale_, cache

    def velocity_vjp(self, cache, g_velocity):
        g = (np.ravel(g_velocity) * self.target_scale_)[None].astype(self.dtype)
        _, g_in = self.net_.backward(cache, g, param_grads=False)
        g_in = g_in[0].astype(np.float64) / self.x_std_
        n_hist = (self.window + 1) * self.n_keypoints * 2
        return (history_slots_vjp(g_in[:n_hist].reshape(self.window + 1, self.n_keypoints, 2)),
                g_in[n_hist:].reshape(self.n_robots, 3))

    def to_dict(self) -> dict:
        check_is_fitted(self, "net_")
        return {"kind": "mlp", "params": self.get_params(),
                "stats": {"x_mean": self.x_mean_.tolist(), "x_std": self.x_std_.tolist(),
                          "target_scale": self.target_scale_},
                "networks": {"net": self.net_.to_dict()},
                "loss_curve": list(self.loss_curve_)}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpDynamics":
        model = cls(**d["params"])
        model.x_mean_ = np.asarray(d["stats"]["x_mean"])
        model.x_std_ = np.asarray(d["stats"]["x_std"])
        model.target_scale_ = float(d["stats"]["target_scale"])
        model.net_ = Mlp.from_dict(d["networks"]["net"], model.dtype)
        model.loss_curve_ = list(d.get("loss_curve", []))
        model.n_features_in_ = len(model.x_mean_)
        return model

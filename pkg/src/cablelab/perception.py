"""Synthetic point clouds and keypoint estimation with a Gaussian mixture plus uniform outliers.

Each of the N keypoints is an isotropic Gaussian with a shared variance; a
uniform component of weight ``mu`` absorbs noise and outliers.  EM alternates
responsibilities and closed-form centroid/variance updates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

RESPONSIBILITY_FLOOR = 1e-12
SIGMA2_FLOOR = 1e-10


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GmmConfig:
    """EM settings.  ``sigma2_init=None`` uses (half the initial keypoint spacing) squared."""

    mu: float = 0.1
    sigma2_init: float | None = None
    max_iters: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"mu must be in [0, 1), got {self.mu}")
        if self.sigma2_init is not None and not self.sigma2_init > 0:
            raise ValueError("sigma2_init must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class EmResult:
    keypoints: np.ndarray
    sigma2: float
    iterations: int
    log_likelihoods: list = field(default_factory=list)
    converged: bool = False
    stale_components: list = field(default_factory=list)


def render_cloud(keypoints, pts_per_segment: int = 20, noise_sigma: float = 0.0,
                 outlier_ratio: float = 0.0, seed=None) -> np.ndarray:
    """Sample ``pts_per_segment`` points uniformly on each polyline segment.

    Gaussian noise is added, then ``round(outlier_ratio * S)`` randomly chosen
    points are replaced by uniform samples from the bounding box of the
    keypoints inflated by 20%.
    """
    X = np.asarray(keypoints, dtype=float)
    if pts_per_segment < 1:
        raise ValueError("pts_per_segment must be >= 1")
    if not 0.0 <= outlier_ratio <= 1.0:
        raise ValueError("outlier_ratio must be in [0, 1]")
    rng = np.random.default_rng(seed)
    a, b = X[:-1], X[1:]
    t = rng.random((len(a), pts_per_segment, 1))
    Y = (a[:, None] + t * (b - a)[:, None]).reshape(-1, 2)
    if noise_sigma > 0:
        Y = Y + rng.normal(0.0, noise_sigma, size=Y.shape)
    n_out = int(round(outlier_ratio * len(Y)))
    if n_out:
        lo, hi = X.min(axis=0), X.max(axis=0)
        centre, half = (lo + hi) / 2, np.maximum((hi - lo) / 2, 1e-3) * 1.2
        idx = rng.choice(len(Y), size=n_out, replace=False)
        Y[idx] = rng.uniform(centre - half, centre + half, size=(n_out, 2))
    return Y


def _log_terms(Y, X, sigma2, mu):
    """Per point and component log of the weighted densities, uniform column last."""
    S, N = len(Y), len(X)
    d2 = np.sum((Y[:, None, :] - X[None, :, :]) ** 2, axis=2)
    with np.errstate(divide="ignore"):
        log_w = math.log1p(-mu) - math.log(N) if mu < 1 else -np.inf
        gauss = log_w - math.log(2 * math.pi * sigma2) - d2 / (2 * sigma2)
        uni = np.full((S, 1), math.log(mu) - math.log(S) if mu > 0 else -np.inf)
    return np.concatenate([gauss, uni], axis=1), d2


def log_likelihood(cloud, X, sigma2: float, mu: float) -> float:
    Y = check_array(cloud)
    X = check_array(X)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if mu >= 1:
        return len(Y) * math.log(1.0 / len(Y))
    terms, _ = _log_terms(Y, X, sigma2, mu)
    return float(np.sum(logsumexp(terms, axis=1)))


def responsibilities(cloud, X, sigma2: float, mu: float) -> np.ndarray:
    """``(S, N+1)`` posterior over keypoints and the outlier component; rows sum to 1."""
    terms, _ = _log_terms(np.asarray(cloud, float), np.asarray(X, float), sigma2, mu)
    return np.exp(terms - logsumexp(terms, axis=1, keepdims=True))


def _default_sigma2(Y, X) -> float:
    # half the initial keypoint spacing keeps each component local to its own stretch of cable;
    # a single centroid has no spacing, so fall back to the cloud spread
    if len(X) > 1:
        spacing = float(np.mean(np.linalg.norm(np.diff(X, axis=0), axis=1)))
        if spacing > 0:
            return (spacing / 2) ** 2
    return float(np.sum((Y[:, None] - X[None]) ** 2) / (2 * len(Y) * len(X)))


def em_fit(cloud, X_init, config: GmmConfig = GmmConfig()) -> EmResult:
    Y = check_array(cloud)
    X = check_array(X_init).copy()
    S, N = len(Y), len(X)
    if S < N:
        raise EstimationError(f"cloud has {S} points, need at least {N}")
    sigma2 = config.sigma2_init
    if sigma2 is None:
        sigma2 = _default_sigma2(Y, X)
    sigma2 = max(sigma2, SIGMA2_FLOOR)
    ll = log_likelihood(Y, X, sigma2, config.mu)
    history = [ll]
    stale: set = set()
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        P = responsibilities(Y, X, sigma2, config.mu)[:, :N]
        mass = P.sum(axis=0)
        ok = mass >= RESPONSIBILITY_FLOOR
        stale.update(np.flatnonzero(~ok).tolist())
        X_new = X.copy()
        X_new[ok] = (P[:, ok].T @ Y) / mass[ok, None]
        d2 = np.sum((Y[:, None] - X_new[None]) ** 2, axis=2)
        total = mass.sum()
        sigma2_new = float(np.sum(P * d2) / (2 * total)) if total > 0 else sigma2
        sigma2_new = max(sigma2_new, SIGMA2_FLOOR)
        ll_new = log_likelihood(Y, X_new, sigma2_new, config.mu)
        # EM must not decrease the likelihood; allow only round-off
        assert ll_new >= ll - 1e-9 * max(1.0, abs(ll)), f"log-likelihood decreased at iteration {it}"
        X, sigma2 = X_new, sigma2_new
        history.append(ll_new)
        if abs(ll_new - ll) <= config.tol * max(abs(ll), 1e-300):
            converged = True
            break
        ll = ll_new
    return EmResult(X, sigma2, it, history, converged, sorted(stale))


class GmmKeypointEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(cloud, init)`` stores ``keypoints_``; ``track`` chains frames."""

    def __init__(self, n_keypoints: int = 13, mu: float = 0.1, sigma2_init: float | None = None,
                 max_iters: int = 50, tol: float = 1e-6):
        self.n_keypoints = n_keypoints
        self.mu = mu
        self.sigma2_init = sigma2_init
        self.max_iters = max_iters
        self.tol = tol

    def _config(self) -> GmmConfig:
        return GmmConfig(self.mu, self.sigma2_init, self.max_iters, self.tol)

    def fit(self, X, y=None, init=None):
        Y = check_array(X)
        if init is None:
            init = self.keypoints_ if hasattr(self, "keypoints_") else None
        if init is None:
            raise ValueError("an initial keypoint guess is required for the first frame")
        init = check_array(init)
        if len(init) != self.n_keypoints:
            raise ValueError(f"init has {len(init)} keypoints, expected {self.n_keypoints}")
        res = em_fit(Y, init, self._config())
        self.keypoints_ = res.keypoints
        self.sigma2_ = res.sigma2
        self.n_iter_ = res.iterations
        self.log_likelihoods_ = res.log_likelihoods
        return self

    def predict(self, X=None):
        check_is_fitted(self, "keypoints_")
        return self.keypoints_.copy()

    def track(self, clouds, init) -> np.ndarray:
        """Estimate every frame, seeding each with the previous estimate."""
        out = []
        current = np.asarray(init, dtype=float)
        for Y in clouds:
            self.fit(Y, init=current)
            current = self.keypoints_
            out.append(current.copy())
        return np.stack(out)


def straight_init(n_keypoints: int, left, right) -> np.ndarray:
    """Straight line between known grasp positions, the guess for the first frame."""
    s = np.linspace(0.0, 1.0, n_keypoints)[:, None]
    return (1 - s) * np.asarray(left, float) + s * np.asarray(right, float)


def write_cloud_jsonl(path, clouds) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for t, Y in enumerate(clouds):
            fh.write(json.dumps({"t": t, "Y": np.asarray(Y).tolist()}) + "\n")
    tmp.replace(path)


def read_cloud_jsonl(path) -> list:
    clouds = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if "Y" in rec:
                    clouds.append(np.asarray(rec["Y"], dtype=float).reshape(-1, 2))
    if not clouds:
        raise ValueError(f"no cloud frames in {path}")
    return clouds

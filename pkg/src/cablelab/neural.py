"""Small feed-forward networks with hand-written reverse mode and Adam.

Everything is batched over the leading axis.  Gradients are exact for the
affine+ReLU composition, which is all the dynamics models need.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """A non-finite gradient reached the optimizer."""

    def __init__(self, message: str, param_index: int):
        super().__init__(f"{message} (parameter {param_index})")
        self.param_index = param_index


def _dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Mlp:
    """Affine layers with ReLU between them and an identity output.

    ``widths`` lists every layer width including input and output, e.g.
    ``(15, 128, 128, 32)`` is two hidden layers of 128.  Weights are stored
    as ``(fan_in, fan_out)`` so a batch is ``x @ W + b``.
    """

    def __init__(self, widths, rng=None, dtype=np.float64, init: str = "he"):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        self._widths = widths
        self.dtype = _dtype(dtype)
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if init == "he":
                bound = math.sqrt(6.0 / fan_in)
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            elif init == "zeros":
                W = np.zeros((fan_in, fan_out))
            else:
                raise ValueError(f"unknown init {init!r}")
            self.weights.append(W.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def widths(self) -> tuple:
        return self._widths

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x, return_cache: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self._widths[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self._widths[0]}")
        acts = [x]
        h = x
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0)
            acts.append(h)
        out = h[0] if single else h
        if return_cache:
            return out, (acts, single)
        return out

    __call__ = forward

    def backward(self, cache, grad_out, param_grads: bool = True):
        """Reverse pass.  Returns ``(grads, grad_input)``; ``grads`` matches :meth:`params`."""
        acts, single = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"output gradient shape {g.shape} != {acts[-1].shape}")
        grads = [None] * (2 * self.n_layers)
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (acts[i + 1] > 0)
            if param_grads:
                grads[2 * i] = acts[i].T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        if single:
            g = g[0]
        return grads, g

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new._widths = self._widths
        new.dtype = self.dtype
        new.weights = [W.copy() for W in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def astype(self, dtype) -> "Mlp":
        new = self.copy()
        new.dtype = _dtype(dtype)
        new.weights = [W.astype(new.dtype) for W in new.weights]
        new.biases = [b.astype(new.dtype) for b in new.biases]
        return new

    def to_dict(self) -> dict:
        return {"widths": list(self._widths),
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict, dtype=np.float64) -> "Mlp":
        new = cls.__new__(cls)
        new._widths = tuple(d["widths"])
        new.dtype = _dtype(dtype)
        new.weights = [np.asarray(W, dtype=new.dtype).reshape(a, b)
                       for W, a, b in zip(d["weights"], new._widths[:-1], new._widths[1:])]
        new.biases = [np.asarray(b, dtype=new.dtype) for b in d["biases"]]
        return new


@dataclass
class ExponentialDecay:
    """Learning rate decaying geometrically from ``start`` to ``end`` over ``steps``."""

    start: float = 1e-4
    end: float = 1e-6
    steps: int = 100_000

    def __call__(self, t: int) -> float:
        if self.steps <= 0:
            return self.end
        frac = min(t / self.steps, 1.0)
        return self.start * (self.end / self.start) ** frac


class Adam:
    """Adam with bias correction over a flat list of parameter arrays (updated in place)."""

    def __init__(self, params, lr=1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.schedule = lr if callable(lr) else (lambda t, _lr=float(lr): _lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule(self.t)

    def step(self, grads) -> list:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient", i)
        lr = self.schedule(self.t)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
        return self.params


def adam_step(optimizer: Adam, params, grads):
    """Functional spelling of :meth:`Adam.step` for callers holding their own parameter list."""
    if any(p is not q for p, q in zip(params, optimizer.params)):
        raise ValueError("params are not the arrays this optimizer was built for")
    return optimizer.step(grads)

"""Graph network dynamics model: encode, k rounds of message passing, decode.

Vertices are keypoints.  A vertex carries its last m+1 positions (newest
first) and a control slot holding the gripper velocity for the two grasped
end vertices and zeros elsewhere.  Directed edges connect keypoints closer
than the connective radius and carry ``[dx, dy, |d|]`` of ``x_i - x_j``.

Message passing uses shared vertex/edge networks with additive skips::

    e_ij <- e_ij + f_e(e_ij, v_i, v_j)
    v_i  <- v_i  + f_v(v_i, sum_j e_ij)

applied in that order, so the vertex update aggregates the freshly updated
edges and information travels one graph hop per round.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import (check_control, check_history, history_slots, history_slots_vjp, pack_features,
                      unpack_features)
from .neural import Adam, ExponentialDecay, Mlp

logger = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (rollout step {step_index})")
        self.step_index = step_index


@dataclass
class GraphSnapshot:
    """One cable graph.  ``edges[k] = (i, j)`` with feature ``x_i - x_j`` and its norm."""

    vertex_features: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_features)


@dataclass
class GraphBatch:
    """Several graphs stacked block-diagonally with sparse scatter operators."""

    vertex_features: np.ndarray
    receivers: np.ndarray
    senders: np.ndarray
    edge_features: np.ndarray
    n_graphs: int
    n_vertices: int
    gather_recv: sp.csr_matrix
    gather_send: sp.csr_matrix
    scatter_recv: sp.csr_matrix

    @classmethod
    def from_arrays(cls, vertex_features, receivers, senders, edge_features, n_graphs, n_vertices,
                    dtype=np.float64):
        nv = n_graphs * n_vertices
        ne = len(receivers)
        ones = np.ones(ne, dtype=dtype)
        cols = np.arange(ne)
        A_recv = sp.csr_matrix((ones, (receivers, cols)), shape=(nv, ne))
        A_send = sp.csr_matrix((ones, (senders, cols)), shape=(nv, ne))
        return cls(vertex_features, receivers, senders, edge_features, n_graphs, n_vertices,
                   gather_recv=A_recv, gather_send=A_send, scatter_recv=A_recv)


def vertex_features(histories, controls) -> np.ndarray:
    """``(B, N, 2(m+1)+3)`` features from chronological histories ``(B, m+1, N, 2)``.

    Per vertex: current position, then the m most recent displacements (newest first,
    see :func:`cablelab.dataset.history_slots`), then the control slot.
    """
    H = np.asarray(histories, dtype=float)
    R = np.asarray(controls, dtype=float)
    B, m1, N, _ = H.shape
    slots = history_slots(H)
    pos = slots.transpose(0, 2, 1, 3).reshape(B, N, 2 * m1)
    ctrl = np.zeros((B, N, 3))
    ctrl[:, 0] = R[:, 0]
    ctrl[:, -1] = R[:, -1]
    return np.concatenate([pos, ctrl], axis=2)


def radius_edges(positions, radius: float):
    """Directed edges within ``radius`` for a batch of point sets ``(B, N, 2)``.

    Returns ``(b, i, j, features)`` sorted by graph, then receiver, then sender.
    """
    P = np.asarray(positions, dtype=float)
    diff = P[:, :, None, :] - P[:, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    N = P.shape[1]
    mask = (dist <= radius) & ~np.eye(N, dtype=bool)[None]
    b, i, j = np.nonzero(mask)
    feats = np.concatenate([diff[b, i, j], dist[b, i, j, None]], axis=1)
    return b, i, j, feats


def build_graph(history, control, radius: float = 0.2) -> GraphSnapshot:
    """Graph of one history window ``(m+1, N, 2)`` and control ``(Q, 3)``."""
    H = np.asarray(history, dtype=float)
    if H.ndim != 3 or H.shape[2] != 2:
        raise ValueError(f"history must be (m+1, N, 2), got {H.shape}")
    n = {len(x) for x in H}
    if len(n) != 1:
        raise ValueError("inconsistent keypoint count across history")
    control = np.asarray(control, dtype=float).reshape(-1, 3)
    V = vertex_features(H[None], control[None])[0]
    _, i, j, feats = radius_edges(H[None, -1], radius)
    return GraphSnapshot(V, np.column_stack([i, j]), feats)


def batch_graphs(histories, controls, radius: float, dtype=np.float64) -> GraphBatch:
    H = np.asarray(histories, dtype=float)
    B, _, N, _ = H.shape
    V = vertex_features(H, controls).reshape(B * N, -1)
    b, i, j, feats = radius_edges(H[:, -1], radius)
    return GraphBatch.from_arrays(V, b * N + i, b * N + j, feats, B, N, dtype)


class GnnDynamics(RegressorMixin, BaseEstimator):
    """Learned keypoint velocity model ``Xdot = f(X(t-m:t), R(t))``.

    ``fit`` takes flat feature rows (see :mod:`cablelab.dataset`) and target
    velocities.  Vertex and edge autoencoders are trained first; their
    encoders and the hidden layers of the vertex decoder then seed the
    dynamics network, which is trained end to end on one-step velocity MSE.
    With ``warm_start=True`` a fitted model keeps its normalisation and
    continues training on new data (fine-tuning).
    """

    def __init__(self, n_keypoints: int = 13, window: int = 5, n_robots: int = 2,
                 radius: float = 0.2, latent_dim: int = 32, hidden_width: int = 128,
                 hidden_layers: int = 2, message_passing: int = 10, epochs: int = 10,
                 ae_epochs: int = 10, batch_size: int = 1, lr_start: float = 1e-4,
                 lr_end: float = 1e-6, noise_std: float = 0.0, dtype: str = "float64",
                 init_scale: float = 0.01, random_state: int = 0, warm_start: bool = False,
                 verbose: int = 0):
        self.n_keypoints = n_keypoints
        self.window = window
        self.n_robots = n_robots
        self.radius = radius
        self.latent_dim = latent_dim
        self.hidden_width = hidden_width
        self.hidden_layers = hidden_layers
        self.message_passing = message_passing
        self.epochs = epochs
        self.ae_epochs = ae_epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.noise_std = noise_std
        self.dtype = dtype
        self.init_scale = init_scale
        self.random_state = random_state
        self.warm_start = warm_start
        self.verbose = verbose

    # -- construction -------------------------------------------------------------

    @property
    def vertex_dim(self) -> int:
        return 2 * (self.window + 1) + 3

    def _hidden(self) -> list:
        return [self.hidden_width] * self.hidden_layers

    def _init_networks(self, rng):
        L, dt = self.latent_dim, self.dtype
        h = self._hidden()
        self.vertex_encoder_ = Mlp([self.vertex_dim, *h, L], rng, dt)
        self.edge_encoder_ = Mlp([3, *h, L], rng, dt)
        self.vertex_decoder_ = Mlp([L, *h, self.vertex_dim], rng, dt)
        self.edge_decoder_ = Mlp([L, *h, 3], rng, dt)
        self.edge_net_ = Mlp([3 * L, *h, L], rng, dt)
        self.vertex_net_ = Mlp([2 * L, *h, L], rng, dt)
        self.output_net_ = Mlp([L, *h, 2], rng, dt)
        for net in (self.edge_net_, self.vertex_net_, self.output_net_):
            self._shrink_last_layer(net, self.init_scale)

    @staticmethod
    def _shrink_last_layer(net: Mlp, factor: float):
        # residual branches start near identity and the decoder near zero velocity
        net.weights[-1] *= factor

    def _compute_stats(self, H, R, V):
        B = len(H)
        feats = vertex_features(H, R).reshape(B * self.n_keypoints, -1)
        self.vertex_mean_ = feats.mean(axis=0)
        self.vertex_std_ = np.maximum(feats.std(axis=0), 1e-8)
        _, _, _, ef = radius_edges(H[:, -1], self.radius)
        if len(ef) == 0:
            raise ValueError("no edges in the training data; connective radius too small")
        self.edge_mean_ = ef.mean(axis=0)
        self.edge_std_ = np.maximum(ef.std(axis=0), 1e-8)
        # velocity targets are scaled but not shifted, so a zero output means "at rest"
        self.target_scale_ = max(float(np.sqrt(np.mean(V * V))), 1e-8)

    def networks(self) -> dict:
        return {"vertex_encoder": self.vertex_encoder_, "edge_encoder": self.edge_encoder_,
                "vertex_decoder": self.vertex_decoder_, "edge_decoder": self.edge_decoder_,
                "edge_net": self.edge_net_, "vertex_net": self.vertex_net_,
                "output_net": self.output_net_}

    def _dynamics_nets(self) -> list:
        return [self.vertex_encoder_, self.edge_encoder_, self.edge_net_, self.vertex_net_,
                self.output_net_]

    # -- autoencoders -------------------------------------------------------------

    def train_autoencoders(self, H, R, epochs: int | None = None, rng=None) -> dict:
        """Fit vertex and edge autoencoders on normalised features; returns final MSEs."""
        rng = np.random.default_rng(self.random_state if rng is None else rng)
        epochs = self.ae_epochs if epochs is None else epochs
        B = len(H)
        vf = (vertex_features(H, R).reshape(B * self.n_keypoints, -1) - self.vertex_mean_) / self.vertex_std_
        _, _, _, ef = radius_edges(H[:, -1], self.radius)
        ef = (ef - self.edge_mean_) / self.edge_std_
        out = {}
        for name, data, enc, dec in (("vertex", vf, self.vertex_encoder_, self.vertex_decoder_),
                                     ("edge", ef, self.edge_encoder_, self.edge_decoder_)):
            out[name] = train_autoencoder(enc, dec, data.astype(self.dtype), epochs, rng,
                                          lr=ExponentialDecay(1e-3, 1e-5, 1))
        # the dynamics decoder inherits the hidden layers of the vertex decoder
        for k in range(self.hidden_layers):
            self.output_net_.weights[k] = self.vertex_decoder_.weights[k].copy()
            self.output_net_.biases[k] = self.vertex_decoder_.biases[k].copy()
        self.autoencoder_losses_ = out
        return out

    def reconstruction_error(self, H, R) -> dict:
        B = len(H)
        vf = (vertex_features(H, R).reshape(B * self.n_keypoints, -1) - self.vertex_mean_) / self.vertex_std_
        _, _, _, ef = radius_edges(H[:, -1], self.radius)
        ef = (ef - self.edge_mean_) / self.edge_std_
        rv = self.vertex_decoder_(self.vertex_encoder_(vf))
        re = self.edge_decoder_(self.edge_encoder_(ef))
        return {"vertex": float(np.mean((rv - vf) ** 2)), "edge": float(np.mean((re - ef) ** 2))}

    # -- forward / backward ----------------------------------------------------------

    def encode(self, gb: GraphBatch, cache: bool = False):
        vin = ((gb.vertex_features - self.vertex_mean_) / self.vertex_std_).astype(self.dtype)
        ein = ((gb.edge_features - self.edge_mean_) / self.edge_std_).astype(self.dtype)
        v, cv = self.vertex_encoder_.forward(vin, True)
        e, ce = self.edge_encoder_.forward(ein, True)
        return (v, e, (cv, ce)) if cache else (v, e)

    def process(self, v, e, gb: GraphBatch, steps: int | None = None, caches: list | None = None):
        """Apply ``steps`` message-passing rounds to latent vertices ``v`` and edges ``e``."""
        steps = self.message_passing if steps is None else steps
        for _ in range(steps):
            ein = np.concatenate([e, v[gb.receivers], v[gb.senders]], axis=1)
            de, cek = self.edge_net_.forward(ein, True)
            e = e + de
            agg = gb.scatter_recv @ e
            dv, cvk = self.vertex_net_.forward(np.concatenate([v, agg], axis=1), True)
            v = v + dv
            if caches is not None:
                caches.append((cvk, cek))
        return v, e

    def _forward(self, gb: GraphBatch):
        v, e, enc_cache = self.encode(gb, cache=True)
        caches = []
        v, _ = self.process(v, e, gb, caches=caches)
        out, cd = self.output_net_.forward(v, True)
        return out, (enc_cache, caches, cd)

    def _backward(self, gb: GraphBatch, cache, g_out, param_grads: bool = True):
        (cv, ce), caches, cd = cache
        L = self.latent_dim
        g_dec, g_v = self.output_net_.backward(cd, g_out, param_grads)
        g_e = np.zeros((len(gb.receivers), L), dtype=g_v.dtype)
        g_fv = None
        g_fe = None
        for cvk, cek in reversed(caches):
            gw_v, g_vin = self.vertex_net_.backward(cvk, g_v, param_grads)
            g_v = g_v + g_vin[:, :L]
            g_e = g_e + gb.scatter_recv.T @ g_vin[:, L:]
            gw_e, g_ein = self.edge_net_.backward(cek, g_e, param_grads)
            g_e = g_e + g_ein[:, :L]
            g_v = g_v + gb.gather_recv @ g_ein[:, L:2 * L] + gb.gather_send @ g_ein[:, 2 * L:]
            if param_grads:
                g_fe = gw_e if g_fe is None else [a + b for a, b in zip(g_fe, gw_e)]
                g_fv = gw_v if g_fv is None else [a + b for a, b in zip(g_fv, gw_v)]
        g_encv, g_vin0 = self.vertex_encoder_.backward(cv, g_v, param_grads)
        g_ence, g_ein0 = self.edge_encoder_.backward(ce, g_e, param_grads)
        grads = None
        if param_grads:
            grads = g_encv + g_ence + g_fe + g_fv + g_dec
        return grads, g_vin0, g_ein0

    def _params(self) -> list:
        out = []
        for net in self._dynamics_nets():
            out.extend(net.params())
        return out

    # -- estimator API ------------------------------------------------------------

    def _split(self, X):
        return unpack_features(X, self.n_keypoints, self.window, self.n_robots)

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if y.shape[1] != 2 * self.n_keypoints:
            raise ValueError(f"targets must have {2 * self.n_keypoints} columns, got {y.shape[1]}")
        if self.message_passing < 1:
            raise ValueError("message_passing must be >= 1")
        H, R = self._split(X)
        V = y.reshape(-1, self.n_keypoints, 2)
        rng = np.random.default_rng(self.random_state)
        fresh = not (self.warm_start and hasattr(self, "vertex_encoder_"))
        if fresh:
            self._compute_stats(H, R, V)
            self._init_networks(rng)
            self.train_autoencoders(H, R, rng=rng)
            self.loss_curve_ = []
        self._train_dynamics(H, R, V, rng)
        self.n_features_in_ = X.shape[1]
        return self

    def _train_dynamics(self, H, R, V, rng):
        n = len(H)
        bs = max(1, int(self.batch_size))
        steps_per_epoch = -(-n // bs)
        total = max(1, steps_per_epoch * self.epochs)
        opt = Adam(self._params(), lr=ExponentialDecay(self.lr_start, self.lr_end, total))
        target = (V / self.target_scale_).astype(self.dtype)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            running = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                Hb = H[idx]
                tb = target[idx]
                if self.noise_std > 0:
                    noise = rng.normal(0.0, self.noise_std, size=Hb.shape)
                    Hb = Hb + noise
                    # aim at the true next state from the corrupted current one
                    tb = tb - (noise[:, -1] / self.target_scale_).astype(self.dtype)
                gb = batch_graphs(Hb, R[idx], self.radius, self.dtype)
                out, cache = self._forward(gb)
                diff = out - tb.reshape(-1, 2)
                running += float(np.sum(diff * diff))
                g = (2.0 / diff.size) * diff
                grads, _, _ = self._backward(gb, cache, g)
                opt.step(grads)
            epoch_loss = running / (n * self.n_keypoints * 2)
            self.loss_curve_.append(epoch_loss)
            if self.verbose:
                logger.info("epoch %d loss %.3e lr %.2e", epoch + 1, epoch_loss, opt.lr)

    def predict(self, X):
        check_is_fitted(self, "vertex_encoder_")
        X = check_array(X)
        H, R = self._split(X)
        out = []
        for start in range(0, len(H), 512):
            gb = batch_graphs(H[start:start + 512], R[start:start + 512], self.radius, self.dtype)
            o, _ = self._forward(gb)
            out.append(o.reshape(-1, 2 * self.n_keypoints))
        return np.concatenate(out).astype(np.float64) * self.target_scale_

    # -- single-sample interface used by the controller ------------------------------

    def predict_velocity(self, history, control) -> np.ndarray:
        check_is_fitted(self, "vertex_encoder_")
        H = check_history(history, self.n_keypoints, self.window)
        R = check_control(control, self.n_robots)
        gb = batch_graphs(H[None], R[None], self.radius, self.dtype)
        out, _ = self._forward(gb)
        return out.astype(np.float64) * self.target_scale_

    def velocity_with_cache(self, history, control):
        check_is_fitted(self, "vertex_encoder_")
        H = np.asarray(history, dtype=float)
        R = np.asarray(control, dtype=float).reshape(self.n_robots, 3)
        gb = batch_graphs(H[None], R[None], self.radius, self.dtype)
        out, cache = self._forward(gb)
        return out.astype(np.float64) * self.target_scale_, (gb, cache, H)

    def velocity_vjp(self, cache, g_velocity):
        """Pull ``dL/dXdot`` back to ``(dL/dhistory, dL/dcontrol)``."""
        gb, fcache, H = cache
        g = (np.asarray(g_velocity, dtype=float).reshape(-1, 2) * self.target_scale_).astype(self.dtype)
        _, g_vn, g_en = self._backward(gb, fcache, g, param_grads=False)
        g_vf = g_vn.astype(np.float64) / self.vertex_std_
        g_ef = g_en.astype(np.float64) / self.edge_std_
        m1 = self.window + 1
        N = self.n_keypoints
        g_hist = history_slots_vjp(g_vf[:, :2 * m1].reshape(N, m1, 2).transpose(1, 0, 2))
        g_ctrl = np.stack([g_vf[0, 2 * m1:], g_vf[-1, 2 * m1:]])
        if len(gb.receivers):
            feats = gb.edge_features
            d = np.maximum(feats[:, 2:3], 1e-12)
            g_delta = g_ef[:, :2] + g_ef[:, 2:3] * feats[:, :2] / d
            gx = np.zeros((N, 2))
            np.add.at(gx, gb.receivers, g_delta)
            np.add.at(gx, gb.senders, -g_delta)
            g_hist[-1] += gx
        return g_hist, g_ctrl

    # -- persistence ----------------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "vertex_encoder_")
        return {
            "kind": "gnn",
            "params": self.get_params(),
            "stats": {"vertex_mean": self.vertex_mean_.tolist(), "vertex_std": self.vertex_std_.tolist(),
                      "edge_mean": self.edge_mean_.tolist(), "edge_std": self.edge_std_.tolist(),
                      "target_scale": self.target_scale_},
            "networks": {k: net.to_dict() for k, net in self.networks().items()},
            "loss_curve": list(self.loss_curve_),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GnnDynamics":
        model = cls(**d["params"])
        s = d["stats"]
        model.vertex_mean_ = np.asarray(s["vertex_mean"])
        model.vertex_std_ = np.asarray(s["vertex_std"])
        model.edge_mean_ = np.asarray(s["edge_mean"])
        model.edge_std_ = np.asarray(s["edge_std"])
        model.target_scale_ = float(s["target_scale"])
        for k, net in d["networks"].items():
            setattr(model, k + "_", Mlp.from_dict(net, model.dtype))
        model.loss_curve_ = list(d.get("loss_curve", []))
        model.n_features_in_ = (model.window + 1) * model.n_keypoints * 2 + 3 * model.n_robots
        return model


def train_autoencoder(encoder: Mlp, decoder: Mlp, data: np.ndarray, epochs: int, rng,
                      batch_size: int = 256, lr=None) -> float:
    """Minimise ``||x - decoder(encoder(x))||^2``; returns the final full-data MSE."""
    n = len(data)
    steps = max(1, epochs * -(-n // batch_size))
    if lr is None or isinstance(lr, ExponentialDecay):
        start, end = (1e-3, 1e-5) if lr is None else (lr.start, lr.end)
        lr = ExponentialDecay(start, end, steps)
    opt = Adam(encoder.params() + decoder.params(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            x = data[order[start:start + batch_size]]
            z, cz = encoder.forward(x, True)
            r, cr = decoder.forward(z, True)
            g = (2.0 / r.size) * (r - x)
            gd, gz = decoder.backward(cr, g)
            ge, _ = encoder.backward(cz, gz)
            opt.step(ge + gd)
    recon = decoder(encoder(data))
    return float(np.mean((recon - data) ** 2))


def rollout_model(model, history, controls, dt: float = 1.0, limit: float = 10.0) -> np.ndarray:
    """Autoregressive prediction ``X(t+1) = X(t) + Xdot dt`` for every control.

    ``history`` is ``(m+1, N, 2)`` or a batch ``(B, m+1, N, 2)``; ``controls``
    is ``(steps, Q, 3)`` or ``(B, steps, Q, 3)``.  Returns the predicted
    states after each step with the matching leading shape.
    """
    H = np.asarray(history, dtype=float)
    C = np.asarray(controls, dtype=float)
    single = H.ndim == 3
    if single:
        H, C = H[None], C[None]
    steps = C.shape[1]
    if steps < 1:
        raise ValueError("steps must be >= 1")
    H = H.copy()
    out = np.empty((H.shape[0], steps) + H.shape[2:])
    for t in range(steps):
        vel = model.predict(pack_features(H, C[:, t])).reshape(H.shape[0], -1, 2)
        nxt = H[:, -1] + vel * dt
        if not np.all(np.isfinite(nxt)) or np.abs(nxt).max() > limit:
            raise RolloutError("prediction diverged", t)
        out[:, t] = nxt
        H = np.concatenate([H[:, 1:], nxt[:, None]], axis=1)
    return out[0] if single else out

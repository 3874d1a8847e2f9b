import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cablelab import sim
from cablelab.dataset import histories_from_states, history_slots_vjp, pack_features
from cablelab.gnn import (GnnDynamics, GraphBatch, RolloutError, batch_graphs, build_graph,
                          radius_edges, rollout_model, vertex_features)

TINY = dict(latent_dim=8, hidden_width=16, message_passing=2, epochs=2, ae_epochs=2,
            batch_size=16, lr_start=1e-3, lr_end=1e-4)


@pytest.fixture(scope="module")
def straight():
    return sim.make_cable(sim.CableParams()).keypoints


@pytest.fixture(scope="module")
def tiny_model(small_data):
    X, y = small_data
    return GnnDynamics(**TINY).fit(X, y)


def test_straight_graph_degrees(straight):
    g = build_graph(np.repeat(straight[None], 6, axis=0), np.zeros((2, 3)), 0.2)
    deg = np.bincount(g.edges[:, 0], minlength=13)
    # 2 * 0.0833 <= 0.2 < 3 * 0.0833: two neighbours on each side where they exist
    np.testing.assert_array_equal(deg, [2, 3, 4, 4, 4, 4, 4, 4, 4, 4, 4, 3, 2])
    assert g.vertex_features.shape == (13, 15)
    assert not np.any(g.vertex_features[:, 12:])


def test_small_radius_no_edges(straight):
    g = build_graph(np.repeat(straight[None], 6, axis=0), np.zeros((2, 3)), 0.05)
    assert len(g.edges) == 0 and g.edge_features.shape == (0, 3)


def test_control_on_grasped_vertices_only(straight):
    R = np.array([[0.01, 0.02, 0.03], [-0.01, -0.02, -0.03]])
    V = build_graph(np.repeat(straight[None], 6, axis=0), R, 0.2).vertex_features
    np.testing.assert_array_equal(V[0, 12:], R[0])
    np.testing.assert_array_equal(V[-1, 12:], R[1])
    assert not np.any(V[1:-1, 12:])


def test_vertex_features_position_then_newest_displacements():
    H = np.random.default_rng(6).normal(size=(6, 13, 2))
    V = build_graph(H, np.zeros((2, 3)), 0.2).vertex_features
    np.testing.assert_array_equal(V[4, :2], H[-1, 4])
    np.testing.assert_array_equal(V[4, 2:4], H[-1, 4] - H[-2, 4])
    np.testing.assert_array_equal(V[4, 10:12], H[1, 4] - H[0, 4])
    # the recoding is invertible: summing displacements back recovers the oldest frame
    np.testing.assert_allclose(V[4, :2] - V[4, 2:12].reshape(5, 2).sum(axis=0), H[0, 4])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_history_slots_vjp_is_adjoint(seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(6, 13, 2))
    G = rng.normal(size=(6, 13, 2))
    slots = vertex_features(H[None], np.zeros((1, 2, 3)))[0, :, :12].reshape(13, 6, 2).transpose(1, 0, 2)
    assert np.sum(G * slots) == pytest.approx(np.sum(history_slots_vjp(G) * H), rel=1e-12)


def test_edge_features(straight):
    g = build_graph(np.repeat(straight[None], 6, axis=0), np.zeros((2, 3)), 0.2)
    i, j = g.edges.T
    np.testing.assert_allclose(g.edge_features[:, :2], straight[i] - straight[j])
    np.testing.assert_allclose(g.edge_features[:, 2], np.linalg.norm(straight[i] - straight[j], axis=1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.6))
def test_edges_symmetric(seed, radius):
    P = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(1, 13, 2))
    _, i, j, _ = radius_edges(P, radius)
    assert set(zip(i.tolist(), j.tolist())) == set(zip(j.tolist(), i.tolist()))
    assert np.all(i != j)


def test_inconsistent_history_rejected(straight):
    with pytest.raises(ValueError):
        build_graph([straight, straight[:-1]], np.zeros((2, 3)))


def test_process_without_edges_sees_zero_aggregate(tiny_model):
    m = tiny_model
    rng = np.random.default_rng(0)
    gb = GraphBatch.from_arrays(np.zeros((13, 15)), np.zeros(0, int), np.zeros(0, int),
                                np.zeros((0, 3)), 1, 13)
    v = rng.normal(size=(13, 8))
    out, _ = m.process(v, np.zeros((0, 8)), gb, steps=1)
    expected = v + m.vertex_net_(np.concatenate([v, np.zeros((13, 8))], axis=1))
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_process_permutation_equivariant(tiny_model, straight):
    m = tiny_model
    rng = np.random.default_rng(1)
    H = np.repeat(straight[None], 6, axis=0) + rng.normal(0, 0.01, (6, 13, 2))
    gb = batch_graphs(H[None], np.zeros((1, 2, 3)), 0.2)
    v = rng.normal(size=(13, 8))
    e = rng.normal(size=(len(gb.receivers), 8))
    perm = rng.permutation(13)
    inv = np.argsort(perm)
    # vertex k of the permuted graph is vertex perm[k] of the original
    gp = GraphBatch.from_arrays(gb.vertex_features[perm], inv[gb.receivers], inv[gb.senders],
                                gb.edge_features, 1, 13)
    v1, _ = m.process(v, e, gb, steps=3)
    v2, _ = m.process(v[perm], e, gp, steps=3)
    np.testing.assert_allclose(v2, v1[perm], atol=1e-12)


@pytest.mark.parametrize("k", [1, 2])
def test_receptive_field_locality(tiny_model, straight, k):
    m = tiny_model
    rng = np.random.default_rng(2)
    gb = batch_graphs(np.repeat(straight[None, None], 6, axis=1), np.zeros((1, 2, 3)), 0.09)
    v = rng.normal(size=(13, 8))
    e = rng.normal(size=(len(gb.receivers), 8))
    base, _ = m.process(v, e, gb, steps=k)
    v_pert = v.copy()
    v_pert[0] += 1.0
    out, _ = m.process(v_pert, e, gb, steps=k)
    changed = np.flatnonzero(np.any(out != base, axis=1))
    assert changed.max() == k  # vertices beyond graph distance k are untouched
    np.testing.assert_array_equal(out[k + 1:], base[k + 1:])


def test_zero_decoder_predicts_rest(small_data):
    X, y = small_data
    m = GnnDynamics(**TINY).fit(X[:32], y[:32])
    m.output_net_.weights[-1][...] = 0
    m.output_net_.biases[-1][...] = 0
    assert not np.any(m.predict(X[:5]))


def test_outputs_finite_on_random_inputs(tiny_model):
    X = np.random.default_rng(3).normal(0, 1, size=(20, 6 * 13 * 2 + 6))
    assert np.all(np.isfinite(tiny_model.predict(X)))


def test_training_improves_and_is_deterministic(small_data):
    X, y = small_data
    m0 = GnnDynamics(**{**TINY, "epochs": 0}).fit(X, y)
    m5 = GnnDynamics(**{**TINY, "epochs": 5}).fit(X, y)
    mse = lambda m: float(np.mean((m.predict(X) - y) ** 2))
    assert mse(m5) < mse(m0)
    assert len(m5.loss_curve_) == 5
    again = GnnDynamics(**{**TINY, "epochs": 5}).fit(X, y)
    for a, b in zip(m5._params(), again._params()):
        assert a.tobytes() == b.tobytes()


def test_shuffled_labels_plateau(small_data):
    X, y = small_data
    ys = y[np.random.default_rng(4).permutation(len(y))]
    kw = {**TINY, "epochs": 20, "lr_start": 3e-3, "lr_end": 3e-4}
    shuffled = GnnDynamics(**kw).fit(X, ys).loss_curve_[-1]
    real = GnnDynamics(**kw).fit(X, y).loss_curve_[-1]
    # losses are in units of the target second moment, so pure noise stays near 1
    assert shuffled > 0.8
    assert real < 0.6 * shuffled


def test_autoencoder_training_beats_random(small_data):
    X, y = small_data
    m = GnnDynamics(**{**TINY, "ae_epochs": 0, "epochs": 0}).fit(X, y)
    H, R = m._split(X)
    before = m.reconstruction_error(H, R)
    after = m.train_autoencoders(H, R, epochs=20)
    assert after["vertex"] < before["vertex"] and after["edge"] < before["edge"]
    np.testing.assert_array_equal(m.output_net_.weights[0], m.vertex_decoder_.weights[0])


def test_velocity_vjp_matches_finite_differences(tiny_model, small_data):
    m = tiny_model
    X, _ = small_data
    H, R = m._split(X[10:11])
    H, R = H[0].copy(), R[0].copy()
    w = np.random.default_rng(5).normal(size=(13, 2))
    _, cache = m.velocity_with_cache(H, R)
    gH, gR = m.velocity_vjp(cache, w)
    f = lambda H_, R_: float(np.sum(w * m.predict_velocity(H_, R_)))
    h = 1e-6
    for idx in [(5, 0, 0), (5, 6, 1), (3, 12, 0), (0, 4, 1)]:
        Hp, Hm = H.copy(), H.copy()
        Hp[idx] += h
        Hm[idx] -= h
        assert gH[idx] == pytest.approx((f(Hp, R) - f(Hm, R)) / (2 * h), rel=1e-5, abs=1e-9)
    for idx in [(0, 0), (1, 2)]:
        Rp, Rm = R.copy(), R.copy()
        Rp[idx] += h
        Rm[idx] -= h
        assert gR[idx] == pytest.approx((f(H, Rp) - f(H, Rm)) / (2 * h), rel=1e-5, abs=1e-9)


def test_rollout_one_step_is_euler(tiny_model, small_data):
    X, _ = small_data
    H, R = tiny_model._split(X[:3])
    out = rollout_model(tiny_model, H, R[:, None])
    vel = tiny_model.predict(X[:3]).reshape(3, 13, 2)
    np.testing.assert_allclose(out[:, 0], H[:, -1] + vel)
    single = rollout_model(tiny_model, H[0], R[:1])
    np.testing.assert_allclose(single[0], out[0, 0])


class Exploding:
    def predict(self, X):
        return np.full((len(X), 26), 4.0)


def test_rollout_divergence_reports_step(straight):
    H = np.repeat(straight[None], 6, axis=0)
    with pytest.raises(RolloutError) as info:
        rollout_model(Exploding(), H, np.zeros((5, 2, 3)))
    assert info.value.step_index == 2
    with pytest.raises(ValueError):
        rollout_model(Exploding(), H, np.zeros((0, 2, 3)))


def test_dict_roundtrip(tiny_model, small_data):
    X, _ = small_data
    back = GnnDynamics.from_dict(tiny_model.to_dict())
    assert back.predict(X[:4]).tobytes() == tiny_model.predict(X[:4]).tobytes()


def test_unfitted_model_refuses():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        GnnDynamics().predict(np.zeros((1, 162)))


def test_history_bootstrap_replicates_initial_state(straight):
    H = histories_from_states(straight[None], 5)
    assert H.shape == (1, 6, 13, 2)
    assert np.all(H[0] == straight)
    assert pack_features(H, np.zeros((1, 2, 3))).shape == (1, 162)

import pytest
from hypothesis import given, settings, strategies as st

from cablelab import config
from cablelab.config import ConfigError, RunConfig


def test_reference_defaults():
    cfg = RunConfig()
    assert (cfg.cable.length, cfg.cable.diameter) == (1.0, 0.01)
    assert (cfg.cable.elastic_stiffness, cfg.cable.damping_stiffness, cfg.cable.bending_stiffness) == \
        (4e3, 2e3, 3e3)
    assert cfg.cable.global_scale == 2
    assert (cfg.gnn.window, cfg.gnn.message_passing, cfg.gnn.radius) == (5, 10, 0.2)
    assert (cfg.gnn.hidden_layers, cfg.gnn.hidden_width) == (2, 128)
    assert (cfg.train.batch_size, cfg.train.lr_start, cfg.train.lr_end) == (1, 1e-4, 1e-6)
    m = cfg.mpc
    assert (m.horizon, m.dt, m.eps_init, m.ridge_lambda) == (5, 1.0, 0.05, 10.0)
    assert (m.eta_plus, m.eta_minus, m.tau_plus, m.tau_minus) == (0.8, 0.4, 1.05, 0.95)


def test_roundtrip_default():
    text = config.dumps(RunConfig())
    assert config.loads(text) == RunConfig()
    assert config.dumps(config.loads(text)) == text


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.floats(1e-6, 1.0, allow_nan=False), st.booleans(),
       st.lists(st.sampled_from(["U", "S", "Z", "random"]), min_size=1, max_size=4))
def test_roundtrip_modified(n, lr, domrand, scenarios):
    cfg = RunConfig().with_overrides({"data.n_trajectories": n, "train.lr_start": lr,
                                      "data.domain_randomization": domrand,
                                      "bench.scenarios": tuple(scenarios)})
    again = config.loads(config.dumps(cfg))
    assert again == cfg


def test_parse_comments_and_types():
    cfg = config.loads("# desk run\nmpc.horizon = 3  # shorter\nbench.scales = 1, 2.5\n"
                       "data.domain_randomization = yes\ntrain.dtype = float32\n")
    assert cfg.mpc.horizon == 3
    assert cfg.bench.scales == (1, 2.5)
    assert cfg.data.domain_randomization is True
    assert cfg.train.dtype == "float32"


@pytest.mark.parametrize("text", ["mpc.nope = 1", "nope.horizon = 1", "horizon = 1",
                                  "mpc.horizon 5", "mpc.horizon = five",
                                  "mpc.horizon = 1\nmpc.horizon = 2"])
def test_rejects_bad_config(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_file_io(tmp_path):
    path = tmp_path / "run.cfg"
    cfg = RunConfig().with_overrides({"run.seed": "7"})
    config.save(cfg, path)
    assert config.load(path) == cfg
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.cfg")


def test_paper_scale_and_helpers():
    cfg = config.paper_scale(RunConfig())
    assert cfg.data.n_trajectories == 10000
    assert config.cable_params(cfg).elastic_stiffness == 4e3
    assert config.mpc_config(cfg).eps_init == 0.05

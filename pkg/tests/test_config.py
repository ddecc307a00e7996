import pytest

from deepgp.config import ConfigError, RunConfig


def test_defaults_filled_per_experiment():
    cfg = RunConfig.from_dict({"experiment": "digits"})
    assert cfg["model"]["layer_dims"] == [10, 8, 6, 4, 2]
    assert cfg["optimizer"]["restarts"] == 3
    assert cfg.depth_of_model() == 5
    assert RunConfig.from_dict({"experiment": "toy-regression"}).depth_of_model() == 2


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"experiment": "toy-hierarchy", "bogus": 1}, "bogus"),
        ({"experiment": "toy-hierarchy", "optimizer": {"maxiter": 3}}, "optimizer.maxiter"),
        ({"experiment": "nope"}, "experiment"),
        ({"experiment": "toy-hierarchy", "version": 2}, "version"),
        ({"experiment": "custom"}, "data.path"),
        ({"experiment": "toy-hierarchy", "model": {"layer_dims": [0]}}, "layer_dims"),
        ({"experiment": "toy-hierarchy", "optimizer": {"max_iterations": 10, "frozen_iterations": 20}}, "frozen"),
        ({"experiment": "toy-hierarchy", "optimizer": {"tolerance": 0}}, "tolerance"),
        ({"experiment": "toy-hierarchy", "threads": 0}, "threads"),
        ({"experiment": "toy-hierarchy", "model": "x"}, "mapping"),
    ],
)
def test_invalid_configs_rejected(raw, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(raw)


def test_load_yaml_and_override(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("experiment: toy-hierarchy\nseed: 4\noptimizer:\n  restarts: 2\n")
    cfg = RunConfig.load(p)
    assert cfg["seed"] == 4 and cfg["optimizer"]["restarts"] == 2
    cfg2 = cfg.override(seed=9, optimizer__restarts=None)
    assert cfg2["seed"] == 9 and cfg2["optimizer"]["restarts"] == 2
    assert cfg["seed"] == 4


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("experiment: [unclosed\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p)

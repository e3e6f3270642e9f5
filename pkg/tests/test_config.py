import numpy as np
import pytest

from jumpbsde.config import (ConfigError, coefficients_from_config, config_from_dict, parse_config,
                             partition_from_config, solver_config)


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.numerics.N == 20 and cfg.numerics.zeta == 1 and cfg.numerics.epsilon == 0.05
    assert cfg.training.epochs == 200 and cfg.training.minibatch == 512
    assert solver_config(cfg).lr == pytest.approx(3e-3)
    assert config_from_dict(None).fingerprint() == cfg.fingerprint()


def test_zeta_violation_names_field():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"numerics": {"zeta": 2}})
    assert any(v.startswith("numerics.zeta") for v in info.value.violations)


def test_all_violations_collected():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"numerics": {"zeta": 2, "N": 0}, "bogus": 1})
    locs = " ".join(info.value.violations)
    assert "numerics.zeta" in locs and "numerics.N" in locs and "bogus" in locs


def test_unknown_nested_key_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"training": {"epoch": 3}})


def test_non_mapping_rejected():
    with pytest.raises(ConfigError):
        config_from_dict([1, 2])


def test_epsilon_above_rmax_warns_and_switches_to_finite_activity():
    with pytest.warns(UserWarning, match="R_max"):
        cfg = config_from_dict({"numerics": {"epsilon": 2.0}})
    assert cfg.numerics.finite_activity
    part = partition_from_config(cfg)
    assert part.n_cells == 0


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.yaml")


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("numerics: {N: [1, 2\n")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(p)


def test_fingerprint_tracks_content():
    a = config_from_dict({"seed": 1})
    b = config_from_dict({"seed": 2})
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint() == config_from_dict({"seed": 1}).fingerprint()


@pytest.mark.parametrize("name", ["martingale", "manufactured", "rates"])
def test_shipped_configs_parse(name):
    cfg = parse_config(f"configs/{name}.yaml")
    coeffs, u_star = coefficients_from_config(cfg)
    assert coeffs.q == 1
    assert (u_star is not None) == (name == "manufactured")


def test_manufactured_config_consistent():
    cfg = parse_config("configs/manufactured.yaml")
    coeffs, u_star = coefficients_from_config(cfg)
    x = np.linspace(-1, 2, 7)[:, None]
    # terminal condition is u*(T, .)
    assert np.allclose(coeffs.g(x), u_star.u(cfg.numerics.T, x), atol=1e-14)
    assert u_star.value(0.0, np.array([[1.0]]))[0] == pytest.approx(np.sin(1.0))

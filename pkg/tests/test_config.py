import pytest
import yaml

from socpath import config as cfgmod
from socpath.exceptions import ConfigurationError


def test_defaults_fill_and_snapshot_roundtrip():
    cfg = cfgmod.resolve({"model": {"kind": "free", "beta": 2.0}}, "sample")
    assert cfg["grid"]["K"] == 256 and cfg["estimator"]["kind"] == "propagator"
    assert "training" not in cfg
    again = cfgmod.resolve(yaml.safe_load(cfgmod.dump(cfg)), "sample")
    assert again == cfg


@pytest.mark.parametrize(
    "raw,field",
    [
        ({"model": {"kind": "free", "beta": 1.0, "betta": 2}}, "model.betta"),
        ({"model": {"kind": "free", "beta": 1.0}, "modle": {}}, "modle"),
        ({"model": {"kind": "free"}}, "model.beta"),
        ({"model": {"beta": 1.0}}, "model.kind"),
        ({"model": "free"}, "model"),
    ],
)
def test_strict_errors_name_the_field(raw, field):
    with pytest.raises(ConfigurationError) as err:
        cfgmod.resolve(raw, "sample")
    assert err.value.field == field


def test_unknown_key_in_unused_block_is_still_an_error():
    raw = {"model": {"kind": "free", "beta": 1.0}, "training": {"epoch": 3}}
    with pytest.raises(ConfigurationError):
        cfgmod.resolve(raw, "sample")


def test_extrapolate_requires_targets():
    with pytest.raises(ConfigurationError) as err:
        cfgmod.resolve({"model": {"kind": "rotor", "beta": 1.0}}, "extrapolate")
    assert err.value.field == "extrapolate.N_eval"


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        cfgmod.load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a\n- b\n")
    with pytest.raises(ConfigurationError):
        cfgmod.load_config(bad)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert cfgmod.load_config(empty) == {}

import pytest

from manetlab.config import (FIELDS, RESOLVED_NAME, ConfigError, RunConfig, env_overrides, format_value,
                             parse_lines, parse_value, read_config_file, resolve)


def test_every_section_key_present():
    for key in ("caption_len", "num_centers", "epochs", "lr_rest", "alpha3", "lambda2", "data_seed"):
        assert key in FIELDS


@pytest.mark.parametrize("key,text,value", [
    ("epochs", " 12 ", 12),
    ("lr_rest", "1e-3", 0.001),
    ("caf", "off", False),
    ("rgl", "True", True),
    ("decay_epochs", "30, 50", (30, 50)),
    ("backbone_widths", "(16,32,64)", (16, 32, 64)),
    ("assignment", "inner_product", "inner_product"),
])
def test_parse_value(key, text, value):
    assert parse_value(key, text) == value


def test_format_parse_round_trip():
    for key, value in RunConfig().flat().items():
        assert parse_value(key, format_value(value)) == value


def test_parse_errors():
    with pytest.raises(ConfigError):
        parse_value("epochs", "ten")
    with pytest.raises(ConfigError):
        parse_value("caf", "maybe")
    with pytest.raises(ConfigError, match="unknown"):
        parse_value("no_such_key", "1")
    with pytest.raises(ConfigError, match="line:2"):
        parse_lines(["epochs = 3", "garbage"], "line")


def test_comments_and_blank_lines():
    assert parse_lines(["# header", "", "epochs = 3  # short run", "  seed=4"]) == {"epochs": 3, "seed": 4}


def test_dumps_round_trips_through_file(tmp_path):
    cfg = RunConfig().updated({"epochs": 7, "caf": False, "decay_epochs": (20, 30)})
    path = cfg.write(tmp_path)
    assert path.name == RESOLVED_NAME
    assert RunConfig().updated(read_config_file(path)) == cfg
    lines = path.read_text().splitlines()
    assert lines == sorted(lines) and "epochs = 7" in lines and "caf = false" in lines


def test_layer_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("epochs = 3\nseed = 1\nnum_centers = 4\n")
    env = {"MANETLAB_SEED": "2", "MANETLAB_NUM_CENTERS": "5", "OTHER_SEED": "9"}
    cfg = resolve(cfg_file, ["num_centers=8"], environ=env)
    assert cfg.train.epochs == 3
    assert cfg.train.seed == 2
    assert cfg.model.num_centers == 8
    assert resolve(environ={}) == RunConfig()


def test_unknown_keys_and_invalid_combinations_rejected(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig().updated({"epoch": 3})
    with pytest.raises(ConfigError):
        env_overrides({"MANETLAB_BOGUS": "1"})
    with pytest.raises(ConfigError):
        resolve(overrides=["warmup_epochs=40"], environ={})

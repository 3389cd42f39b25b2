"""Config parsing: typed defaults, coercion, presets, digests."""

import pytest

from mmctl.config import DEFAULTS, FAST_OVERRIDES, Config, load_config, parse_config_text
from mmctl.errors import ConfigError


def test_defaults_complete():
    cfg = Config()
    for key, val in DEFAULTS.items():
        assert cfg[key] == val


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        Config({"data.bogus": 1})
    with pytest.raises(ConfigError, match="unknown config key"):
        Config()["no.such.key"]


def test_parse_basic_and_comments():
    cfg = parse_config_text(
        """
        # a comment
        data.frames = 6   # trailing comment
        train.peak_lr = 2e-3

        model.layers = 4
        """
    )
    assert cfg["data.frames"] == 6
    assert cfg["train.peak_lr"] == pytest.approx(2e-3)
    assert cfg["model.layers"] == 4
    # untouched keys keep their defaults
    assert cfg["data.k"] == DEFAULTS["data.k"]


def test_parse_rejects_malformed_line():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("data.frames 6")


def test_parse_rejects_unknown_key_with_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("data.frames = 6\nnot.a.key = 1")


def test_int_coercion_accepts_hex_rejects_garbage():
    assert parse_config_text("train.steps = 0x10")["train.steps"] == 16
    with pytest.raises(ConfigError, match="train.steps"):
        parse_config_text("train.steps = ten")


def test_float_coercion():
    assert parse_config_text("data.kappa = 1.25")["data.kappa"] == pytest.approx(1.25)
    with pytest.raises(ConfigError):
        parse_config_text("data.kappa = fast")


@pytest.mark.parametrize("raw,expected", [("true", True), ("off", False), ("1", True), ("no", False)])
def test_bool_coercion(raw, expected):
    assert parse_config_text(f"train.mixed_res = {raw}")["train.mixed_res"] is expected


def test_bool_coercion_rejects_garbage():
    with pytest.raises(ConfigError, match="boolean"):
        parse_config_text("train.mixed_res = maybe")


def test_preset_applies_before_overrides():
    cfg = parse_config_text("preset = fast\ndata.frames = 10")
    assert cfg["data.frames"] == 10  # explicit key wins
    assert cfg["data.frame_px"] == FAST_OVERRIDES["data.frame_px"]
    assert cfg["train.steps"] == FAST_OVERRIDES["train.steps"]


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError, match="preset"):
        parse_config_text("preset = turbo")
    with pytest.raises(ConfigError, match="preset"):
        load_config(None, preset="turbo")


def test_load_config_paths(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("model.d_model = 64\n")
    assert load_config(p)["model.d_model"] == 64
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.cfg")


def test_load_config_presets():
    assert load_config(None)["data.frame_px"] == DEFAULTS["data.frame_px"]
    assert load_config(None, preset="fast")["data.frame_px"] == FAST_OVERRIDES["data.frame_px"]


def test_resolved_text_sorted_and_digest_stable():
    a = parse_config_text("data.frames = 6\nmodel.layers = 4")
    b = parse_config_text("model.layers = 4\ndata.frames = 6")
    lines = a.resolved_text().splitlines()
    assert lines == sorted(lines)
    assert a.digest() == b.digest()
    assert a.digest() != Config().digest()


def test_typed_config_objects():
    cfg = load_config(None, preset="fast")
    dcfg = cfg.data_config()
    assert dcfg.frame_px == cfg["data.frame_px"]
    assert dcfg.kappa == pytest.approx(cfg["data.kappa"])
    mcfg = cfg.model_config()
    assert mcfg.d_model == cfg["model.d_model"]
    assert mcfg.frames == cfg["data.frames"]
    assert mcfg.audio_dim == cfg["data.samples_per_frame"]

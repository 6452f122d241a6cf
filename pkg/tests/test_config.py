import pytest

from dualcue.config import RunConfig, load_config, parse_overrides
from dualcue.errors import ConfigurationError


def test_defaults():
    cfg = load_config()
    assert cfg.model.embed_dim == 64 and cfg.model.depth == 2
    assert cfg.train.epochs == 5 and cfg.train.batch_size == 32 and cfg.train.lr == 5e-4
    assert cfg.loss.lambda0 == 0.01 and cfg.loss.stop_gradient == "main"


def test_roundtrip(tmp_path):
    cfg = load_config(overrides=["train.epochs=3", "loss.dec_enabled=false", "synth.seed=9", "output.dir=x/y"])
    cfg.write(tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back == cfg
    assert back.train.epochs == 3 and back.loss.dec_enabled is False


def test_file_then_overrides(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nepochs = 4\nlr = 0.001\n")
    cfg = load_config(tmp_path / "c.ini", ["train.epochs=2"])
    assert cfg.train.epochs == 2 and cfg.train.lr == 0.001


@pytest.mark.parametrize(
    "overrides",
    [["train.epoch=3"], ["optim.lr=1"], ["train.epochs=three"], ["loss.dec_enabled=maybe"], ["loss.lambda0=1.5"], ["noequals"], ["nodot=1"]],
)
def test_rejected(overrides):
    with pytest.raises(ConfigurationError):
        load_config(overrides=overrides)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "none.ini")


def test_parse_overrides():
    assert parse_overrides(["a.b=1", "a.c= x=y"]) == {"a": {"b": "1", "c": " x=y"}}


def test_ini_lists_every_section():
    text = RunConfig().to_ini()
    for section in ("model", "train", "loss", "synth", "data", "output"):
        assert f"[{section}]" in text

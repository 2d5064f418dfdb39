import pytest

from densityflow.config import ConfigError, RunConfig, format_config, load_config, parse_config
from densityflow.runs import build_dataset


def test_defaults_match_reference_run():
    cfg = RunConfig()
    assert (cfg.H, cfg.W, cfg.objects, cfg.epochs, cfg.lr, cfg.weight_decay) == (64, 64, (5, 40), 30, 1e-4, 5e-4)
    fold = build_dataset(cfg).folds[cfg.fold]
    assert (len(fold.train), len(fold.test)) == (20, 9)


def test_parse_types():
    cfg = parse_config("# comment\nepochs = 3\naugment=false\nobjects=2,9\ncontrast=0.15  # trailing\nfusion=fixed\n")
    assert cfg.epochs == 3 and cfg.augment is False and cfg.objects == (2, 9)
    assert cfg.contrast == 0.15 and cfg.fusion == "fixed"


def test_round_trip():
    cfg = RunConfig(epochs=7, blob_radius=(1.5, 2.25), depth_enhanced=False, out="x/y")
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize(
    "text, match",
    [
        ("colour=red\n", "unknown"),
        ("epochs\n", "key=value"),
        ("epochs=many\n", "bad value"),
        ("augment=maybe\n", "bad value"),
        ("fusion=max\n", "fusion"),
        ("H=60\n", "multiples"),
        ("fold=3\n", "fold"),
        ("objects=9,2\n", "objects"),
    ],
)
def test_rejects(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_overrides_reject_unknown():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig().with_overrides(speed=3)


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")

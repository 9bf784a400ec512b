"""
Tests for run configuration: defaults, layering and validation.
"""

import os

import pytest

from app.config import RunConfig, load_run_config
from app.errors import ConfigError


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("SALSTRUCT_"):
            monkeypatch.delenv(key)


def test_defaults_follow_training_schedule():
    config = load_run_config()
    assert config.seed == 7
    assert config.epochs == 20
    assert config.lr == 0.01 and config.lr_after_drop == 0.001 and config.lr_drop_epoch == 10
    assert config.batch_size == 8
    assert config.widths == (8, 16, 32)
    assert config.resolution == 64
    assert config.architecture == "dual"


def test_file_then_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs=3\nwidths=4,8\nresolution=16\narchitecture=single\n")
    config = load_run_config(str(path), {"epochs": 5, "seed": None})
    assert config.epochs == 5
    assert config.seed == 7
    assert config.widths == (4, 8)
    assert config.resolution == 16
    assert config.architecture == "single"


def test_environment_is_lowest_layer(tmp_path, monkeypatch):
    monkeypatch.setenv("SALSTRUCT_SEED", "11")
    monkeypatch.setenv("SALSTRUCT_EPOCHS", "9")
    monkeypatch.setenv("SALSTRUCT_AUGMENT", "false")
    path = tmp_path / "run.cfg"
    path.write_text("epochs=2\n")
    config = load_run_config(str(path))
    assert config.seed == 11
    assert config.epochs == 2
    assert config.augment is False


def test_dashed_keys_are_accepted(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("fov-fallback=full-frame\nbatch-size=4\n")
    config = load_run_config(str(path))
    assert config.fov_fallback == "full-frame"
    assert config.batch_size == 4


def test_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("momentum=0.9\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.cfg"))


@pytest.mark.parametrize(
    "overrides",
    [
        {"resolution": 60},
        {"epochs": 0},
        {"architecture": "triple"},
        {"fov_fallback": "crop"},
        {"detect_resolution": 32},
        {"val_fraction": 1.0},
        {"workers": 0},
        {"trials": 0},
    ],
)
def test_invalid_values(overrides):
    with pytest.raises(ConfigError):
        load_run_config(overrides=overrides)


def test_resolution_must_fit_block_count():
    assert RunConfig(widths=(4,), resolution=6).resolution == 6
    with pytest.raises(ValueError):
        RunConfig(widths=(4, 8, 16), resolution=36)

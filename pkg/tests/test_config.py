from __future__ import annotations

from pathlib import Path

import pytest

from kgball.config import load_config_file, resolve_config
from kgball.domain import ConfigError, TrainingConfig


def _toml(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "config.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults() -> None:
    assert resolve_config() == TrainingConfig()
    config = TrainingConfig()
    assert config.alpha == config.lr
    assert config.adaptive and config.uses_kg


def test_file_then_overrides(tmp_path: Path) -> None:
    path = _toml(tmp_path, "dim = 8\nlr = 0.01\nspace = 'euclidean'\nepochs = 3\n")
    config = resolve_config(path, {"epochs": 7, "seed": None})
    assert config.dim == 8
    assert config.lr == 0.01
    assert config.space == "euclidean"
    assert config.epochs == 7
    assert config.seed == TrainingConfig().seed


def test_integers_are_accepted_for_floats(tmp_path: Path) -> None:
    values = load_config_file(_toml(tmp_path, "lr = 1\nbeta = 0\n"))
    assert values == {"lr": 1.0, "beta": 0.0}
    assert isinstance(values["lr"], float)


@pytest.mark.parametrize(
    ("text", "match"),
    [
        ("learning_rate = 0.1\n", "unknown key"),
        ("dim = 'big'\n", "wrong type"),
        ("dim = true\n", "wrong type"),
        ("exclude_validation = 1\n", "wrong type"),
        ("dim = 4.5\n", "wrong type"),
        ("[train]\ndim = 4\n", "scalar"),
        ("betas = [0.1, 0.2]\n", "unknown key"),
        ("dim = \n", "config.toml"),
        ("lr = -1.0\n", "lr must be > 0"),
        ("space = 'spherical'\n", "space must be one of"),
    ],
)
def test_bad_config_files(tmp_path: Path, text: str, match: str) -> None:
    with pytest.raises(ConfigError, match=match):
        resolve_config(_toml(tmp_path, text))


def test_bad_override() -> None:
    with pytest.raises(ConfigError, match="override"):
        resolve_config(overrides={"dim": "8"})


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        resolve_config(tmp_path / "missing.toml")


def test_fixed_zero_beta_does_not_use_the_kg() -> None:
    config = TrainingConfig(regularization="fixed", beta=0.0, proxy_lr=0.0)
    assert not config.adaptive and not config.uses_kg
    assert config.alpha == 0.0
    assert TrainingConfig(regularization="fixed", beta=0.2).uses_kg

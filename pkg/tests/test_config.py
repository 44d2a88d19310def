import json
from pathlib import Path

import pytest

from src.mitoclass.config import (
    SEED_ENV_VAR,
    ArchConfig,
    AugPolicy,
    RunConfig,
    SearchSpace,
    TrainConfig,
    deep_merge,
    desk_profile,
    load_config_file,
    resolve,
    seed_from_env,
    to_json,
    validated,
)
from src.mitoclass.errors import InvalidConfig


def test_desk_defaults():
    cfg = desk_profile()
    assert cfg.train.lr0 == 1e-4
    assert cfg.train.focal.alpha == 0.25 and cfg.train.focal.gamma == 2.0
    assert cfg.train.patience == 20 and cfg.train.max_epochs == 50
    assert cfg.arch.input_channels == 3
    assert cfg.k == 5


def test_file_overrides_defaults_and_flags_override_file(tmp_path: Path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"lr0": 5e-4, "seed": 3}, "k": 4}))
    from_file = resolve(path)
    assert from_file.train.lr0 == 5e-4
    assert from_file.train.seed == 3
    assert from_file.train.batch_size == 8
    assert from_file.k == 4

    flagged = resolve(path, {"train": {"seed": 9}})
    assert flagged.train.seed == 9
    assert flagged.train.lr0 == 5e-4


def test_input_mode_override_rederives_channels():
    cfg = resolve(overrides={"arch": {"input_mode": "rgb_hed"}})
    assert cfg.arch.input_channels == 6


def test_input_channels_are_not_dumped():
    assert "input_channels" not in ArchConfig().model_dump()
    assert "input_channels" not in json.loads(to_json(desk_profile()))["arch"]


def test_channel_mode_mismatch():
    with pytest.raises(InvalidConfig, match="input_channels"):
        validated(ArchConfig, {"input_mode": "rgb", "input_channels": 6})
    assert validated(ArchConfig, {"input_mode": "crop_rgb_hed"}).input_channels == 6


def test_validated_wraps_errors():
    with pytest.raises(InvalidConfig, match="TrainConfig"):
        validated(TrainConfig, {"batch_size": 0})
    with pytest.raises(InvalidConfig):
        validated(RunConfig, {"unknown": 1})
    with pytest.raises(InvalidConfig):
        validated(AugPolicy, {"normalize_std": (0.2, 0.0, 0.2)})


def test_lr_must_exceed_floor():
    with pytest.raises(InvalidConfig, match="eta_min"):
        validated(TrainConfig, {"lr0": 1e-5, "eta_min": 1e-5})
    with pytest.raises(InvalidConfig):
        resolve(overrides={"train": {"lr0": 0.0}})


def test_search_space_checks():
    with pytest.raises(InvalidConfig, match="alpha"):
        validated(SearchSpace, {"alpha": (0.9, 0.1)})
    with pytest.raises(InvalidConfig, match="lr"):
        validated(SearchSpace, {"lr": (0.0, 1e-3)})


def test_validated_accepts_instances():
    config = TrainConfig(lr0=2e-4)
    assert validated(TrainConfig, config) == config


def test_deep_merge_keeps_siblings():
    base = {"a": {"x": 1, "y": 2}, "b": 3}
    assert deep_merge(base, {"a": {"y": 5}}) == {"a": {"x": 1, "y": 5}, "b": 3}
    assert base == {"a": {"x": 1, "y": 2}, "b": 3}


def test_seed_from_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    assert seed_from_env() is None
    monkeypatch.setenv(SEED_ENV_VAR, "42")
    assert seed_from_env() == 42
    monkeypatch.setenv(SEED_ENV_VAR, "-1")
    with pytest.raises(InvalidConfig):
        seed_from_env()
    monkeypatch.setenv(SEED_ENV_VAR, "forty")
    with pytest.raises(InvalidConfig):
        seed_from_env()


def test_load_config_file_errors(tmp_path: Path):
    with pytest.raises(InvalidConfig, match="not found"):
        load_config_file(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(InvalidConfig, match="JSON"):
        load_config_file(broken)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(InvalidConfig, match="object"):
        load_config_file(listed)


def test_to_json_roundtrip():
    cfg = resolve(overrides={"arch": {"hardness_head_mode": "four_class"}, "split_seed": 7})
    assert validated(RunConfig, json.loads(to_json(cfg))) == cfg

import pytest

from src.config import (
    CACHE_DIR_ENV,
    CHECKPOINT_DIR_ENV,
    EncoderBackendSpec,
    GeneratorSpec,
    RunConfig,
    load_run_config,
    merge_overrides,
    require_paths,
)
from src.errors import ConfigError


def test_defaults():
    config = load_run_config()
    assert config.selector.d == config.encoder.d == 768
    assert config.optim.lr == 3e-5
    assert config.optim.warmup_ratio == 0.1
    assert config.decode.top_p == 0.95
    assert (config.decode.k, config.decode.n_q) == (3, 5)


def test_yaml_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "selector:\n  lambda: 0.5\n  d: 64\nencoder:\n  model_id: hashing\n  d: 64\n"
        "optim:\n  epochs: 7\n",
        encoding="utf-8",
    )
    config = load_run_config(path, {"optim": {"epochs": 2, "lr": None}})
    assert config.selector.lambda_ == 0.5
    assert config.optim.epochs == 2
    assert config.optim.lr == 3e-5
    assert config.encoder.trainable is False
    assert config.to_dict()["selector"]["lambda"] == 0.5


def test_environment_directories(monkeypatch, tmp_path):
    monkeypatch.setenv(CACHE_DIR_ENV, str(tmp_path / "cache"))
    monkeypatch.setenv(CHECKPOINT_DIR_ENV, str(tmp_path / "ckpt"))
    config = load_run_config(overrides={"paths": {"checkpoint": "explicit"}})
    assert config.encoder.cache_dir == str(tmp_path / "cache")
    assert config.paths.checkpoint == "explicit"


@pytest.mark.parametrize(
    "overrides",
    [
        {"selector": {"d": 64}},
        {"selector": {"temperature": 0}},
        {"decode": {"top_p": 1.5}},
        {"optim": {"arrangement": "reverse"}},
        {"selector": {"unknown": 1}},
        {"selector": {"d": 30, "n_heads": 4}, "encoder": {"d": 30}},
    ],
)
def test_invalid_values_raise_config_error(overrides):
    with pytest.raises(ConfigError):
        load_run_config(overrides=overrides)


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_hash_tracks_content():
    a = RunConfig()
    assert a.hash() == RunConfig().hash()
    assert a.hash() != load_run_config(overrides={"seed": 1}).hash()


def test_merge_overrides_skips_none():
    merged = merge_overrides({"a": {"b": 1, "c": 2}}, {"a": {"b": None, "c": 3}, "d": None})
    assert merged == {"a": {"b": 1, "c": 3}}


def test_require_paths(tmp_path):
    require_paths(data=str(tmp_path))
    with pytest.raises(ConfigError, match="data"):
        require_paths(data=str(tmp_path / "missing"))
    with pytest.raises(ConfigError):
        require_paths(checkpoint=None)


def test_backend_specs():
    assert EncoderBackendSpec(model_id="hashing").is_hashing
    with pytest.raises(ValueError):
        GeneratorSpec(backend="seq2seq-finetuned")

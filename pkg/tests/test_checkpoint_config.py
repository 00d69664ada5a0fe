import json

import numpy as np
import pytest

from flexdepth import checkpoint, runconfig


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.standard_normal((3, 4)),
               "b": rng.standard_normal(7),
               "scalar": np.float64(3.25)}
    extras = {"step": 12, "note": "x"}
    checkpoint.save(tmp_path / "ck", tensors, extras)
    back, extras2 = checkpoint.load(tmp_path / "ck")
    assert extras2 == extras
    for name, arr in tensors.items():
        assert back[name].shape == np.asarray(arr).shape
        assert back[name].tobytes() == np.asarray(arr).tobytes()


def test_checkpoint_blob_is_little_endian_rowmajor(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    checkpoint.save(tmp_path / "ck", {"x": arr})
    blob = (tmp_path / "ck" / "params.bin").read_bytes()
    assert np.frombuffer(blob, dtype="<f8").tolist() == list(range(6))
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["tensors"][0] == {"name": "x", "shape": [2, 3],
                                      "offset": 0}


def test_checkpoint_offsets(tmp_path):
    checkpoint.save(tmp_path / "ck",
                    {"a": np.zeros(2), "b": np.ones((2, 2))})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    offsets = {e["name"]: e["offset"] for e in manifest["tensors"]}
    assert offsets == {"a": 0, "b": 16}


def test_config_defaults_and_types():
    cfg = runconfig.default_config()
    assert cfg["pipeline.subnet_layers"] == (32, 16, 8)
    assert cfg["pipeline.total_steps"] == 6000
    assert cfg["pipeline.step1_fraction"] == 0.6
    assert cfg["pipeline.layer_dropout"] == 0.3
    assert cfg["pipeline.iterations"] == 32
    assert cfg["pipeline.lr_peak"] == 4e-4


def test_config_parse_and_overrides():
    cfg = runconfig.parse_config_text(
        "pipeline.total_steps = 100  # comment\n"
        "\n"
        "pipeline.subnet_layers = 8,4\n"
        "pipeline.method = zero_out\n")
    assert cfg["pipeline.total_steps"] == 100
    assert cfg["pipeline.subnet_layers"] == (8, 4)
    assert cfg["pipeline.method"] == "zero_out"
    runconfig.apply_overrides(cfg, ["run.seed=3", "data.noise_sigma=0.5"])
    assert cfg["run.seed"] == 3
    assert cfg["data.noise_sigma"] == 0.5


def test_unknown_key_rejected_by_name():
    with pytest.raises(runconfig.ConfigError, match="pipeline.typo"):
        runconfig.parse_config_text("pipeline.typo = 3\n")
    with pytest.raises(runconfig.ConfigError, match="nope"):
        runconfig.apply_overrides(runconfig.default_config(), ["nope=1"])


def test_bad_value_rejected():
    with pytest.raises(runconfig.ConfigError):
        runconfig.parse_config_text("pipeline.total_steps = many\n")


def test_config_hash_stable_and_sensitive():
    cfg = runconfig.default_config()
    h1 = runconfig.config_hash(cfg)
    assert h1 == runconfig.config_hash(dict(sorted(cfg.items(), reverse=True)))
    cfg2 = dict(cfg)
    cfg2["run.seed"] = 1
    assert runconfig.config_hash(cfg2) != h1


def test_config_builds_objects():
    cfg = runconfig.default_config()
    runconfig.validate(cfg)
    ecfg = runconfig.encoder_config(cfg)
    assert ecfg.num_layers == 32
    assert ecfg.input_dim == cfg["data.feature_dim"]
    tcfg = runconfig.train_config(cfg)
    assert tcfg.subnet_layers == (32, 16, 8)
    dcfg = runconfig.data_config(cfg)
    assert dcfg.vocab_size == 13


def test_separate_layers_must_be_block_multiple():
    cfg = runconfig.default_config()
    cfg["run.mode"] = "separate"
    cfg["run.separate_layers"] = 9
    with pytest.raises(runconfig.ConfigError):
        runconfig.validate(cfg)

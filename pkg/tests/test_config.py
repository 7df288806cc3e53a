"""
Unit tests for run and architecture configuration
"""

import json

import pytest

from config import (LoGoNetConfig, RunConfig, UlkanetConfig, config_digest, load_config, published_scale_config,
                    save_config, ulkanet_preset)
from utils.errors import ConfigError


def test_published_defaults():
    """Test the masking, clustering and optimization defaults"""
    cfg = RunConfig()
    assert (cfg.phi1, cfg.phi2, cfg.mask_length, cfg.tau) == (0.1, 0.7, 5, 0.1)
    assert cfg.patch_sizes == (1, 2, 4, 8, 16, 32, 96)
    assert (cfg.kmeans_iterations, cfg.kmeans_subset) == (350, 0.1)
    assert (cfg.lr, cfg.weight_decay, cfg.batch_size) == (1e-4, 1e-5, 1)
    assert (cfg.w_dl, cfg.w_cl) == (1.0, 1.0)

    published = published_scale_config()
    assert (published.clusterers_n, published.k_min, published.k_max, published.crop_size) == (80, 80, 500, 96)
    assert published.variant == "normal"


def test_invalid_values_name_their_field():
    """Test that validation reports the offending field"""
    with pytest.raises(ConfigError, match="'phi1'"):
        RunConfig(phi1=1.5)
    with pytest.raises(ConfigError, match="'k_min'"):
        RunConfig(k_min=10, k_max=5)
    with pytest.raises(ConfigError, match="'partitions_n'"):
        RunConfig(partitions_n=7)
    with pytest.raises(ConfigError, match="'variant'"):
        RunConfig(variant="huge")
    with pytest.raises(ConfigError, match="'tau'"):
        RunConfig(tau=0.0)


def test_load_yaml_with_overrides(tmp_path):
    """Test file values, CLI overrides and ignored None overrides"""
    path = tmp_path / "run.yaml"
    path.write_text("seed: 4\nnum_classes: 3\npatch_sizes: [2, 4]\n")
    cfg = load_config(path, seed=9, variant=None)
    assert cfg.seed == 9
    assert cfg.num_classes == 3
    assert cfg.patch_sizes == (2, 4)
    assert cfg.variant == "tiny"


def test_load_json_and_empty_files(tmp_path):
    """Test JSON configs and an empty YAML file"""
    json_path = tmp_path / "run.json"
    json_path.write_text(json.dumps({"clusterers_n": 2}))
    assert load_config(json_path).clusterers_n == 2
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty) == RunConfig()


def test_load_errors(tmp_path):
    """Test unknown keys, unreadable and malformed files"""
    path = tmp_path / "run.yaml"
    path.write_text("sead: 4\n")
    with pytest.raises(ConfigError, match="'sead': unknown field"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path)
    path.write_text("seed: [\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(path)


def test_save_and_reload_is_identity(tmp_path):
    """Test that a saved config loads back equal"""
    cfg = RunConfig(seed=3, variant="normal", share_local=False, patch_sizes=(4, 8))
    path = tmp_path / "resolved.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_digest_tracks_model_fields():
    """Test that the digest is stable and changes with the architecture"""
    a = RunConfig().model_config()
    b = RunConfig(seed=8).model_config()
    c = RunConfig(num_classes=5).model_config()
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(c)
    assert len(config_digest(a)) == 64


def test_variant_presets():
    """Test stage tables, required multiples and decoder lengths of the presets"""
    tiny = RunConfig().model_config()
    assert tiny.global_cfg.dims == (16, 32, 48, 64)
    assert tiny.local_cfg.dims == (16, 32)
    assert tiny.required_multiple == 16
    assert [name for name, *_ in tiny.global_cfg.decoder_plan()] == ["dec4", "dec3", "dec2", "dec1"]

    normal = RunConfig(variant="normal").model_config()
    assert normal.global_cfg.dims == (64, 128, 256, 512)
    assert normal.global_cfg.stage_depths == (3, 4, 6, 3)
    assert normal.required_multiple == 32
    assert normal.global_cfg.decoder_plan()[-1][0] == "final1"
    assert normal.fusion_channels == 64

    assert ulkanet_preset("large").stage_depths == (3, 3, 24, 3)


def test_architecture_validation():
    """Test malformed stage tables and mismatched path widths"""
    with pytest.raises(ConfigError, match="stage_depths"):
        UlkanetConfig((1,), (8, 16), (4, 4), (3, 3), (2, 2))
    with pytest.raises(ConfigError, match="patch_strides"):
        UlkanetConfig((1, 1), (8, 16), (4, 4), (3, 3), (2, 4))
    with pytest.raises(ConfigError, match="patch_strides"):
        UlkanetConfig((1, 1), (8, 16), (4, 4), (3, 3), (3, 2))
    narrow = UlkanetConfig((1, 1), (8, 16), (4, 4), (3, 3), (2, 2), out_channels=8)
    with pytest.raises(ConfigError, match="local_cfg"):
        LoGoNetConfig(ulkanet_preset("tiny"), narrow)

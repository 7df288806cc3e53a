"""
Integration tests for the toolkit workflows
Tests phantom generation, pre-training with resume, fine-tuning, inference,
cost analysis and the command-line exit codes
"""

import numpy as np
import pandas as pd
import pytest

import app
from config import RunConfig, save_config
from seed_data import OBJECT_KINDS, PhantomObject, generate_phantoms, load_dataset, make_phantom, rasterize_object
from utils.errors import ArgumentError
from utils.storage import read_checkpoint, read_pseudo_labels, read_volume, write_volume
from workflows.ablations import run_pretrain_comparison
from workflows.analyze import run_analyze
from workflows.finetune import run_finetune
from workflows.infer import run_infer
from workflows.pretrain import run_pretrain


def desk_config(**changes):
    """Small run configuration for 16^3 phantoms"""
    values = dict(num_classes=3, clusterers_n=2, k_min=2, k_max=4, kmeans_iterations=5, crop_size=16,
                  progress=False, warmup_steps=1, eval_every=2, log_every=1, phi1=0.5, patch_sizes=(2, 4, 8))
    values.update(changes)
    return RunConfig(**values)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Two labeled 16^3 phantoms"""
    out = tmp_path_factory.mktemp("phantoms")
    generate_phantoms(out, 2, (16, 16, 16), desk_config(), seed=0)
    return out


@pytest.fixture(scope="module")
def pretrained(corpus, tmp_path_factory):
    """A four-step pre-training run on the corpus"""
    return run_pretrain(desk_config(), corpus, tmp_path_factory.mktemp("pretrain"), steps=4)


@pytest.fixture(scope="module")
def finetuned(corpus, pretrained, tmp_path_factory):
    """A three-step fine-tuning run initialized from the pre-trained backbone"""
    return run_finetune(desk_config(), corpus, tmp_path_factory.mktemp("finetune"),
                        init_ckpt=pretrained.checkpoint, steps=3)


# ----------------------------------------------------------------------
# phantoms
# ----------------------------------------------------------------------

def test_phantom_generation_is_deterministic(tmp_path):
    """Test that the same seed writes byte-identical volumes"""
    first = generate_phantoms(tmp_path / "a", 2, (16, 16, 16), desk_config(), seed=3)
    second = generate_phantoms(tmp_path / "b", 2, (16, 16, 16), desk_config(), seed=3)
    pd.testing.assert_frame_equal(first, second)
    for name in ("phantom_000_image.lgv", "phantom_001_label.lgv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert list(first.columns) == ["volume", "object", "kind", "class_id", "center", "radii", "voxels"]


def test_zero_phantoms_write_nothing(tmp_path):
    """Test count=0"""
    manifest = generate_phantoms(tmp_path / "empty", 0, (16, 16, 16), desk_config())
    assert len(manifest) == 0
    assert not (tmp_path / "empty").exists()


def test_phantom_objects_cover_every_class():
    """Test one object per foreground class and their rasterized volumes"""
    cfg = desk_config(num_classes=4)
    spec, image, labels = make_phantom(0, (32, 32, 32), cfg, seed=0)
    assert [obj.class_id for obj in spec.objects] == [1, 2, 3]
    assert [obj.kind for obj in spec.objects] == list(OBJECT_KINDS)
    assert set(np.unique(labels)) == {0, 1, 2, 3}
    assert image.shape == (1, 32, 32, 32)

    sphere = PhantomObject("ellipsoid", (16.0, 16.0, 16.0), (8.0, 8.0, 8.0), 1, 300.0)
    voxels = int(rasterize_object(sphere, (32, 32, 32)).sum())
    assert voxels == pytest.approx(4.0 / 3.0 * np.pi * 8 ** 3, rel=0.05)
    with pytest.raises(ArgumentError):
        spec.validate(num_classes=3)


@pytest.mark.parametrize("extents", [(8, 8, 8), (16, 16, 16), (32, 32, 32), (16, 32, 24)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_class_count_keeps_every_object(extents, seed):
    """Test that with 14 classes no object is erased by the ones stamped after it"""
    cfg = RunConfig(progress=False)
    for index in range(15):
        spec, _, labels = make_phantom(index, extents, cfg, seed)
        present = set(np.unique(labels).tolist())
        lost = [obj.class_id for obj in spec.objects if obj.class_id not in present]
        assert lost == [], f"phantom {index}: classes {lost} have no voxels"


def test_phantom_needs_a_voxel_per_class():
    """Test extents too small for the foreground classes"""
    with pytest.raises(ArgumentError, match="fewer voxels"):
        make_phantom(0, (2, 2, 2), RunConfig(progress=False), seed=0)


def test_loaded_phantoms_are_scaled_and_labeled(corpus):
    """Test image range, label range and shapes of a generated corpus"""
    pairs = load_dataset(corpus)
    assert len(pairs) == 2
    for image, labels in pairs:
        assert image.shape == (1, 16, 16, 16) and image.dtype == np.float32
        assert 0.0 <= image.min() and image.max() <= 1.0
        assert labels.shape == (16, 16, 16)
        assert set(np.unique(labels)) <= {0, 1, 2}
    assert all(labels is None for _, labels in load_dataset(corpus, with_labels=False))


# ----------------------------------------------------------------------
# pre-training
# ----------------------------------------------------------------------

def test_pretrain_writes_run_artifacts(pretrained):
    """Test checkpoint sections, pseudo-label store, loss log and config echo"""
    run_dir = pretrained.checkpoint.parent
    state = read_checkpoint(pretrained.checkpoint)
    assert any(name.startswith("pretrain_head.") for name in state)
    assert any(name.startswith("optim.m.") for name in state)
    assert int(state["run.step"][0]) == 4
    assert not any(name.startswith("head.") for name in state)

    labels = read_pseudo_labels(pretrained.labels)
    assert labels.num_volumes == 2 and labels.cluster_sizes == pretrained.cluster_sizes
    assert all(2 <= k <= 4 for k in labels.cluster_sizes)

    assert list(pretrained.log["step"]) == [1, 2, 3, 4]
    assert np.isfinite(pretrained.log["loss"]).all()
    assert (run_dir / "config.resolved.yaml").exists()
    assert (run_dir / "pretrain_loss.csv").exists()
    assert (run_dir / "loss_curve.html").exists()


def test_resumed_pretraining_matches_uninterrupted_run(corpus, tmp_path):
    """Test that stopping after step 2 and resuming reproduces the four-step run"""
    cfg = desk_config()
    straight = run_pretrain(cfg, corpus, tmp_path / "straight", steps=4)
    run_pretrain(cfg, corpus, tmp_path / "split", steps=4, stop_after=2)
    resumed = run_pretrain(cfg, corpus, tmp_path / "split", steps=4, resume=tmp_path / "split" / "pretrain.lgck")

    expected = read_checkpoint(straight.checkpoint)
    actual = read_checkpoint(resumed.checkpoint)
    assert list(actual) == list(expected)
    for name, value in expected.items():
        assert np.array_equal(actual[name], value), name
    assert list(resumed.log["step"]) == [1, 2, 3, 4]
    assert np.allclose(resumed.log["loss"], straight.log["loss"], rtol=1e-12, atol=0)


# ----------------------------------------------------------------------
# fine-tuning and inference
# ----------------------------------------------------------------------

def test_finetune_log_and_checkpoint(finetuned):
    """Test evaluated steps, Dice range and the saved segmentation head"""
    log = finetuned.log
    assert list(log["step"]) == [1, 2, 3]
    assert log["dice"].notna().tolist() == [False, True, True]
    assert 0.0 <= finetuned.final_dice <= 1.0
    state = read_checkpoint(finetuned.checkpoint)
    assert any(name.startswith("head.") for name in state)
    assert not any(name.startswith("pretrain_head.") for name in state)


def test_finetune_starts_from_pretrained_backbone(corpus, pretrained, tmp_path):
    """Test that zero fine-tuning steps keep the loaded backbone unchanged"""
    result = run_finetune(desk_config(), corpus, tmp_path, init_ckpt=pretrained.checkpoint, steps=0)
    source = read_checkpoint(pretrained.checkpoint)
    tuned = read_checkpoint(result.checkpoint)
    backbone = [k for k in tuned if k.startswith(("global.", "local."))]
    assert backbone
    for name in backbone:
        assert np.array_equal(tuned[name], source[name]), name
    assert len(result.log) == 0 and np.isnan(result.final_dice)


def test_infer_writes_label_volume(corpus, finetuned, tmp_path):
    """Test the label volume written for a training phantom"""
    out = tmp_path / "seg.lgv"
    labels = run_infer(desk_config(), finetuned.checkpoint, corpus / "phantom_000_image.lgv", out)
    assert labels.shape == (16, 16, 16)
    stored = read_volume(out)
    assert stored.dtype == np.uint8 and stored.shape == (1, 16, 16, 16)
    assert np.array_equal(stored[0], labels)
    assert stored.max() < 3


def test_analyze_writes_cost_table(tmp_path):
    """Test the cost report of the tiny model and its CSV rows"""
    report = run_analyze(desk_config(), (1, 1, 16, 16, 16), tmp_path)
    rows = pd.read_csv(tmp_path / "cost_report.csv")
    assert int(rows["macs"].sum()) == report.total_macs
    assert report.model_name == "logonet-tiny"
    assert len(report.config_digest) == 64


# ----------------------------------------------------------------------
# command line
# ----------------------------------------------------------------------

@pytest.fixture
def config_file(tmp_path):
    """The desk configuration written as YAML"""
    path = tmp_path / "desk.yaml"
    save_config(desk_config(), path)
    return path


def test_cli_generates_and_analyzes(tmp_path, config_file, capsys):
    """Test successful gen-data and analyze-flops commands"""
    out = tmp_path / "cli_phantoms"
    assert app.main(["gen-data", "--config", str(config_file), "--out", str(out), "--count", "1"]) == 0
    assert (out / "phantom_000_image.lgv").exists()
    assert app.main(["analyze-flops", "--config", str(config_file), "--shape", "1,1,16,16,16"]) == 0
    printed = capsys.readouterr().out
    assert "[OK] Wrote 1 phantoms" in printed
    assert "MACs:" in printed


def test_cli_configuration_errors_exit_1(tmp_path, config_file, capsys):
    """Test unknown config keys and malformed arguments"""
    bad = tmp_path / "bad.yaml"
    bad.write_text("sead: 1\n")
    assert app.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    captured = capsys.readouterr()
    assert "unknown field" in captured.err
    assert "Error" not in captured.out
    assert app.main(["gen-data", "--config", str(config_file), "--out", str(tmp_path / "x"),
                     "--extents", "16,16"]) == 1


def test_cli_bad_magic_exits_2(corpus, tmp_path, config_file, capsys):
    """Test a corrupt checkpoint"""
    fake = tmp_path / "fake.lgck"
    fake.write_bytes(b"NOPE" + bytes(16))
    code = app.main(["infer", "--config", str(config_file), str(fake), str(corpus / "phantom_000_image.lgv"),
                     "--out", str(tmp_path / "seg.lgv")])
    assert code == 2
    assert "bad magic" in capsys.readouterr().err


def test_cli_indivisible_volume_exits_3(finetuned, tmp_path, config_file, capsys):
    """Test a volume whose extents are not a multiple of 16"""
    volume = tmp_path / "odd_image.lgv"
    write_volume(volume, np.zeros((1, 12, 16, 16), dtype=np.float32))
    code = app.main(["infer", "--config", str(config_file), str(finetuned.checkpoint), str(volume),
                     "--out", str(tmp_path / "seg.lgv")])
    assert code == 3
    assert "divisible by 16" in capsys.readouterr().err


def test_pretrain_checkpoint_cannot_segment(corpus, pretrained, tmp_path, config_file, capsys):
    """Test that inference needs a checkpoint with a segmentation head"""
    code = app.main(["infer", "--config", str(config_file), str(pretrained.checkpoint),
                     str(corpus / "phantom_000_image.lgv"), "--out", str(tmp_path / "seg.lgv")])
    assert code == 2
    assert "missing parameters: head." in capsys.readouterr().err


# ----------------------------------------------------------------------
# desk-scale acceptance runs
# ----------------------------------------------------------------------

@pytest.mark.slow
def test_overfit_training_phantoms(tmp_path):
    """Test that the tiny model overfits eight 32^3 phantoms within 500 steps"""
    cfg = desk_config(crop_size=32, lr=3e-3, warmup_steps=20, eval_every=50, finetune_steps=500)
    generate_phantoms(tmp_path / "data", 8, (32, 32, 32), cfg, seed=0)
    result = run_finetune(cfg, tmp_path / "data", tmp_path / "run")
    assert result.final_dice > 0.95
    windows = result.log["loss"].groupby((result.log["step"] - 1) // 50).mean().tolist()
    assert all(b <= a for a, b in zip(windows, windows[1:]))


@pytest.mark.slow
def test_pretraining_loss_decreases(tmp_path):
    """Test the masked pre-training loss over 100 steps on 32^3 phantoms"""
    cfg = desk_config(crop_size=32, lr=1e-3, warmup_steps=5, clusterers_n=4, k_min=8, k_max=32,
                      kmeans_iterations=50, phi1=0.3, patch_sizes=(1, 2, 4, 8, 16, 32))
    generate_phantoms(tmp_path / "data", 8, (32, 32, 32), cfg, seed=0)
    log = run_pretrain(cfg, tmp_path / "data", tmp_path / "run", steps=100).log.dropna()
    assert log["loss_per_slice"].tail(20).mean() < log["loss_per_slice"].head(20).mean()


@pytest.mark.slow
def test_pretraining_effect_table(tmp_path):
    """Test that the paired comparison reports every seed"""
    cfg = desk_config(crop_size=32, eval_every=25, clusterers_n=4, k_min=8, k_max=32, kmeans_iterations=50,
                      lr=3e-3, warmup_steps=20)
    generate_phantoms(tmp_path / "train", 8, (32, 32, 32), cfg, seed=0)
    generate_phantoms(tmp_path / "eval", 2, (32, 32, 32), cfg, seed=1)
    table = run_pretrain_comparison(cfg, (0, 1, 2), tmp_path / "train", tmp_path / "eval", tmp_path / "out",
                                    pretrain_steps=200, finetune_steps=300)
    assert list(table["seed"]) == [0, 1, 2]
    assert (tmp_path / "out" / "pretrain_effect" / "pretrain_effect.csv").exists()
    assert (tmp_path / "out" / "pretrain_effect" / "seed_0" / "comparison.csv").exists()

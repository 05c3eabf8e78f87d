import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from railmatch.geometry import Displacement
from railmatch.model import ModelConfig, build_model, output_layer
from railmatch.raster import ImageSpec
from railmatch.synthetic import GenConfig, generate_dataset
from railmatch.training import (
    Checkpoint,
    NeuralMatcher,
    RenderedSplit,
    TrainConfig,
    TrainingDiverged,
    predict_mm,
    render_manifest_split,
    train,
)

# 128 px at 1.2 mm/px spans the same 153.6 mm canvas; downscaled to 64 px for speed
SPEC = ImageSpec(width_px=128, height_px=128, mm_per_px=1.2, resize_to=64)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = GenConfig(master_seed=5, n_samples=60, split_fractions=(40 / 60, 10 / 60, 10 / 60))
    return generate_dataset(cfg, root)


@pytest.fixture(scope="module")
def splits(dataset):
    return {s: render_manifest_split(dataset, s, SPEC, "single") for s in ("train", "val")}


def tiny(**kw):
    return ModelConfig(**{"backbone_preset": "tiny", "input_px": 64, **kw})


def test_rendered_split_shapes(splits):
    tr = splits["train"]
    assert len(tr) == 40
    assert tr.images[0].shape == (40, 64, 64, 3)
    np.testing.assert_allclose(tr.labels * 40.0, tr.labels_mm, atol=1e-5)


def test_history_and_best_checkpoint_contract(splits, tmp_path):
    cfg = tiny()
    result = train(build_model(cfg), cfg, splits["train"], splits["val"], TrainConfig(epochs=4, learning_rate=1e-3), SPEC, out_dir=tmp_path)
    hist = result.history
    assert [h["epoch"] for h in hist] == [1, 2, 3, 4]
    vals = [h["val_loss"] for h in hist]
    meta = result.checkpoint.metadata
    assert meta["epoch"] == 1 + int(np.argmin(vals))
    # the saved weights reproduce the best val loss
    matcher = NeuralMatcher(Checkpoint.load(tmp_path / "best.pt"))
    from railmatch.training import predict_split

    pred = predict_split(matcher.model, matcher.config, splits["val"])
    assert float(np.mean((pred - splits["val"].labels) ** 2)) == pytest.approx(min(vals), rel=1e-6)
    rows = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert len(rows) == 4 and set(rows[0]) == {"epoch", "train_loss", "val_loss", "train_accuracy", "val_accuracy"}


def test_checkpoint_metadata_rebuilds_pipeline(splits, tmp_path):
    cfg = tiny(architecture="single")
    result = train(build_model(cfg), cfg, splits["train"], splits["val"], TrainConfig(epochs=1), SPEC, l_norm=40.0)
    path = result.checkpoint.save(tmp_path / "ck")
    assert path.suffix == ".pt" and (tmp_path / "ck.json").exists()
    meta = json.loads((tmp_path / "ck.json").read_text())
    for key in ("model_config", "train_config", "epoch", "history", "l_norm_mm", "image_spec", "image_spec_digest"):
        assert key in meta
    assert meta["image_spec_digest"] == SPEC.digest()
    loaded = Checkpoint.load(path)
    assert loaded.image_spec == SPEC and loaded.l_norm == 40.0
    assert loaded.model_config.input_mean == cfg.input_mean


def test_missing_checkpoint_file_is_named(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothing"):
        Checkpoint.load(tmp_path / "nothing.pt")


def test_zero_learning_rate_keeps_weights_and_train_loss(splits):
    cfg = tiny()
    model = build_model(cfg)
    before = {k: v.clone() for k, v in model.named_parameters()}
    tcfg = TrainConfig(epochs=3, learning_rate=0.0, batch_size=len(splits["train"]))
    hist = train(model, cfg, splits["train"], splits["val"], tcfg, SPEC).history
    for name, p in model.named_parameters():
        assert torch.equal(p, before[name]), name
    losses = [h["train_loss"] for h in hist]
    # the per-epoch shuffle reorders float32 reductions inside the batch
    assert losses[1] == pytest.approx(losses[0], rel=1e-6)
    assert losses[2] == pytest.approx(losses[0], rel=1e-6)


def test_every_parameter_moves_after_one_epoch(splits):
    for arch in ("single", "dual"):
        cfg = tiny(architecture=arch)
        data = splits if arch == "single" else None
        if arch == "dual":
            data = {s: _render_dual(s, splits) for s in ("train", "val")}
        model = build_model(cfg)
        before = {k: v.clone() for k, v in model.named_parameters()}
        train(model, cfg, data["train"], data["val"], TrainConfig(epochs=1, learning_rate=1e-3), SPEC)
        for name, p in model.named_parameters():
            assert not torch.equal(p, before[name]), f"{arch}: {name} did not change"


_DUAL_CACHE = {}


def _render_dual(split, splits):
    if split not in _DUAL_CACHE:
        tr = splits[split]
        # two branches fed with the same pictures are enough to exercise every tensor
        _DUAL_CACHE[split] = RenderedSplit(tr.ids, (tr.images[0], tr.images[0][::-1].copy()), tr.labels, tr.labels_mm)
    return _DUAL_CACHE[split]


def test_training_is_deterministic(splits):
    cfg = tiny(seed=3)
    tcfg = TrainConfig(epochs=2, learning_rate=1e-3, seed=3, shift_augment_px=2)
    a = train(build_model(cfg), cfg, splits["train"], splits["val"], tcfg, SPEC).history
    b = train(build_model(cfg), cfg, splits["train"], splits["val"], tcfg, SPEC).history
    assert a == b


def test_training_progress_at_default_settings(splits):
    cfg = tiny()
    hist = train(build_model(cfg), cfg, splits["train"], splits["val"], TrainConfig(epochs=20), SPEC).history
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_non_finite_loss_aborts_with_snapshot(splits):
    cfg = tiny()
    bad = splits["train"]
    labels = bad.labels.copy()
    labels[3] = np.nan
    poisoned = RenderedSplit(bad.ids, bad.images, labels, bad.labels_mm)
    with pytest.raises(TrainingDiverged) as info:
        train(build_model(cfg), cfg, poisoned, splits["val"], TrainConfig(epochs=1), SPEC)
    assert info.value.snapshot["epoch"] == 1
    assert "non-finite" in str(info.value)


def test_empty_split_rejected(splits):
    cfg = tiny()
    tr = splits["train"]
    empty = RenderedSplit([], (tr.images[0][:0],), tr.labels[:0], tr.labels_mm[:0])
    with pytest.raises(ValueError):
        train(build_model(cfg), cfg, empty, splits["val"], TrainConfig(epochs=1), SPEC)


@pytest.mark.parametrize(
    "kw", [{"learning_rate": -1.0}, {"batch_size": 0}, {"shift_augment_px": -1}, {"lr_schedule": "step"}]
)
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_cosine_schedule_values():
    cfg = TrainConfig(learning_rate=1e-3, lr_schedule="cosine")
    assert cfg.lr_at(0, 100) == 1e-3
    assert cfg.lr_at(50, 100) == pytest.approx(5e-4, rel=1e-12)
    assert cfg.lr_at(100, 100) == pytest.approx(0.0, abs=1e-18)
    lrs = [cfg.lr_at(k, 100) for k in range(101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert TrainConfig(learning_rate=1e-3).lr_at(99, 100) == 1e-3
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_predict_mm_denormalises_head_output(dataset, tmp_path):
    cfg = tiny()
    model = build_model(cfg)
    with torch.no_grad():
        head = output_layer(model)
        head.weight.zero_()
        head.bias.copy_(torch.tensor([0.5, -0.25]))
    meta = {"model_config": cfg.to_dict(), "l_norm_mm": 40.0, "image_spec": SPEC.to_dict()}
    ck = Checkpoint(model.state_dict(), meta)
    rec = dataset.split("test")[0]
    from railmatch.geometry import read_profile

    d, m = read_profile(dataset.path(rec.designed_path)), read_profile(dataset.path(rec.measured_path))
    r1 = predict_mm(ck, d, m)
    assert r1.displacement == Displacement(20.0, -10.0)
    r2 = predict_mm(ck, d, m)
    assert r1 == r2 and r1.method == "neural"


def test_predict_mm_off_canvas_errors(dataset):
    from railmatch.geometry import read_profile, translate

    cfg = tiny()
    ck = Checkpoint(build_model(cfg).state_dict(), {"model_config": cfg.to_dict(), "l_norm_mm": 40.0, "image_spec": SPEC.to_dict()})
    rec = dataset.records[0]
    d = read_profile(dataset.path(rec.designed_path))
    with pytest.raises(ValueError, match="off"):
        predict_mm(ck, d, translate(d, (200.0, 0.0)))

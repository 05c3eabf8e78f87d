import numpy as np
import pytest
import torch

from railmatch.model import (
    PRESETS,
    Backbone,
    ModelConfig,
    build_model,
    count_parameters,
    forward,
    load_pretrained_backbone,
    model_inputs,
    output_layer,
)


def images(n, px=64, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, px, px, 3), dtype=np.uint8)


def cfg(**kw):
    base = dict(backbone_preset="tiny", input_px=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.mark.parametrize("preset", PRESETS)
@pytest.mark.parametrize("arch", ["single", "dual"])
def test_output_is_two_values(preset, arch):
    c = cfg(backbone_preset=preset, architecture=arch)
    model = build_model(c)
    batch = tuple(images(3, seed=i) for i in range(1 if arch == "single" else 2))
    out = forward(model, c, batch)
    assert out.shape == (3, 2)
    assert output_layer(model).out_features == 2


def test_architecture_aliases():
    assert ModelConfig(architecture="DualBranch").architecture == "dual"
    assert ModelConfig(architecture="SingleBranch").render_mode == "single"
    assert ModelConfig(architecture="dual").render_mode == "separate"


@pytest.mark.parametrize(
    "kw", [{"backbone_preset": "huge"}, {"architecture": "triple"}, {"input_channels": 1}, {"init": "imagenet"}]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_round_trip():
    c = cfg(architecture="dual", branch_weight_sharing=True, seed=4)
    assert ModelConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("preset", PRESETS)
def test_dual_parameter_count(preset):
    backbone = count_parameters(Backbone(preset))
    features = Backbone(preset).out_features
    merge = 2 * features * 2 + 2
    assert count_parameters(build_model(cfg(backbone_preset=preset, architecture="dual"))) == 2 * backbone + merge
    shared = count_parameters(build_model(cfg(backbone_preset=preset, architecture="dual", branch_weight_sharing=True)))
    assert shared == backbone + merge
    assert count_parameters(build_model(cfg(backbone_preset=preset))) == backbone + features * 2 + 2


def test_no_output_activation_large_weights_leave_unit_range():
    c = cfg()
    model = build_model(c)
    with torch.no_grad():
        output_layer(model).weight.fill_(100.0)
        output_layer(model).bias.fill_(5.0)
    out = forward(model, c, (images(4),))
    assert np.any(np.abs(out) > 1.0)


def test_zero_head_outputs_zero():
    c = cfg(architecture="dual")
    model = build_model(c)
    with torch.no_grad():
        output_layer(model).weight.zero_()
        output_layer(model).bias.zero_()
    out = forward(model, c, (images(2, seed=1), images(2, seed=2)))
    assert np.array_equal(out, np.zeros((2, 2)))


def test_forward_is_deterministic():
    c = cfg()
    model = build_model(c)
    x = (images(5),)
    assert np.array_equal(forward(model, c, x), forward(model, c, x))


@pytest.mark.parametrize("arch", ["single", "dual"])
def test_batched_equals_per_sample(arch):
    c = cfg(architecture=arch)
    model = build_model(c)
    batch = tuple(images(6, seed=i) for i in range(1 if arch == "single" else 2))
    together = forward(model, c, batch)
    alone = np.vstack([forward(model, c, tuple(b[i] for b in batch)) for i in range(6)])
    np.testing.assert_allclose(together, alone, atol=1e-5)


def test_same_seed_same_weights_different_seed_differs():
    a = build_model(cfg(seed=1)).state_dict()
    b = build_model(cfg(seed=1)).state_dict()
    c = build_model(cfg(seed=2)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a if a[k].is_floating_point())


def test_dual_branches_independent_unless_shared():
    m = build_model(cfg(architecture="dual"))
    assert m.designed_branch is not m.measured_branch
    s = build_model(cfg(architecture="dual", branch_weight_sharing=True))
    assert s.designed_branch is s.measured_branch


def test_shape_and_count_errors():
    c = cfg()
    model = build_model(c)
    with pytest.raises(ValueError):
        forward(model, c, (images(1, px=32),))
    with pytest.raises(ValueError):
        forward(model, c, (images(1), images(1)))
    with pytest.raises(ValueError):
        model_inputs((np.zeros((1, 64, 64), np.uint8),), c)


def test_preprocess_standardises_with_recorded_constants():
    c = cfg(input_mean=(0.5, 0.5, 0.5), input_std=(0.5, 0.5, 0.5))
    white = np.full((1, 64, 64, 3), 255, np.uint8)
    (x,) = model_inputs((white,), c)
    assert torch.allclose(x, torch.ones_like(x))


def test_pretrained_backbone_init(tmp_path):
    donor = build_model(cfg(seed=11))
    path = tmp_path / "donor.pt"
    torch.save(donor.state_dict(), path)
    dual = build_model(cfg(architecture="dual", seed=3, init=f"pretrained:{path}"))
    for name, value in donor.backbone.state_dict().items():
        assert torch.equal(dual.designed_branch.state_dict()[name], value)
        assert torch.equal(dual.measured_branch.state_dict()[name], value)
    assert load_pretrained_backbone(build_model(cfg()), path) > 0
    with pytest.raises(FileNotFoundError):
        build_model(cfg(init=f"pretrained:{tmp_path / 'missing.pt'}"))

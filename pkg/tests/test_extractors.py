import pytest
import torch
from hypothesis import given, strategies as st

from scinst.errors import ConfigError, DimensionError
from scinst.extractors import (
    LAYER_NAMES,
    HighFreqMixer,
    LowFreqMixer,
    PEStage,
    PerceptionEncoder,
    PerceptualExtractor,
    VGGStyleEncoder,
    extract_perceptual,
)


def test_vgg_layer_shapes(extractor):
    feats = extract_perceptual(torch.rand(1, 3, 64, 64), LAYER_NAMES, extractor)
    assert {k: tuple(v.shape) for k, v in feats.items()} == {
        "relu1_1": (1, 64, 64, 64),
        "relu2_1": (1, 128, 32, 32),
        "relu3_1": (1, 256, 16, 16),
        "relu4_1": (1, 512, 8, 8),
        "relu5_1": (1, 512, 4, 4),
    }


def test_vgg_is_frozen_deterministic_and_rejects_unknown_layers(extractor):
    assert all(not p.requires_grad for p in extractor.parameters())
    x = torch.rand(2, 3, 32, 32)
    a, b = extractor(x, ["relu3_1"]), extractor(x.clone(), ["relu3_1"])
    assert torch.equal(a["relu3_1"], b["relu3_1"])
    extractor.train()
    assert not extractor.training
    with pytest.raises(ConfigError):
        extractor(x, ["relu6_1"])
    with pytest.raises(DimensionError):
        extractor(torch.rand(1, 1, 8, 8))


def test_vgg_same_seed_same_weights():
    a, b = PerceptualExtractor(seed=7), PerceptualExtractor(seed=7)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_vgg_gradients_reach_input_only(extractor):
    x = torch.rand(1, 3, 16, 16, requires_grad=True)
    extractor(x, ["relu2_1"])["relu2_1"].sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None for p in extractor.parameters())


def test_vgg_loads_torchvision_style_checkpoint(tmp_path):
    src = PerceptualExtractor(seed=1)
    torch.save({f"features.{k}": v for k, v in src.features.state_dict().items()}, tmp_path / "vgg.pth")
    dst = PerceptualExtractor(seed=2, weights_path=str(tmp_path / "vgg.pth"))
    assert all(torch.equal(p, q) for p, q in zip(src.parameters(), dst.parameters()))
    torch.save({"features.0.weight": torch.zeros(1)}, tmp_path / "short.pth")
    with pytest.raises(ConfigError):
        PerceptualExtractor(weights_path=str(tmp_path / "short.pth"))


def test_texture_response_differs_from_flat_mean(extractor):
    yy, xx = torch.meshgrid(torch.arange(32.0), torch.arange(32.0), indexing="ij")
    texture = (0.5 + 0.4 * torch.sin(xx) * torch.cos(yy)).expand(1, 3, 32, 32)
    flat = texture.mean().expand_as(texture)
    a, b = extractor(texture, ["relu3_1"])["relu3_1"], extractor(flat, ["relu3_1"])["relu3_1"]
    assert (a - b).norm() > 0


def test_high_freq_mixer_contracts():
    mixer = HighFreqMixer(4)
    with torch.no_grad():
        mixer.fc1.weight.copy_(torch.eye(4).view(4, 4, 1, 1))
        mixer.fc1.bias.zero_()
    y1, _ = mixer(torch.full((1, 4, 6, 6), 0.7), torch.zeros(1, 4, 6, 6))
    assert torch.allclose(y1, torch.full_like(y1, 0.7))
    impulse = torch.zeros(1, 4, 9, 9)
    impulse[..., 4, 4] = 1.0
    with torch.no_grad():
        mixer.fc2.bias.zero_()
        mixer.dwconv.bias.zero_()
    _, y2 = mixer(torch.zeros(1, 4, 9, 9), impulse)
    support = y2.abs().sum(dim=(0, 1)) > 0
    rows, cols = support.nonzero(as_tuple=True)
    assert rows.min() >= 3 and rows.max() <= 5 and cols.min() >= 3 and cols.max() <= 5
    with pytest.raises(DimensionError):
        mixer(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 6, 6))


def test_low_freq_mixer_blocks_and_constant_input():
    mixer = LowFreqMixer(8, heads=2)
    y = mixer(torch.randn(1, 8, 6, 4))
    assert y.shape == (1, 8, 6, 4)
    assert torch.equal(y[..., ::2, ::2], y[..., 1::2, 1::2]) and torch.equal(y[..., ::2, ::2], y[..., 1::2, ::2])
    with torch.no_grad():
        mixer.attn.w_v.weight.copy_(torch.eye(8))
        mixer.attn.w_o.weight.copy_(torch.eye(8))
    const = torch.full((1, 8, 4, 4), 1.5)
    assert torch.allclose(mixer(const), const)
    odd = mixer(torch.randn(1, 8, 5, 1))
    assert odd.shape == (1, 8, 5, 1) and torch.equal(odd[..., 0:1, :], odd[..., 1:2, :])


def test_pe_stage_shape_zero_and_errors():
    stage = PEStage(16, heads=2)
    assert stage(torch.randn(1, 16, 8, 8)).shape == (1, 16, 8, 8)
    for m in stage.modules():
        if getattr(m, "bias", None) is not None:
            torch.nn.init.zeros_(m.bias)
    assert torch.equal(stage(torch.zeros(1, 16, 4, 4)), torch.zeros(1, 16, 4, 4))
    with pytest.raises(DimensionError):
        stage(torch.randn(1, 15, 4, 4))
    with pytest.raises(ConfigError):
        PEStage(18)


@given(branch=st.sampled_from(["h1", "h2", "low"]), seed=st.integers(0, 1000))
def test_pe_branch_isolation(branch, seed):
    torch.manual_seed(seed)
    stage = PEStage(16, heads=2)
    x = torch.randn(1, 16, 4, 4)
    inputs = {"h1": slice(0, 4), "h2": slice(4, 8), "low": slice(8, 16)}
    outputs = {"low": slice(0, 8), "h1": slice(8, 12), "h2": slice(12, 16)}
    y = x.clone()
    y[:, inputs[branch]] += 1.0 + torch.rand_like(y[:, inputs[branch]])
    with torch.no_grad():
        a, b = stage(x), stage(y)
    for name, sl in outputs.items():
        changed = not torch.equal(a[:, sl], b[:, sl])
        assert changed == (name == branch)


def test_pe_shapes_desk_and_full_scale():
    pe = PerceptionEncoder()
    with torch.no_grad():
        f = pe(torch.rand(1, 3, 64, 64))
        assert f.stage1.shape == (1, 512, 16, 16) and f.stage2.shape == (1, 512, 8, 8)
        f = pe(torch.rand(1, 3, 256, 256))
        assert f.stage1.shape == (1, 512, 64, 64) and f.stage2.shape == (1, 512, 32, 32)
    with pytest.raises(DimensionError):
        pe(torch.rand(1, 3, 60, 64))


def test_vgg_style_encoders(extractor):
    fixed = VGGStyleEncoder(extractor)
    assert list(fixed.parameters()) == []
    x = torch.rand(1, 3, 32, 32)
    assert fixed(x).stage2.shape == (1, 512, 4, 4) and fixed(x).stage1 is None
    learn = VGGStyleEncoder(extractor, learnable=True)
    params = list(learn.parameters())
    assert params and all(p.requires_grad for p in params)
    assert all(not p.requires_grad for p in extractor.parameters())
    assert torch.allclose(learn(x).stage2, fixed(x).stage2)

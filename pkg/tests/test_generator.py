import pytest
import torch
from hypothesis import given, strategies as st

from scinst import oracles
from scinst.errors import ConfigError, DimensionError
from scinst.generator import (
    CrossAttentionFusion,
    Decoder,
    Generator,
    ModelConfig,
    cross_attention_fuse,
    grid_indices,
    stylize,
)
from scinst.scin import AffineParams, instance_norm


@pytest.fixture(scope="module")
def generator(extractor):
    torch.manual_seed(0)
    return Generator(extractor)


def test_fusion_matches_loop_oracle():
    torch.manual_seed(1)
    fusion = CrossAttentionFusion(4).double()
    c = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    s = torch.randn(1, 4, 3, 2, dtype=torch.float64)
    fused, w = fusion(c, s, return_weights=True)
    slow, slow_w = oracles.naive_cross_attention(c[0], s[0], fusion)
    assert torch.allclose(fused[0], torch.tensor(slow, dtype=torch.float64), atol=1e-10)
    assert torch.allclose(w[0], torch.tensor(slow_w, dtype=torch.float64), atol=1e-12)


@given(h=st.integers(1, 5), w=st.integers(1, 5), hs=st.integers(1, 5), ws=st.integers(1, 5), seed=st.integers(0, 99))
def test_fusion_rows_are_stochastic(h, w, hs, ws, seed):
    torch.manual_seed(seed)
    fusion = CrossAttentionFusion(8)
    fused, weights = fusion(torch.randn(2, 8, h, w), torch.randn(2, 8, hs, ws) * 10, return_weights=True)
    assert fused.shape == (2, 8, h, w) and weights.shape == (2, h * w, hs * ws)
    assert torch.allclose(weights.sum(-1), torch.ones(2, h * w), atol=1e-6)
    assert (weights >= 0).all()


def test_fusion_shape_errors():
    with pytest.raises(DimensionError):
        cross_attention_fuse(torch.randn(1, 8, 2, 2), torch.randn(1, 4, 2, 2), CrossAttentionFusion(8))


def test_decoder_output_range_and_neutral_affines():
    torch.manual_seed(2)
    dec = Decoder((16, 8, 8, 4))
    x = torch.randn(2, 16, 3, 5)
    out = dec(x)
    assert out.shape == (2, 3, 24, 40) and out.min() >= 0 and out.max() <= 1
    neutral = [AffineParams(torch.ones(2, c, 1, 1), torch.zeros(2, c, 1, 1)) for c in (16, 8, 8, 4)]
    a = dec(x, neutral)
    # neutral affines are plain instance normalization at every block
    b = instance_norm(x)
    for i, block in enumerate(dec.blocks):
        b = block(b)
        if i < 3:
            b = instance_norm(b)
    assert torch.allclose(a, torch.sigmoid(b), atol=1e-6)


def test_grid_indices_row_major_over_styles():
    s, c = grid_indices(2, 3)
    assert s.tolist() == [0, 0, 0, 1, 1, 1] and c.tolist() == [0, 1, 2, 0, 1, 2]


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(style_encoder="resnet")
    with pytest.raises(ConfigError):
        ModelConfig(decoder_channels=(512, 64))


@pytest.mark.parametrize("size", [(8, 8), (16, 24), (64, 64), (40, 32)])
def test_stylize_preserves_content_size(generator, size):
    c, s = torch.rand(1, 3, *size), torch.rand(1, 3, *size)
    with torch.no_grad():
        out = stylize(c, s, generator)
    assert out.shape == c.shape and torch.isfinite(out).all()


def test_stylize_errors(generator):
    with pytest.raises(DimensionError):
        generator.stylize(torch.rand(1, 3, 60, 64), torch.rand(1, 3, 64, 64))
    with pytest.raises(DimensionError):
        generator.stylize(torch.rand(2, 3, 16, 16), torch.rand(1, 3, 16, 16))


def test_grid_entries_equal_independent_stylization(generator):
    c, s = torch.rand(2, 3, 32, 32), torch.rand(3, 3, 32, 32)
    with torch.no_grad():
        grid = generator.stylize_grid(c, s)
        assert grid.shape == (3, 2, 3, 32, 32)
        single = generator.stylize(c[1:2], s[2:3])
    assert torch.allclose(grid[2, 1], single[0], atol=1e-5)


def test_extractor_not_registered(generator, extractor):
    names = [n for n, _ in generator.named_parameters()]
    assert not any(n.startswith("extractor") for n in names)
    assert not any(k.startswith("extractor") for k in generator.state_dict())


@pytest.mark.parametrize("encoder", ["pe", "fixed_vgg", "learnable_vgg"])
def test_every_trainable_parameter_gets_gradient(extractor, encoder):
    torch.manual_seed(3)
    gen = Generator(extractor, ModelConfig(style_encoder=encoder))
    # push SCIN heads off their exact-IN init so style gradients are nonzero
    with torch.no_grad():
        for head in list(gen.scin.heads.gamma) + list(gen.scin.heads.beta):
            head[2].weight.normal_(0, 0.01)
    out = gen.stylize(torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64))
    (out * torch.randn_like(out)).sum().backward()
    dead = [n for n, p in gen.named_parameters() if p.requires_grad and (p.grad is None or p.grad.abs().sum() == 0)]
    assert dead == []


def test_no_scin_skips_realignment(extractor):
    gen = Generator(extractor, ModelConfig(use_scin=False))
    assert gen.scin is None
    assert gen.style_affines(None) is None
    assert gen.stylize(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)).shape == (1, 3, 32, 32)

import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from scinst import oracles
from scinst.contrastive import (
    DEFAULT_TAU,
    InstanceEmbedder,
    ProjectionHeads,
    StylizationGrid,
    build_grid,
    embed_instance,
    grid_masks,
    icl_gradient_check,
    icl_loss,
    icl_loss_from_codes,
    view_loss,
)
from scinst.errors import ConfigError, DimensionError
from scinst.generator import Generator
from scinst.toydata import toy_batch


def unit_codes(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, n, d, generator=g, dtype=torch.float64), dim=-1)


@given(n=st.integers(2, 4), d=st.integers(2, 8), seed=st.integers(0, 10_000), tau=st.floats(0.1, 2.0))
def test_matches_brute_force_enumeration(n, d, seed, tau):
    s, c = unit_codes(n, d, seed), unit_codes(n, d, seed + 1)
    fast = float(icl_loss_from_codes(s, c, tau))
    slow = oracles.brute_force_icl(s.tolist(), c.tolist(), tau)
    assert math.isclose(fast, slow, rel_tol=0, abs_tol=1e-6 * max(1.0, abs(slow)))


@given(n=st.integers(2, 4), seed=st.integers(0, 10_000))
def test_relabeling_rows_or_columns_is_bit_exact(n, seed):
    s, c = unit_codes(n, 5, seed), unit_codes(n, 5, seed + 1)
    g = torch.Generator().manual_seed(seed)
    rows, cols = torch.randperm(n, generator=g), torch.randperm(n, generator=g)
    base = icl_loss_from_codes(s, c)
    assert torch.equal(icl_loss_from_codes(s[rows], c[rows]), base)
    assert torch.equal(icl_loss_from_codes(s[:, cols], c[:, cols]), base)


def test_identical_codes_give_closed_form():
    n = 4
    codes = F.normalize(torch.ones(n, n, 3, dtype=torch.float64), dim=-1)
    # every similarity is equal, so each term is log(1 + (n-1)^2)
    expected = 2 * math.log(1 + (n - 1) ** 2)
    assert math.isclose(float(icl_loss_from_codes(codes, codes)), expected, abs_tol=1e-12)


def test_separated_codes_drive_loss_down():
    n = 3
    eye = torch.eye(n, dtype=torch.float64)
    style = eye[:, None, :].expand(n, n, n)  # same code along each style row
    content = eye[None, :, :].expand(n, n, n)  # same code along each content column
    assert float(view_loss(style, "style", 0.05)) < 1e-6
    assert float(view_loss(content, "content", 0.05)) < 1e-6
    assert float(view_loss(content, "style", 0.05)) > 1.0


def test_masks_count_positives_and_negatives():
    for n in (2, 3, 4):
        for view in ("style", "content"):
            pos, neg = grid_masks(n, view)
            assert pos.sum(1).eq(n - 1).all() and neg.sum(1).eq((n - 1) ** 2).all()
            assert not (pos & neg).any() and not pos.diagonal().any()
    with pytest.raises(ConfigError):
        grid_masks(2, "both")


def test_validation_errors():
    codes = unit_codes(2, 3, 0)
    with pytest.raises(ConfigError):
        view_loss(unit_codes(1, 3, 0), "style")
    with pytest.raises(ConfigError):
        view_loss(codes, "style", tau=0.0)
    with pytest.raises(DimensionError):
        view_loss(codes.reshape(4, 3), "style")


def test_literal_variant_is_constant_in_the_codes():
    a, b = unit_codes(3, 4, 1), unit_codes(3, 4, 2)
    la = float(icl_loss_from_codes(a, a, literal=True))
    lb = float(icl_loss_from_codes(b, b, literal=True))
    assert math.isclose(la, lb, abs_tol=1e-12)
    assert math.isclose(la, 2 * math.log(1 + 4), abs_tol=1e-12)


def test_default_tau():
    assert DEFAULT_TAU == 0.3


def test_gradient_check():
    report = icl_gradient_check(unit_codes(2, 4, 3), unit_codes(2, 4, 4))
    assert report.passed, report


def test_embedder_frozen_and_deterministic():
    emb = InstanceEmbedder()
    x = torch.rand(2, 3, 64, 64, requires_grad=True)
    a, b = embed_instance(x, emb), embed_instance(x.detach().clone(), emb)
    assert torch.equal(a, b) and torch.isfinite(a).all()
    a.sum().backward()
    assert x.grad is not None and all(p.grad is None for p in emb.parameters())
    assert all(not p.requires_grad for p in emb.parameters())
    with pytest.raises(DimensionError):
        embed_instance(torch.rand(1, 4, 8, 8), emb)


def test_embedder_separates_distinct_images():
    c, s = toy_batch(2)
    z = F.normalize(InstanceEmbedder()(torch.cat([c, s])), dim=-1)
    sims = z @ z.T
    off = sims[~torch.eye(4, dtype=torch.bool)]
    assert off.max() < 0.99


def test_same_seed_same_embedder_regardless_of_global_rng():
    torch.manual_seed(1)
    a = InstanceEmbedder()
    torch.manual_seed(2)
    b = InstanceEmbedder()
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


def test_projection_heads_unit_norm():
    heads = ProjectionHeads()
    s, c = heads(torch.randn(5, 512) * 10)
    assert torch.allclose(s.norm(dim=-1), torch.ones(5), atol=1e-6)
    assert torch.allclose(c.norm(dim=-1), torch.ones(5), atol=1e-6)


def test_build_grid_and_loss(extractor):
    torch.manual_seed(0)
    gen = Generator(extractor)
    c, s = toy_batch(2, size=32)
    with torch.no_grad():
        grid = build_grid(c, s, gen)
        assert grid.n == 2 and grid.flat().shape == (4, 3, 32, 32)
        assert torch.allclose(grid.entry(1, 0), gen.stylize(c[0:1], s[1:2]), atol=1e-5)
        loss = icl_loss(grid, InstanceEmbedder(), ProjectionHeads())
    assert torch.isfinite(loss)
    with pytest.raises(ConfigError):
        build_grid(c[:1], s[:1], gen)
    with pytest.raises(ConfigError):
        build_grid(c, s[:1], gen)
    with pytest.raises(DimensionError):
        StylizationGrid(torch.zeros(2, 3, 3, 4, 4))

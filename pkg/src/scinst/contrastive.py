"""Instance-based contrastive learning over an n x n stylization grid.

Grid entry (i, j) is content j rendered in style i. For an anchor (i, j):

* style view: positives (i, j') with j' != j, compared through the style head;
* content view: positives (i', j) with i' != i, through the content head;
* both views: negatives (i', j') with i' != i and j' != j.

Each (anchor, positive) pair contributes an InfoNCE term
-log(e^{s_ap} / (e^{s_ap} + sum_neg e^{s_an})) with s = cosine / tau.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .gradcheck import GradCheckReport, check_gradient

DEFAULT_TAU = 0.3
EMBED_DIM = 512
PROJ_DIM = 128
DEFAULT_EMBEDDER_SEED = 4321


@dataclass
class StylizationGrid:
    images: torch.Tensor  # (n, n, 3, H, W), [i, j] = style i applied to content j

    def __post_init__(self):
        if self.images.dim() != 5 or self.images.shape[0] != self.images.shape[1]:
            raise DimensionError(f"grid must be (n, n, 3, H, W), got {tuple(self.images.shape)}")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def entry(self, style_idx: int, content_idx: int) -> torch.Tensor:
        return self.images[style_idx, content_idx].unsqueeze(0)

    def flat(self) -> torch.Tensor:
        return self.images.reshape(-1, *self.images.shape[2:])


class InstanceEmbedder(nn.Module):
    """Frozen convolutional stand-in for a CLIP image encoder.

    Pools channel means and standard deviations of the last conv stage, so the
    code carries both layout and texture statistics. Raw pooled statistics of
    a random conv net are nearly collinear across images, so they are
    standardized with fixed statistics of a seeded bank of random smooth
    images before the final projection.
    """

    name = "conv-standin-v2"

    def __init__(self, dim: int = EMBED_DIM, seed: int = DEFAULT_EMBEDDER_SEED, bank_size: int = 64):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 32, 4, 2, 1), nn.ReLU(),
                nn.Conv2d(32, 64, 4, 2, 1), nn.ReLU(),
                nn.Conv2d(64, 128, 4, 2, 1), nn.ReLU(),
                nn.Conv2d(128, 256, 3, 1, 1), nn.ReLU(),
            )
            self.fc = nn.Linear(512, dim)
            bank = F.interpolate(torch.rand(bank_size, 3, 8, 8), size=(64, 64), mode="bilinear",
                                 align_corners=False)
            bank = bank + 0.1 * torch.randn(bank_size, 3, 64, 64)
        with torch.no_grad():
            stats = self._stats(bank.clamp(0, 1))
        self.register_buffer("center", stats.mean(0))
        self.register_buffer("scale", stats.std(0) + 1e-6)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def _stats(self, img: torch.Tensor) -> torch.Tensor:
        h = self.net(img * 2.0 - 1.0).flatten(2)
        return torch.cat([h.mean(-1), (h.var(-1, unbiased=False) + 1e-6).sqrt()], dim=1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.fc((self._stats(img) - self.center) / self.scale)


class ClipImageEncoder(nn.Module):
    """Adapter for a pretrained CLIP visual tower (anything with ``encode_image``).

    Inputs in [0, 1] are resized to ``resolution`` and normalized with the CLIP
    statistics; the wrapped model is frozen.
    """

    _MEAN = (0.48145466, 0.4578275, 0.40821073)
    _STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, clip_model: nn.Module, resolution: int = 224, name: str = "clip"):
        super().__init__()
        self.clip = clip_model
        self.resolution = resolution
        self.name = name
        self.register_buffer("mean", torch.tensor(self._MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self._STD).view(1, 3, 1, 1))
        for p in self.clip.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(img, size=(self.resolution,) * 2, mode="bicubic", align_corners=False)
        return self.clip.encode_image((x - self.mean) / self.std).float()


def embed_instance(img: torch.Tensor, embedder: nn.Module) -> torch.Tensor:
    if img.dim() != 4 or img.shape[1] != 3:
        raise DimensionError(f"embedder expects (N, 3, H, W), got {tuple(img.shape)}")
    return embedder(img)


class ProjectionHeads(nn.Module):
    """Style and content projection MLPs with L2-normalized outputs."""

    def __init__(self, in_dim: int = EMBED_DIM, hidden: int = 256, out_dim: int = PROJ_DIM):
        super().__init__()
        self.style = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))
        self.content = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, embeddings: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return (F.normalize(self.style(embeddings), dim=-1),
                F.normalize(self.content(embeddings), dim=-1))


def build_grid(contents, styles, generator) -> StylizationGrid:
    """Stylize every (content, style) combination of two equally sized sets."""
    contents = _as_batch(contents)
    styles = _as_batch(styles)
    n = contents.shape[0]
    if styles.shape[0] != n:
        raise ConfigError(f"grid needs as many styles as contents ({styles.shape[0]} vs {n})")
    if n < 2:
        raise ConfigError("contrastive grid needs n >= 2; with n = 1 no positives exist")
    return StylizationGrid(generator.stylize_grid(contents, styles))


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    return torch.cat(list(images), dim=0)


def grid_masks(n: int, view: str) -> Tuple[torch.Tensor, torch.Tensor]:
    """Boolean (n*n, n*n) positive and negative masks for flat index i*n + j."""
    idx = torch.arange(n * n)
    i, j = idx // n, idx % n
    same_i = i[:, None] == i[None, :]
    same_j = j[:, None] == j[None, :]
    if view == "style":
        pos = same_i & ~same_j
    elif view == "content":
        pos = same_j & ~same_i
    else:
        raise ConfigError(f"view must be 'style' or 'content', got {view!r}")
    return pos, ~same_i & ~same_j


def _pairwise_sims(flat: torch.Tensor) -> torch.Tensor:
    # elementwise product + reduce: each pair's value is independent of its position
    return (flat[:, None, :] * flat[None, :, :]).sum(-1)


def view_loss(codes: torch.Tensor, view: str, tau: float = DEFAULT_TAU, literal: bool = False) -> torch.Tensor:
    """InfoNCE for one view. ``codes`` is (n, n, d), [i, j] the code of style i on content j.

    Every reduction runs over sorted values, so relabeling grid rows or columns
    leaves the result bit-identical.
    """
    if codes.dim() != 3 or codes.shape[0] != codes.shape[1]:
        raise DimensionError(f"codes must be (n, n, d), got {tuple(codes.shape)}")
    n = codes.shape[0]
    if n < 2:
        raise ConfigError("contrastive loss needs n >= 2")
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    flat = codes.reshape(n * n, -1)
    sims = _pairwise_sims(flat) / tau
    pos_mask, neg_mask = grid_masks(n, view)
    if literal:
        # every exponent uses the anchor's inner product with itself
        self_sim = sims.diagonal()[:, None]
        pos = self_sim.expand(n * n, n - 1)
        neg = self_sim.expand(n * n, (n - 1) ** 2)
    else:
        pos = sims[pos_mask].view(n * n, n - 1)
        neg = sims[neg_mask].view(n * n, (n - 1) ** 2)
    neg_lse = torch.logsumexp(neg.sort(dim=1).values, dim=1, keepdim=True)
    terms = torch.logaddexp(pos, neg_lse) - pos
    return terms.flatten().sort().values.sum() / terms.numel()


def icl_loss_from_codes(style_codes: torch.Tensor, content_codes: torch.Tensor, tau: float = DEFAULT_TAU,
                        literal: bool = False) -> torch.Tensor:
    return view_loss(style_codes, "style", tau, literal) + view_loss(content_codes, "content", tau, literal)


def grid_codes(grid: StylizationGrid, embedder: nn.Module, heads: ProjectionHeads):
    n = grid.n
    style, content = heads(embed_instance(grid.flat(), embedder))
    return style.view(n, n, -1), content.view(n, n, -1)


def icl_loss(grid: StylizationGrid, embedder: nn.Module, heads: ProjectionHeads, tau: float = DEFAULT_TAU,
             literal: bool = False) -> torch.Tensor:
    if grid.n < 2:
        raise ConfigError("contrastive loss needs n >= 2")
    return icl_loss_from_codes(*grid_codes(grid, embedder, heads), tau=tau, literal=literal)


def icl_gradient_check(style_codes: torch.Tensor, content_codes: torch.Tensor, tau: float = DEFAULT_TAU,
                       tolerance: float = 1e-3) -> GradCheckReport:
    """Autograd vs central differences for the loss w.r.t. projected codes (float64)."""
    return check_gradient(lambda s, c: icl_loss_from_codes(s, c, tau),
                          [style_codes.double(), content_codes.double()], "icl_loss", tolerance=tolerance)

"""Instance statistics, AdaIN, the style transformer and the SCIN layer."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

DEFAULT_EPS = 1e-5
# channels entering decoder blocks 1..4 (deepest first)
DECODER_CHANNELS = (512, 128, 64, 32)


@dataclass
class InstanceStats:
    mu: torch.Tensor
    sigma: torch.Tensor
    epsilon: float


@dataclass
class AffineParams:
    gamma: torch.Tensor
    beta: torch.Tensor


def instance_stats(x: torch.Tensor, epsilon: float = DEFAULT_EPS) -> InstanceStats:
    """Per (sample, channel) spatial mean and std, with ``epsilon`` inside the root.

    The variance is the biased (1/HW) estimator.
    """
    if x.dim() != 4:
        raise DimensionError(f"expected (N, C, H, W), got {tuple(x.shape)}")
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = (x - mu).pow(2).mean(dim=(2, 3), keepdim=True)
    return InstanceStats(mu, torch.sqrt(var + epsilon), epsilon)


def instance_norm(x: torch.Tensor, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    st = instance_stats(x, epsilon)
    return (x - st.mu) / st.sigma


def adain(content: torch.Tensor, style: torch.Tensor, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    """Give ``content`` the channel-wise mean and std of ``style``.

    Spatial sizes may differ; batch and channel counts must match.
    """
    if content.shape[:2] != style.shape[:2]:
        raise DimensionError(
            f"AdaIN needs matching (N, C): content {tuple(content.shape[:2])}, style {tuple(style.shape[:2])}"
        )
    s = instance_stats(style, epsilon)
    return s.sigma * instance_norm(content, epsilon) + s.mu


def scin_apply(content: torch.Tensor, affine: AffineParams, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    """gamma * IN(content) + beta, broadcast over space."""
    C = content.shape[1]
    if affine.gamma.shape[1] != C or affine.beta.shape[1] != C:
        raise DimensionError(
            f"affine params have {affine.gamma.shape[1]}/{affine.beta.shape[1]} channels, features have {C}"
        )
    return affine.gamma * instance_norm(content, epsilon) + affine.beta


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention split over ``heads``.

    Query/key/value inputs are (N, L, C). Used both by the style transformer
    and by the low-frequency mixer of the perception encoder.
    """

    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"token dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.d_head = dim, heads, dim // heads
        self.w_q = nn.Linear(dim, dim, bias=bias)
        self.w_k = nn.Linear(dim, dim, bias=bias)
        self.w_v = nn.Linear(dim, dim, bias=bias)
        self.w_o = nn.Linear(dim, dim, bias=bias)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        N, L, _ = t.shape
        return t.view(N, L, self.heads, self.d_head).transpose(1, 2)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
        """Attention over already-projected q, k, v. Returns (output, weights)."""
        N, L, C = q.shape
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.d_head)
        weights = scores.softmax(dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(N, L, C)
        return self.w_o(out), weights

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"token dim {x.shape[-1]} != attention dim {self.dim}")
        out, weights = self.attend(self.w_q(x), self.w_k(x), self.w_v(x))
        return (out, weights) if return_weights else out


class StyleTransformer(nn.Module):
    """One post-norm encoder block.

    Y' = LN(MSA(Q, K, V) + R),  Y = LN(FFN(Y') + Y')

    where the residual R is the projected query Q by default
    (``residual="query"``) or the raw input tokens (``residual="input"``).
    """

    def __init__(self, dim: int = 512, heads: int = 8, ffn_dim: int | None = None, residual: str = "query"):
        super().__init__()
        if residual not in ("query", "input"):
            raise ConfigError(f"residual must be 'query' or 'input', got {residual!r}")
        self.residual = residual
        self.attn = MultiHeadAttention(dim, heads)
        ffn_dim = ffn_dim or 2 * dim
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def attention_block(self, z: torch.Tensor, return_weights: bool = False):
        """MSA plus residual, before the first layer norm."""
        q = self.attn.w_q(z)
        out, weights = self.attn.attend(q, self.attn.w_k(z), self.attn.w_v(z))
        y = out + (q if self.residual == "query" else z)
        return (y, weights) if return_weights else y

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        y = self.norm1(self.attention_block(z))
        return self.norm2(self.ffn(y) + y)


def style_encode(tokens: torch.Tensor, transformer: StyleTransformer) -> torch.Tensor:
    if tokens.dim() != 3 or tokens.shape[1] < 1:
        raise DimensionError(f"style sequence must be (N, L>=1, C), got {tuple(tokens.shape)}")
    return transformer(tokens)


class StyleTokenizer(nn.Module):
    """Non-overlapping patch embedding plus learned positional embeddings.

    The positional table is stored on a ``base_grid`` and bilinearly
    resampled to whatever token grid an input produces, so the same
    tokenizer serves every pyramid level.
    """

    def __init__(self, dim: int = 512, patch: int = 8, base_grid: int = 8, in_channels: int = 3):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(1, dim, base_grid, base_grid) * 0.02)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4:
            raise DimensionError(f"style level must be (N, 3, H, W), got {tuple(img.shape)}")
        H, W = img.shape[-2:]
        if H < self.patch or W < self.patch:
            # coarse levels of small images: stretch up to a single patch
            img = F.interpolate(img, size=(max(H, self.patch), max(W, self.patch)), mode="bilinear",
                                align_corners=False)
        x = self.proj(img)
        pos = self.pos
        if pos.shape[-2:] != x.shape[-2:]:
            pos = F.interpolate(pos, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return (x + pos).flatten(2).transpose(1, 2)


class AffineHeads(nn.Module):
    """Per-decoder-scale FFN pairs mapping the pooled style code to (gamma, beta).

    The output layers start at zero weight with bias 1 (gamma) and 0 (beta),
    so a fresh SCIN layer is exactly instance normalization.
    """

    def __init__(self, dim: int = 512, channels: Sequence[int] = DECODER_CHANNELS, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.channels = tuple(channels)
        self.gamma = nn.ModuleList(self._head(dim, hidden, c, 1.0) for c in self.channels)
        self.beta = nn.ModuleList(self._head(dim, hidden, c, 0.0) for c in self.channels)

    @staticmethod
    def _head(dim, hidden, out, bias_init):
        head = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, out))
        nn.init.zeros_(head[2].weight)
        nn.init.constant_(head[2].bias, bias_init)
        return head

    def forward(self, encoded: torch.Tensor, layer_index: int) -> AffineParams:
        if not 1 <= layer_index <= len(self.channels):
            raise ConfigError(f"layer_index must be in 1..{len(self.channels)}, got {layer_index}")
        pooled = encoded.mean(dim=1)
        k = layer_index - 1
        gamma = self.gamma[k](pooled)[..., None, None]
        beta = self.beta[k](pooled)[..., None, None]
        return AffineParams(gamma, beta)


class SCIN(nn.Module):
    """Style-conditioned instance normalization shared across decoder scales."""

    def __init__(
        self,
        dim: int = 512,
        heads: int = 8,
        patch: int = 8,
        base_grid: int = 8,
        channels: Sequence[int] = DECODER_CHANNELS,
        residual: str = "query",
        epsilon: float = DEFAULT_EPS,
    ):
        super().__init__()
        self.epsilon = epsilon
        self.tokenizer = StyleTokenizer(dim, patch, base_grid)
        self.transformer = StyleTransformer(dim, heads, residual=residual)
        self.heads = AffineHeads(dim, channels)

    def affine(self, style_level: torch.Tensor, layer_index: int) -> AffineParams:
        tokens = self.tokenizer(style_level)
        return self.heads(style_encode(tokens, self.transformer), layer_index)

    def forward(self, features: torch.Tensor, style_level: torch.Tensor, layer_index: int) -> torch.Tensor:
        return scin_apply(features, self.affine(style_level, layer_index), self.epsilon)


def realign(features: torch.Tensor, style_level: torch.Tensor, layer_index: int, scin: SCIN) -> torch.Tensor:
    return scin(features, style_level, layer_index)


def affine_from_style_features(style: torch.Tensor, epsilon: float = DEFAULT_EPS) -> Tuple[torch.Tensor, torch.Tensor]:
    """(sigma, mu) of a style feature map, i.e. the affine AdaIN would use."""
    st = instance_stats(style, epsilon)
    return st.sigma, st.mu

"""Stylization network: content/style encoding, cross-attention fusion, SCIN decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .extractors import PerceptionEncoder, PerceptualExtractor, VGGStyleEncoder
from .imaging import StylePyramid, build_pyramid, check_divisible
from .scin import DECODER_CHANNELS, DEFAULT_EPS, SCIN, AffineParams, instance_norm, scin_apply

STYLE_ENCODERS = ("pe", "fixed_vgg", "learnable_vgg")


class PaddedConv(nn.Conv2d):
    """3x3 conv with reflect padding; 1-pixel maps, which cannot reflect, replicate."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__(c_in, c_out, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mode = "reflect" if min(x.shape[-2:]) > 1 else "replicate"
        return super().forward(F.pad(x, (1, 1, 1, 1), mode=mode))


@dataclass
class ModelConfig:
    dim: int = 512
    heads: int = 8
    token_patch: int = 8
    token_grid: int = 8
    pe_patch: int = 4
    decoder_channels: Sequence[int] = DECODER_CHANNELS
    style_encoder: str = "pe"
    use_scin: bool = True
    residual: str = "query"
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if self.style_encoder not in STYLE_ENCODERS:
            raise ConfigError(f"style_encoder must be one of {STYLE_ENCODERS}, got {self.style_encoder!r}")
        self.decoder_channels = tuple(self.decoder_channels)
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder needs exactly 4 channel widths")


@dataclass
class Encoding:
    """Per-image features: relu4_1 content maps, style maps, SCIN affines."""

    content: Optional[torch.Tensor]
    style: Optional[torch.Tensor]
    affines: Optional[List[AffineParams]]


def grid_indices(n_styles: int, n_contents: int):
    """(style_index, content_index) of the flattened grid, row-major over styles."""
    return (torch.arange(n_styles).repeat_interleave(n_contents),
            torch.arange(n_contents).repeat(n_styles))


class CrossAttentionFusion(nn.Module):
    """SANet-style attention: queries from normalized content, keys from
    normalized style, values from raw style; result added to the content."""

    def __init__(self, channels: int = 512, epsilon: float = DEFAULT_EPS):
        super().__init__()
        self.epsilon = epsilon
        self.f = nn.Conv2d(channels, channels, 1)
        self.g = nn.Conv2d(channels, channels, 1)
        self.h = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, content: torch.Tensor, style: torch.Tensor, return_weights: bool = False):
        if content.shape[:2] != style.shape[:2]:
            raise DimensionError(
                f"fusion needs matching (N, C): content {tuple(content.shape)}, style {tuple(style.shape)}"
            )
        N, C, H, W = content.shape
        q = self.f(instance_norm(content, self.epsilon)).flatten(2).transpose(1, 2)
        k = self.g(instance_norm(style, self.epsilon)).flatten(2)
        v = self.h(style).flatten(2).transpose(1, 2)
        weights = torch.softmax(q @ k / math.sqrt(C), dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(N, C, H, W)
        fused = content + self.out(attended)
        return (fused, weights) if return_weights else fused


def cross_attention_fuse(content: torch.Tensor, style: torch.Tensor, fusion: CrossAttentionFusion) -> torch.Tensor:
    return fusion(content, style)


class Decoder(nn.Module):
    """Three (3x3 conv, ReLU, nearest x2) blocks and a final 3x3 conv to RGB.

    Convolving before upsampling keeps each block's conv at the coarser
    resolution, four times cheaper than the reverse order.

    Before block i the features are realigned by SCIN using affine parameters
    for layer i; pass ``affines=None`` to skip realignment.
    """

    def __init__(self, channels: Sequence[int] = DECODER_CHANNELS):
        super().__init__()
        channels = tuple(channels)
        self.channels = channels
        blocks = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks.append(nn.Sequential(
                PaddedConv(c_in, c_out),
                nn.ReLU(),
                nn.Upsample(scale_factor=2, mode="nearest"),
            ))
        blocks.append(PaddedConv(channels[-1], 3))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor, affines: Optional[List[AffineParams]] = None,
                epsilon: float = DEFAULT_EPS) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            if affines is not None:
                x = scin_apply(x, affines[i], epsilon)
            x = block(x)
        return torch.sigmoid(x)


class Generator(nn.Module):
    """Full stylization network.

    The frozen perceptual extractor is held by reference and is not a
    registered submodule: it is excluded from ``parameters()`` and
    ``state_dict()``.
    """

    def __init__(self, extractor: PerceptualExtractor, config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        object.__setattr__(self, "extractor", extractor)
        if config.style_encoder == "pe":
            self.style_encoder = PerceptionEncoder(config.dim, config.heads, config.pe_patch)
        else:
            self.style_encoder = VGGStyleEncoder(extractor, learnable=config.style_encoder == "learnable_vgg")
        self.fusion = CrossAttentionFusion(config.dim, config.epsilon)
        self.scin = None
        if config.use_scin:
            self.scin = SCIN(config.dim, config.heads, config.token_patch, config.token_grid,
                             config.decoder_channels, config.residual, config.epsilon)
        self.decoder = Decoder(config.decoder_channels)

    # -- per-image encodings ------------------------------------------------
    def content_features(self, content: torch.Tensor) -> torch.Tensor:
        return self.extractor(content, ["relu4_1"])["relu4_1"]

    def style_features(self, style: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(style).stage2

    def style_affines(self, pyramid: StylePyramid) -> Optional[List[AffineParams]]:
        """Affine params for decoder blocks 1..4, coarsest pyramid level first."""
        if self.scin is None:
            return None
        return [self.scin.affine(pyramid[len(pyramid) - 1 - i], i + 1) for i in range(len(pyramid))]

    def encode(self, images: torch.Tensor, content_features: Optional[torch.Tensor] = None) -> Encoding:
        """Everything the decoder needs from a set of images, in either role.

        ``content_features`` may pass precomputed relu4_1 maps of ``images``.
        """
        check_divisible(images, 8, "image")
        if content_features is None:
            content_features = self.content_features(images)
        return Encoding(content_features, self.style_features(images),
                        self.style_affines(build_pyramid(images)))

    def render(self, content_enc: Encoding, style_enc: Encoding,
               content_index: torch.Tensor, style_index: torch.Tensor) -> torch.Tensor:
        """Decode the pairs (content_enc[content_index[k]], style_enc[style_index[k]])."""
        f_c = content_enc.content.index_select(0, content_index)
        f_s = style_enc.style.index_select(0, style_index)
        affines = style_enc.affines
        if affines is not None:
            affines = [AffineParams(a.gamma.index_select(0, style_index), a.beta.index_select(0, style_index))
                       for a in affines]
        return self.decoder(self.fusion(f_c, f_s), affines, self.config.epsilon)

    def decode(self, fused: torch.Tensor, pyramid: StylePyramid) -> torch.Tensor:
        return self.decoder(fused, self.style_affines(pyramid), self.config.epsilon)

    # -- full passes --------------------------------------------------------
    def stylize(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        """Stylize each content image with the style image at the same batch index."""
        check_divisible(content, 8, "content")
        check_divisible(style, 8, "style")
        if content.shape[0] != style.shape[0]:
            raise DimensionError(f"batch mismatch: {content.shape[0]} contents vs {style.shape[0]} styles")
        fused = self.fusion(self.content_features(content), self.style_features(style))
        return self.decode(fused, build_pyramid(style))

    def stylize_pairs(self, contents: torch.Tensor, styles: torch.Tensor,
                      content_index: torch.Tensor, style_index: torch.Tensor) -> torch.Tensor:
        """Stylize pairs (contents[content_index[k]], styles[style_index[k]]).

        Encodings are computed once per distinct image and gathered, which is
        what makes the n x n grid affordable.
        """
        check_divisible(contents, 8, "content")
        check_divisible(styles, 8, "style")
        content_enc = Encoding(self.content_features(contents), None, None)
        style_enc = Encoding(None, self.style_features(styles), self.style_affines(build_pyramid(styles)))
        return self.render(content_enc, style_enc, content_index, style_index)

    def stylize_grid(self, contents: torch.Tensor, styles: torch.Tensor) -> torch.Tensor:
        """Returns (n_styles, n_contents, 3, H, W); entry [i, j] is content j in style i."""
        n_s, n_c = styles.shape[0], contents.shape[0]
        style_index, content_index = grid_indices(n_s, n_c)
        out = self.stylize_pairs(contents, styles, content_index, style_index)
        return out.view(n_s, n_c, *out.shape[1:])

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.stylize(content, style)


def stylize(content: torch.Tensor, style: torch.Tensor, generator: Generator) -> torch.Tensor:
    return generator.stylize(content, style)

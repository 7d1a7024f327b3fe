"""Feature extractors.

``PerceptualExtractor`` is a frozen VGG-19 trunk (up to relu5_1) used for
content features and for the perceptual losses. ``PerceptionEncoder`` is the
trainable style encoder built from parallel high/low frequency mixers.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .scin import MultiHeadAttention

LAYER_NAMES = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
VGG_WIDTHS = (64, 128, 256, 512, 512)
# convs per block in VGG-19; the trunk stops after the first conv of block 5
_VGG19_DEPTHS = (2, 2, 4, 4, 1)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_VGG_SEED = 1234


def _vgg_trunk(widths: Sequence[int]):
    layers, taps, in_ch = [], {}, 3
    for block, (width, depth) in enumerate(zip(widths, _VGG19_DEPTHS)):
        if block > 0:
            # ceil_mode keeps 1x1 maps alive, so tiny gradient-check inputs work
            layers.append(nn.MaxPool2d(2, 2, ceil_mode=True))
        for k in range(depth):
            layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU()]
            in_ch = width
            if k == 0:
                taps[len(layers) - 1] = LAYER_NAMES[block]
    return nn.Sequential(*layers), taps


class PerceptualExtractor(nn.Module):
    """VGG-19 features at relu1_1 ... relu5_1.

    Layer indices match ``torchvision.models.vgg19().features`` so a
    torchvision checkpoint loads directly via ``load_pretrained``. Without one,
    weights come from a fixed-seed Kaiming init. Parameters are frozen.
    """

    def __init__(self, widths: Sequence[int] = VGG_WIDTHS, seed: int = DEFAULT_VGG_SEED,
                 weights_path: Optional[str] = None):
        super().__init__()
        self.features, self._taps = _vgg_trunk(widths)
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        gen = torch.Generator().manual_seed(seed)
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.normal_(0.0, (2.0 / fan_out) ** 0.5, generator=gen)
                    m.bias.zero_()
        if weights_path is not None:
            self.load_pretrained(weights_path)
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def load_pretrained(self, path: str) -> None:
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items()}
        own = self.features.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise ConfigError(f"pretrained VGG checkpoint {path} lacks {missing[:3]}...")
        self.features.load_state_dict({k: state[k] for k in own})

    def train(self, mode: bool = True):
        # stays in eval mode; there is nothing mode dependent but keep it explicit
        return super().train(False)

    def forward(self, img: torch.Tensor, layers: Iterable[str] = LAYER_NAMES) -> Dict[str, torch.Tensor]:
        layers = set(layers)
        unknown = layers - set(LAYER_NAMES)
        if unknown:
            raise ConfigError(f"unknown VGG layer(s): {sorted(unknown)}")
        if img.dim() != 4 or img.shape[1] != 3:
            raise DimensionError(f"perceptual extractor expects (N, 3, H, W), got {tuple(img.shape)}")
        x = (img - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        out = {}
        for idx, layer in enumerate(self.features):
            x = layer(x)
            name = self._taps.get(idx)
            if name in layers:
                out[name] = x
                if len(out) == len(layers):
                    break
        return out


def extract_perceptual(img: torch.Tensor, layers: Iterable[str], extractor: PerceptualExtractor):
    return extractor(img, layers)


@dataclass
class StyleFeature:
    stage1: Optional[torch.Tensor]
    stage2: torch.Tensor


class HighFreqMixer(nn.Module):
    """Max-pool + per-position linear on one half, linear + depthwise 3x3 on the other."""

    def __init__(self, channels: int):
        super().__init__()
        self.pool = nn.MaxPool2d(3, stride=1, padding=1)
        self.fc1 = nn.Conv2d(channels, channels, 1)
        self.fc2 = nn.Conv2d(channels, channels, 1)
        self.dwconv = nn.Conv2d(channels, channels, 3, stride=1, padding=1, groups=channels)

    def forward(self, h1: torch.Tensor, h2: torch.Tensor):
        if h1.shape[-2:] != h2.shape[-2:]:
            raise DimensionError(f"high-frequency inputs differ in size: {tuple(h1.shape)} vs {tuple(h2.shape)}")
        return self.fc1(self.pool(h1)), self.dwconv(self.fc2(h2))


class LowFreqMixer(nn.Module):
    """Average-pool, self-attention over the pooled grid, nearest upsample back."""

    def __init__(self, channels: int, heads: int = 8, pool: int = 2):
        super().__init__()
        self.pool = pool
        self.attn = MultiHeadAttention(channels, heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        N, C, H, W = x.shape
        # ceil mode: odd or tiny grids get a partial last window instead of failing
        p = F.avg_pool2d(x, self.pool, ceil_mode=True)
        h, w = p.shape[-2:]
        tokens = self.attn(p.flatten(2).transpose(1, 2))
        y = tokens.transpose(1, 2).reshape(N, C, h, w)
        return F.interpolate(y, size=(H, W), mode="nearest")


class PEStage(nn.Module):
    """Channel split into high (first half) and low (second half) frequency paths.

    The high half is split again into two quarters for the two high mixers.
    Output is concat(low, high1, high2), so channels [0, C/2) come from the low
    path only.
    """

    def __init__(self, channels: int = 512, heads: int = 8, pool: int = 2):
        super().__init__()
        if channels % 4:
            raise ConfigError(f"PE stage channels must be divisible by 4, got {channels}")
        self.channels = channels
        self.high = HighFreqMixer(channels // 4)
        self.low = LowFreqMixer(channels // 2, heads, pool)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        C = x.shape[1]
        if C % 2:
            raise DimensionError(f"PE stage needs an even channel count, got {C}")
        if C != self.channels:
            raise DimensionError(f"PE stage built for {self.channels} channels, got {C}")
        q = C // 4
        h1, h2, low = x[:, :q], x[:, q:2 * q], x[:, 2 * q:]
        y_h1, y_h2 = self.high(h1, h2)
        return torch.cat([self.low(low), y_h1, y_h2], dim=1)


class PerceptionEncoder(nn.Module):
    """Style encoder: 4x4 patch embed -> stage -> 2x2 stride-2 embed -> stage."""

    def __init__(self, dim: int = 512, heads: int = 8, patch: int = 4):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.stage1 = PEStage(dim, heads)
        self.down = nn.Conv2d(dim, dim, kernel_size=2, stride=2)
        self.stage2 = PEStage(dim, heads)

    def forward(self, style: torch.Tensor) -> StyleFeature:
        if style.dim() != 4 or style.shape[1] != 3:
            raise DimensionError(f"PE expects (N, 3, H, W), got {tuple(style.shape)}")
        H, W = style.shape[-2:]
        if H % 8 or W % 8:
            raise DimensionError(f"PE input size {H}x{W} must be divisible by 8")
        s1 = self.stage1(self.patch_embed(style))
        s2 = self.stage2(self.down(s1))
        return StyleFeature(s1, s2)


def pe_forward(style: torch.Tensor, encoder: PerceptionEncoder) -> StyleFeature:
    return encoder(style)


class VGGStyleEncoder(nn.Module):
    """relu4_1 of a VGG trunk as the style feature (ablation replacement for PE).

    With ``learnable=False`` it borrows the shared frozen extractor without
    registering it, so its weights never enter optimizers or checkpoints.
    With ``learnable=True`` it owns a trainable copy of the trunk up to relu4_1.
    """

    def __init__(self, extractor: PerceptualExtractor, learnable: bool = False):
        super().__init__()
        self.learnable = learnable
        if learnable:
            trunk = copy.deepcopy(extractor)
            cut = max(i for i, n in trunk._taps.items() if n == "relu4_1") + 1
            trunk.features = trunk.features[:cut]
            for p in trunk.parameters():
                p.requires_grad_(True)
            self.trunk = trunk
        else:
            object.__setattr__(self, "trunk", extractor)

    def forward(self, style: torch.Tensor) -> StyleFeature:
        return StyleFeature(None, self.trunk(style, ["relu4_1"])["relu4_1"])

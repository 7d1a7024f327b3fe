"""Perceptual, adversarial and identity losses and the weighted objective."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, Iterable, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingError
from .extractors import LAYER_NAMES, PerceptualExtractor
from .scin import DEFAULT_EPS, instance_stats

CONTENT_LAYERS = ("relu4_1", "relu5_1")
STYLE_LAYERS = LAYER_NAMES
D_CLAMP = 1e-7

Features = Dict[str, torch.Tensor]


@dataclass
class LossWeights:
    style: float = 1.0
    content: float = 1.0
    identity: float = 5.0
    adversarial: float = 1.0
    contrastive: float = 0.3
    identity_pixel: float = 50.0
    identity_feature: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")

    def combine(self, style, content, identity, adversarial_g, contrastive):
        """Weighted sum in a fixed order; the single definition of the total."""
        return (self.style * style + self.content * content + self.identity * identity
                + self.adversarial * adversarial_g + self.contrastive * contrastive)


@dataclass
class LossBundle:
    content: torch.Tensor
    style: torch.Tensor
    identity: torch.Tensor
    adversarial_g: torch.Tensor
    adversarial_d: torch.Tensor
    contrastive: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


# -- perceptual ----------------------------------------------------------------

def content_loss_from_features(f_cs: Features, f_c: Features, layers: Iterable[str] = CONTENT_LAYERS):
    return sum(F.mse_loss(f_cs[k], f_c[k]) for k in layers)


def style_loss_from_features(f_cs: Features, f_s: Features, layers: Iterable[str] = STYLE_LAYERS,
                             epsilon: float = DEFAULT_EPS):
    total = 0.0
    for k in layers:
        a, b = instance_stats(f_cs[k], epsilon), instance_stats(f_s[k], epsilon)
        total = total + F.mse_loss(a.mu, b.mu) + F.mse_loss(a.sigma, b.sigma)
    return total


def content_loss(stylized: torch.Tensor, content: torch.Tensor, extractor: PerceptualExtractor):
    """Mean squared feature distance at relu4_1 and relu5_1, summed over layers."""
    return content_loss_from_features(extractor(stylized, CONTENT_LAYERS), extractor(content, CONTENT_LAYERS))


def style_loss(stylized: torch.Tensor, style: torch.Tensor, extractor: PerceptualExtractor):
    """Squared distance of channel means and stds at relu1_1 ... relu5_1."""
    return style_loss_from_features(extractor(stylized, STYLE_LAYERS), extractor(style, STYLE_LAYERS))


# -- adversarial -----------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    """Four stride-2 4x4 convs (64 -> 512 channels) and a 3x3 conv to one logit map."""

    def __init__(self, base: int = 64):
        super().__init__()
        layers, c_in = [], 3
        for k in range(4):
            c_out = base * 2 ** k
            layers.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            if k > 0:
                layers.append(nn.InstanceNorm2d(c_out, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            c_in = c_out
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """Per-patch probability of being a real painting."""
        return torch.sigmoid(self.net(img * 2.0 - 1.0))


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def discriminator_loss(real: torch.Tensor, fake: torch.Tensor, disc: nn.Module) -> torch.Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))]; fakes are detached."""
    p_real = disc(real).clamp(D_CLAMP, 1 - D_CLAMP)
    p_fake = disc(fake.detach()).clamp(D_CLAMP, 1 - D_CLAMP)
    return -torch.log(p_real).mean() - torch.log1p(-p_fake).mean()


def generator_adversarial_loss(fake: torch.Tensor, disc: nn.Module) -> torch.Tensor:
    """Non-saturating -E[log D(fake)], with the discriminator frozen."""
    with frozen(disc):
        p_fake = disc(fake).clamp(D_CLAMP, 1 - D_CLAMP)
    return -torch.log(p_fake).mean()


def adversarial_losses(fake: torch.Tensor, real: torch.Tensor, disc: nn.Module) -> Tuple[torch.Tensor, torch.Tensor]:
    """(g_loss, d_loss). Gradients of d_loss reach only ``disc``; of g_loss only the generator."""
    return generator_adversarial_loss(fake, disc), discriminator_loss(real, fake, disc)


# -- identity --------------------------------------------------------------------

def identity_loss_from_features(cc, content, ss, style, f_cc: Features, f_c: Features, f_ss: Features,
                                f_s: Features, w_pixel: float = 50.0, w_feature: float = 1.0):
    """Identity loss given self-stylizations cc = G(c, c), ss = G(s, s) and
    extractor features of all four images."""
    pixel = F.mse_loss(cc, content) + F.mse_loss(ss, style)
    feature = sum(F.mse_loss(f_cc[k], f_c[k]) + F.mse_loss(f_ss[k], f_s[k]) for k in STYLE_LAYERS)
    return w_pixel * pixel + w_feature * feature


def identity_loss(generator: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], content: torch.Tensor,
                  style: torch.Tensor, extractor: PerceptualExtractor, w_pixel: float = 50.0,
                  w_feature: float = 1.0):
    """Penalize G(c, c) != c and G(s, s) != s in pixels and at all five VGG layers."""
    cc, ss = generator(content, content), generator(style, style)
    return identity_loss_from_features(cc, content, ss, style, extractor(cc, STYLE_LAYERS),
                                       extractor(content, STYLE_LAYERS), extractor(ss, STYLE_LAYERS),
                                       extractor(style, STYLE_LAYERS), w_pixel, w_feature)


def literal_identity_loss(stylized: torch.Tensor, content: torch.Tensor, style: torch.Tensor,
                          extractor: PerceptualExtractor, w_pixel: float = 50.0, w_feature: float = 1.0):
    """Literal variant: pulls the stylization toward both inputs at once.

    Kept for comparison only; it fights the style loss.
    """
    pixel = F.mse_loss(stylized, content) + F.mse_loss(stylized, style)
    f_cs = extractor(stylized, STYLE_LAYERS)
    f_c, f_s = extractor(content, STYLE_LAYERS), extractor(style, STYLE_LAYERS)
    feature = sum(F.mse_loss(f_cs[k], f_c[k]) + F.mse_loss(f_cs[k], f_s[k]) for k in STYLE_LAYERS)
    return w_pixel * pixel + w_feature * feature


# -- objective -------------------------------------------------------------------

def total_loss(content, style, identity, adversarial_g, adversarial_d, contrastive,
               weights: LossWeights | None = None) -> LossBundle:
    weights = weights or LossWeights()
    parts = dict(content=content, style=style, identity=identity, adversarial_g=adversarial_g,
                 adversarial_d=adversarial_d, contrastive=contrastive)
    parts = {k: v if isinstance(v, torch.Tensor) else torch.tensor(float(v), dtype=torch.float64)
             for k, v in parts.items()}
    for name, value in parts.items():
        if not math.isfinite(float(value.detach())):
            raise TrainingError(f"loss component '{name}' is not finite ({float(value.detach())})")
    total = weights.combine(parts["style"], parts["content"], parts["identity"], parts["adversarial_g"],
                            parts["contrastive"])
    return LossBundle(total=total, **parts)

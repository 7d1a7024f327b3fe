"""Synthetic content and style images for smoke tests and the overfit run.

Contents are smooth shapes on gradient backgrounds; styles are colourful
periodic textures. Both are deterministic in ``seed``.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import List

import numpy as np
import torch

from .imaging import save_image


def content_image(size: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.2, 0.8, 3)
    tilt = rng.uniform(-0.3, 0.3, 3)
    img = base[:, None, None] + tilt[:, None, None] * (xx + yy)[None] / 2
    for _ in range(3):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(0.1, 0.3)
        mask = ((xx - cx) ** 2 + (yy - cy) ** 2) < r * r
        img[:, mask] = rng.uniform(0, 1, 3)[:, None]
    return torch.from_numpy(np.clip(img, 0, 1)).float().unsqueeze(0)


def style_image(size: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed + 10_000)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((3, size, size))
    for ch in range(3):
        freq = rng.uniform(0.15, 0.8, 2)
        phase = rng.uniform(0, 2 * math.pi, 2)
        wave = np.sin(freq[0] * xx + phase[0]) * np.cos(freq[1] * yy + phase[1])
        img[ch] = rng.uniform(0.3, 0.7) + rng.uniform(0.2, 0.5) * wave
    img += rng.normal(0, 0.05, img.shape)
    return torch.from_numpy(np.clip(img, 0, 1)).float().unsqueeze(0)


def write_toy_dataset(root, n_content: int = 4, n_style: int = 4, size: int = 64, seed: int = 0):
    """Write PNGs to root/content and root/style; returns the two directories."""
    root = Path(root)
    dirs = root / "content", root / "style"
    for d in dirs:
        d.mkdir(parents=True, exist_ok=True)
    for k in range(n_content):
        save_image(content_image(size, seed + k), dirs[0] / f"c{k:02d}.png")
    for k in range(n_style):
        save_image(style_image(size, seed + k), dirs[1] / f"s{k:02d}.png")
    return dirs


def toy_batch(n: int, size: int = 64, seed: int = 0) -> List[torch.Tensor]:
    """(contents, styles), each (n, 3, size, size)."""
    return (torch.cat([content_image(size, seed + k) for k in range(n)]),
            torch.cat([style_image(size, seed + k) for k in range(n)]))

"""Measurements shared by the experiment scripts and the acceptance tests."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np
import torch

from .losses import STYLE_LAYERS, style_loss_from_features
from .training import ImageSet, TrainState

SMOOTH_WINDOW = 10


def smoothed(values: Sequence[float], window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average; entry t averages values[max(0, t-window+1) .. t]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    t = np.arange(len(v))
    lo = np.maximum(0, t - window + 1)
    return (c[t + 1] - c[lo]) / (t + 1 - lo)


def loss_drop(records: List[Dict], key: str = "total", start: int = 10) -> float:
    """Fractional drop of the smoothed loss from step ``start`` to the last step."""
    s = smoothed([r[key] for r in records])
    if len(s) <= start:
        raise ValueError(f"need more than {start} steps, got {len(s)}")
    return float(1.0 - s[-1] / s[start])


@torch.no_grad()
def pair_style_losses(state: TrainState, contents: torch.Tensor, styles: torch.Tensor):
    """(stylized, baseline) style losses for every (style i, content j) pair.

    Both are (n_styles, n_contents) arrays: the style loss of stylize(c_j, s_i)
    against s_i and of c_j itself against s_i.
    """
    gen, ext = state.generator, state.extractor
    was_training = gen.training
    gen.eval()
    try:
        grid = gen.stylize_grid(contents, styles)
    finally:
        gen.train(was_training)
    f_s = ext(styles, STYLE_LAYERS)
    f_c = ext(contents, STYLE_LAYERS)
    n_s, n_c = styles.shape[0], contents.shape[0]
    stylized, baseline = np.zeros((n_s, n_c)), np.zeros((n_s, n_c))
    for i in range(n_s):
        fs_i = {k: v[i:i + 1] for k, v in f_s.items()}
        f_out = ext(grid[i], STYLE_LAYERS)
        for j in range(n_c):
            stylized[i, j] = float(style_loss_from_features({k: v[j:j + 1] for k, v in f_out.items()}, fs_i))
            baseline[i, j] = float(style_loss_from_features({k: v[j:j + 1] for k, v in f_c.items()}, fs_i))
    return stylized, baseline


def overfit_report(state: TrainState, records: List[Dict]) -> Dict:
    cfg = state.config
    contents = ImageSet(cfg.content_dir, cfg.image_size).images
    styles = ImageSet(cfg.style_dir, cfg.image_size).images
    stylized, baseline = pair_style_losses(state, contents, styles)
    improved = stylized < baseline
    s = smoothed([r["total"] for r in records])
    return {
        "steps": len(records),
        "smoothed_total_step10": float(s[10]) if len(s) > 10 else None,
        "smoothed_total_final": float(s[-1]) if len(s) else None,
        "total_drop": loss_drop(records) if len(s) > 10 else None,
        "pairs_improved": int(improved.sum()),
        "pairs": int(improved.size),
        "style_loss_stylized": stylized.round(5).tolist(),
        "style_loss_content": baseline.round(5).tolist(),
    }

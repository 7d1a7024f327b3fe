"""Image I/O, cropping, style pyramids and dataset enumeration.

Images are float tensors of shape (N, 3, H, W) with values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DimensionError, ImageDecodeError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
PYRAMID_LEVELS = 4


@dataclass
class StylePyramid:
    """Multi-scale copies of a style image, finest level first."""

    levels: List[torch.Tensor]

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise DimensionError(f"pyramid needs {PYRAMID_LEVELS} levels, got {len(self.levels)}")

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)

    def index_select(self, index: torch.Tensor) -> "StylePyramid":
        """Gather batch entries from every level (used to expand styles over a grid)."""
        return StylePyramid([lvl.index_select(0, index) for lvl in self.levels])


def _check_image(img: torch.Tensor) -> None:
    if img.dim() != 4:
        raise DimensionError(f"expected (N, C, H, W), got shape {tuple(img.shape)}")
    if min(img.shape) < 1:
        raise DimensionError(f"all dimensions must be >= 1, got {tuple(img.shape)}")


def resize(img: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    _check_image(img)
    if tuple(img.shape[-2:]) == tuple(size):
        return img
    out = F.interpolate(img, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return out.clamp_(0.0, 1.0)


def load_image(path, size: Tuple[int, int] | None = None) -> torch.Tensor:
    """Read a PNG/JPEG as a (1, 3, H, W) tensor in [0, 1].

    ``size`` is (H, W); when given the image is bilinearly resized. When None
    the native resolution is kept.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    img = torch.from_numpy(arr.copy()).permute(2, 0, 1).unsqueeze(0).contiguous()
    if size is not None:
        img = resize(img, size)
    return img


def save_image(img: torch.Tensor, path) -> None:
    """Write a single (1, 3, H, W) image as an 8-bit PNG."""
    _check_image(img)
    if img.shape[0] != 1 or img.shape[1] != 3:
        raise DimensionError(f"save_image expects a (1, 3, H, W) tensor, got {tuple(img.shape)}")
    arr = img[0].detach().to("cpu", torch.float64).clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    arr = np.rint(arr * 255.0).astype(np.uint8)
    path = Path(path)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def crop_offsets(image_size: Tuple[int, int], size: Tuple[int, int], seed: int) -> Tuple[int, int]:
    """Top-left corner of the crop chosen by ``random_crop`` for this seed."""
    H, W = image_size
    h, w = size
    if h > H or w > W or h < 1 or w < 1:
        raise DimensionError(f"crop {size} does not fit in image {image_size}")
    gen = torch.Generator().manual_seed(int(seed))
    top = int(torch.randint(0, H - h + 1, (1,), generator=gen))
    left = int(torch.randint(0, W - w + 1, (1,), generator=gen))
    return top, left


def random_crop(img: torch.Tensor, size: Tuple[int, int], seed: int) -> torch.Tensor:
    _check_image(img)
    top, left = crop_offsets(tuple(img.shape[-2:]), size, seed)
    h, w = size
    return img[..., top:top + h, left:left + w].clone()


def build_pyramid(style: torch.Tensor) -> StylePyramid:
    """Four levels by repeated 2x2 area averaging; level 0 is the input itself."""
    _check_image(style)
    H, W = style.shape[-2:]
    if H % 8 or W % 8:
        raise DimensionError(f"style size {H}x{W} must be divisible by 8")
    levels = [style]
    for _ in range(PYRAMID_LEVELS - 1):
        levels.append(F.avg_pool2d(levels[-1], kernel_size=2, stride=2))
    return StylePyramid(levels)


def list_images(directory) -> List[Path]:
    """Image files in ``directory`` sorted lexicographically by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory does not exist: {directory}")
    return sorted(
        (p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()),
        key=lambda p: p.name,
    )


def load_dataset(directory, size: Tuple[int, int]) -> torch.Tensor:
    """Load every image of a directory at ``size`` into one (N, 3, H, W) tensor."""
    paths = list_images(directory)
    if not paths:
        return torch.empty(0, 3, *size)
    return torch.cat([load_image(p, size) for p in paths], dim=0)


def check_divisible(img: torch.Tensor, factor: int = 8, what: str = "image") -> None:
    H, W = img.shape[-2:]
    if H % factor or W % factor:
        raise DimensionError(f"{what} size {H}x{W} must be divisible by {factor}")


def tile(images: Sequence[Sequence[torch.Tensor]], gutter: int = 4, fill: float = 1.0) -> torch.Tensor:
    """Arrange rows of equally sized (1, 3, h, w) images into a contact sheet."""
    rows, cols = len(images), len(images[0])
    h, w = images[0][0].shape[-2:]
    sheet = torch.full((1, 3, rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter), fill)
    for r, row in enumerate(images):
        for c, im in enumerate(row):
            y, x = r * (h + gutter), c * (w + gutter)
            sheet[..., y:y + h, x:x + w] = im
    return sheet

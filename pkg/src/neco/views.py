"""Two-view augmentation with crop bookkeeping and ROI-align.

Boxes are ``(x0, y0, x1, y1)`` in normalized ``[0, 1]`` coordinates with x
running along image columns.  Patch ``(r, c)`` of a ``rows x cols`` grid has
its center at ``((c + 0.5) / cols, (r + 0.5) / rows)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Tensor

FULL_BOX = (0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class CropParams:
    box: tuple  # source-image normalized coordinates
    flip: bool = False
    color_jitter_seed: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"invalid crop box {self.box}")


@dataclass(frozen=True)
class ViewConfig:
    global_scale: tuple = (0.5, 1.0)
    local_scale: tuple = (0.25, 0.75)
    global_size: int = 64
    local_size: int = 32
    min_overlap: float = 0.01
    max_attempts: int = 100
    brightness: float = 0.2
    contrast: float = 0.2
    blur_sigma: tuple = (0.0, 1.0)
    grayscale_p: float = 0.2
    flip_p: float = 0.5
    jitter: bool = True


@dataclass
class View:
    image: np.ndarray  # C x S x S
    crop: CropParams


@dataclass
class AlignedPair:
    student_features: Tensor
    teacher_features: Tensor
    student_box: tuple
    teacher_box: tuple


def box_intersection_area(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0.0) * max(h, 0.0)


def _random_box(rng: np.random.Generator, scale) -> tuple:
    area = rng.uniform(*scale)
    ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
    w = min(np.sqrt(area * ratio), 1.0)
    h = min(np.sqrt(area / ratio), 1.0)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return (float(x0), float(y0), float(x0 + w), float(y0 + h))


def render_crop(image: np.ndarray, box, size: int, flip: bool = False) -> np.ndarray:
    """Bilinear resample of ``box`` (normalized) to ``size x size`` pixels."""
    C, H, W = image.shape
    x0, y0, x1, y1 = box
    xs = x0 + (np.arange(size) + 0.5) / size * (x1 - x0)
    ys = y0 + (np.arange(size) + 0.5) / size * (y1 - y0)
    if flip:
        xs = xs[::-1]
    wy = _interp_matrix(ys, H)
    wx = _interp_matrix(xs, W)
    return (wy @ image.astype(np.float64) @ wx.T).astype(image.dtype)


def _interp_matrix(coords: np.ndarray, n: int) -> np.ndarray:
    """Rows of linear-interpolation weights for normalized ``coords`` over ``n`` cells."""
    pos = np.clip(coords * n - 0.5, 0.0, n - 1.0)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = pos - i0
    w = np.zeros((len(coords), n))
    rows = np.arange(len(coords))
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    return w


def photometric_jitter(image: np.ndarray, seed: int, cfg: ViewConfig) -> np.ndarray:
    if not cfg.jitter:
        return image
    rng = np.random.default_rng(seed)
    img = image.astype(np.float64)
    img = img * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    mean = img.mean()
    img = (img - mean) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + mean
    sigma = rng.uniform(*cfg.blur_sigma)
    if sigma > 0:
        img = gaussian_filter(img, sigma=(0, sigma, sigma), mode="nearest")
    if rng.random() < cfg.grayscale_p:
        gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        img = np.broadcast_to(gray, img.shape).copy()
    return np.clip(img, 0.0, 1.0).astype(image.dtype)


def sample_views(image: np.ndarray, rng: np.random.Generator, cfg: ViewConfig = ViewConfig()):
    """A global and a local view whose crops overlap by at least ``min_overlap``."""
    for _ in range(cfg.max_attempts):
        b1 = _random_box(rng, cfg.global_scale)
        b2 = _random_box(rng, cfg.local_scale)
        flips = rng.random(2) < cfg.flip_p
        seeds = rng.integers(0, 2**31 - 1, size=2)
        if box_intersection_area(b1, b2) >= cfg.min_overlap:
            break
    else:
        raise RuntimeError(f"no crop pair with overlap >= {cfg.min_overlap} after {cfg.max_attempts} attempts")
    views = []
    for box, flip, seed, size in zip((b1, b2), flips, seeds, (cfg.global_size, cfg.local_size)):
        crop = CropParams(box, bool(flip), int(seed))
        pixels = photometric_jitter(render_crop(image, box, size, crop.flip), crop.color_jitter_seed, cfg)
        views.append(View(pixels, crop))
    return views[0], views[1]


def _to_view(box, crop: CropParams) -> tuple:
    cx0, cy0, cx1, cy1 = crop.box
    w, h = cx1 - cx0, cy1 - cy0
    x0, y0, x1, y1 = (box[0] - cx0) / w, (box[1] - cy0) / h, (box[2] - cx0) / w, (box[3] - cy0) / h
    if crop.flip:
        x0, x1 = 1.0 - x1, 1.0 - x0
    return tuple(float(np.clip(v, 0.0, 1.0)) for v in (x0, y0, x1, y1))


def intersection_boxes(c1: CropParams, c2: CropParams):
    """The shared source region expressed in each view's normalized frame."""
    a, b = c1.box, c2.box
    shared = (max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3]))
    if shared[0] >= shared[2] or shared[1] >= shared[3]:
        raise ValueError("crops do not intersect")
    return _to_view(shared, c1), _to_view(shared, c2)


def bilinear_weights(grid_shape, box, out_shape) -> np.ndarray:
    """Matrix mapping ``rows*cols`` grid tokens to ``g_r*g_c`` box samples."""
    rows, cols = grid_shape
    gr, gc = out_shape
    x0, y0, x1, y1 = box
    if not (0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1):
        raise ValueError(f"invalid box {box}")
    xs = x0 + (np.arange(gc) + 0.5) / gc * (x1 - x0)
    ys = y0 + (np.arange(gr) + 0.5) / gr * (y1 - y0)
    wy = _interp_matrix(ys, rows)  # gr x rows
    wx = _interp_matrix(xs, cols)  # gc x cols
    return np.kron(wy, wx)


def roi_align(tokens, grid_shape, box, out: int = 7) -> Tensor:
    """Bilinear ROI-align of a token grid onto ``out x out`` samples.

    ``tokens`` is ``N x d`` with one box, or ``B x N x d`` with one box per item.
    """
    tokens = ad.as_tensor(tokens)
    if tokens.ndim == 2:
        W = bilinear_weights(grid_shape, box, (out, out))
        return ad.matmul(Tensor(W, dtype=tokens.dtype), tokens)
    W = np.stack([bilinear_weights(grid_shape, b, (out, out)) for b in box])
    return ad.matmul(Tensor(W, dtype=tokens.dtype), tokens)

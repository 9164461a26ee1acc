"""Labeled synthetic scenes: textured shapes on textured backgrounds.

Label 0 is background; class ``c >= 1`` is drawn as shape ``(c - 1) % 3``
(disk, rectangle, triangle) with a class-tied hue and a class-tied stripe
texture, so a patch's class is readable from its local appearance.

Split file layout (``<root>/train.bin``, ``<root>/val.bin``)::

    b"NECOSYN1"                      8 magic bytes
    <manifest JSON>\\n                one UTF-8 line
    scene 0: image  <f4 [3, H, W]    then  mask  u1 [H, W]
    scene 1: ...
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .seeds import rng_for

MAGIC = b"NECOSYN1"
SHAPES = ("disk", "rectangle", "triangle")


class DatasetFormatError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    num_scenes: int = 512
    num_classes: int = 4
    H: int = 64
    W: int = 64
    split: str = "train"
    seed: int = 0
    max_shapes: int = 4

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError("split must be train or val")
        if self.num_classes < 2 or self.num_classes > 255:
            raise ValueError("num_classes must lie in [2, 255]")


@dataclass
class SyntheticScene:
    image: np.ndarray  # float32, 3 x H x W, values in [0, 1]
    mask: np.ndarray  # uint8, H x W
    seed: int


def class_hue(c: int, num_classes: int) -> float:
    return ((c - 1) / max(num_classes - 1, 1) + 0.08) % 1.0


def _texture(c: int, H: int, W: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    angle = np.pi * ((c - 1) * 0.38 % 1.0)
    period = 3.0 + (c - 1) % 3
    u = np.cos(angle) * xx + np.sin(angle) * yy
    return 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * u / period + phase))


def _shape_mask(kind: str, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
    size = rng.uniform(0.14, 0.28) * min(H, W)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    if kind == "rectangle":
        hw, hh = size * rng.uniform(0.7, 1.3), size * rng.uniform(0.7, 1.3)
        return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
    # upward triangle with apex at top
    t = (yy - (cy - size)) / (2 * size)
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * size * 1.15)


def generate_scene(manifest: DatasetManifest, index: int) -> SyntheticScene:
    """Deterministic in ``(manifest.seed, manifest.split, index)``."""
    if not 0 <= index < manifest.num_scenes:
        raise IndexError(f"scene index {index} outside [0, {manifest.num_scenes})")
    rng = rng_for(manifest.seed, "scene", manifest.split, index)
    H, W, K = manifest.H, manifest.W, manifest.num_classes

    hue = rng.uniform()
    base = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.1, 0.5), rng.uniform(0.3, 0.8)))
    noise = gaussian_filter(rng.normal(size=(H, W)), sigma=4.0)
    noise = noise / (np.abs(noise).max() + 1e-9)
    image = base[:, None, None] * (1.0 + 0.25 * noise)[None]
    mask = np.zeros((H, W), dtype=np.uint8)

    count = int(rng.integers(1, manifest.max_shapes + 1)) if manifest.max_shapes > 0 else 0
    for _ in range(count):
        c = int(rng.integers(1, K))
        region = _shape_mask(SHAPES[(c - 1) % len(SHAPES)], rng, H, W)
        h = (class_hue(c, K) + rng.normal(0.0, 0.06)) % 1.0
        color = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.4, 0.9), rng.uniform(0.5, 1.0)))
        tex = _texture(c, H, W, rng.uniform(0, 2 * np.pi))
        shade = color[:, None, None] * (0.65 + 0.35 * tex)[None]
        image = np.where(region[None], shade, image)
        mask[region] = c

    image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SyntheticScene(image, mask, index)


def generate_split(manifest: DatasetManifest) -> list:
    return [generate_scene(manifest, i) for i in range(manifest.num_scenes)]


def patch_labels(mask: np.ndarray, P: int, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Majority label per ``P x P`` cell in row-major order; ties to the lower label."""
    rows = mask.shape[0] // P if rows is None else rows
    cols = mask.shape[1] // P if cols is None else cols
    if mask.shape[0] < rows * P or mask.shape[1] < cols * P:
        raise DimensionError(f"mask {mask.shape} too small for {rows}x{cols} patches of {P}")
    cells = mask[: rows * P, : cols * P].reshape(rows, P, cols, P).transpose(0, 2, 1, 3).reshape(rows * cols, P * P)
    n_labels = int(mask.max()) + 1
    counts = np.zeros((rows * cols, n_labels), dtype=np.int64)
    for lab in range(n_labels):
        counts[:, lab] = (cells == lab).sum(axis=1)
    return counts.argmax(axis=1)


def write_dataset(path, manifest: DatasetManifest, scenes=None) -> None:
    scenes = generate_split(manifest) if scenes is None else scenes
    if len(scenes) != manifest.num_scenes:
        raise DimensionError(f"{len(scenes)} scenes for a manifest of {manifest.num_scenes}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(asdict(manifest), sort_keys=True).encode("utf-8") + b"\n")
        for s in scenes:
            if s.image.shape != (3, manifest.H, manifest.W) or s.mask.shape != (manifest.H, manifest.W):
                raise DimensionError(f"scene {s.seed} has shape {s.image.shape} / {s.mask.shape}")
            fh.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())


def read_dataset(path, manifest: DatasetManifest | None = None):
    """Return ``(manifest, scenes)``; ``manifest`` if given must match the file."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DatasetFormatError(f"{path}: bad magic bytes")
        try:
            found = DatasetManifest(**json.loads(fh.readline().decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: unreadable manifest ({exc})") from None
        if manifest is not None and manifest != found:
            diff = {k: (v, getattr(found, k)) for k, v in asdict(manifest).items() if getattr(found, k) != v}
            raise DimensionError(f"{path}: manifest mismatch {diff}")
        H, W = found.H, found.W
        img_bytes, mask_bytes = 3 * H * W * 4, H * W
        scenes = []
        for i in range(found.num_scenes):
            raw = fh.read(img_bytes + mask_bytes)
            if len(raw) != img_bytes + mask_bytes:
                raise DatasetFormatError(f"{path}: truncated at scene {i}")
            image = np.frombuffer(raw[:img_bytes], dtype="<f4").reshape(3, H, W).astype(np.float32)
            mask = np.frombuffer(raw[img_bytes:], dtype=np.uint8).reshape(H, W).copy()
            scenes.append(SyntheticScene(image, mask, i))
    return found, scenes


def split_path(root, split: str) -> str:
    return os.path.join(root, f"{split}.bin")


def default_manifests(seed: int = 0, num_train: int = 512, num_val: int = 128, num_classes: int = 4, size: int = 64):
    train = DatasetManifest(num_train, num_classes, size, size, "train", seed)
    val = DatasetManifest(num_val, num_classes, size, size, "val", seed)
    return train, val


def load_or_generate(root, seed: int = 0, **kw):
    """Read ``train``/``val`` splits from ``root``, or generate them in memory when ``root`` is None."""
    train_m, val_m = default_manifests(seed, **kw)
    if root is None:
        return generate_split(train_m), generate_split(val_m)
    _, train = read_dataset(split_path(root, "train"))
    _, val = read_dataset(split_path(root, "val"))
    return train, val

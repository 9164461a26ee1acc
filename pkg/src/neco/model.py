"""Toy ViT patch encoder, projection head and EMA teacher updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .views import FULL_BOX, bilinear_weights


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    base_grid: tuple = (8, 8)  # grid of the positional embedding table
    head_hidden: int = 256
    head_out: int = 32
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.head_out < 2:
            raise ValueError("projection output width must be >= 2")

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


@dataclass
class FeatureGrid:
    tokens: Tensor  # N x d (or B x N x d for a batch)
    attention: np.ndarray  # N (or B x N), CLS-to-patch attention averaged over heads
    grid_shape: tuple


def _trunc_normal(rng, shape, std):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    """Backbone parameters by name; matrices truncated-normal, biases zero."""
    d, s = cfg.dim, cfg.init_std
    N = cfg.base_grid[0] * cfg.base_grid[1]
    p = {
        "patch_embed.w": _trunc_normal(rng, (cfg.patch_dim, d), s),
        "patch_embed.b": np.zeros(d),
        "cls_token": _trunc_normal(rng, (1, d), s),
        "pos_embed": _trunc_normal(rng, (N + 1, d), s),
    }
    hidden = cfg.mlp_ratio * d
    for k in range(cfg.depth):
        pre = f"blocks.{k}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p[pre + "qkv.w"], p[pre + "qkv.b"] = _trunc_normal(rng, (d, 3 * d), s), np.zeros(3 * d)
        p[pre + "proj.w"], p[pre + "proj.b"] = _trunc_normal(rng, (d, d), s), np.zeros(d)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
        p[pre + "fc1.w"], p[pre + "fc1.b"] = _trunc_normal(rng, (d, hidden), s), np.zeros(hidden)
        p[pre + "fc2.w"], p[pre + "fc2.b"] = _trunc_normal(rng, (hidden, d), s), np.zeros(d)
    p["norm.g"], p["norm.b"] = np.ones(d), np.zeros(d)
    return {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in p.items()}


def init_head(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    """Three linear layers with GELU between them."""
    s, h = cfg.init_std, cfg.head_hidden
    p = {
        "head.fc1.w": _trunc_normal(rng, (cfg.dim, h), s),
        "head.fc1.b": np.zeros(h),
        "head.fc2.w": _trunc_normal(rng, (h, h), s),
        "head.fc2.b": np.zeros(h),
        "head.fc3.w": _trunc_normal(rng, (h, cfg.head_out), s),
        "head.fc3.b": np.zeros(cfg.head_out),
    }
    return {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in p.items()}


def patchify(image: np.ndarray, P: int) -> np.ndarray:
    """``C x H x W`` image to ``N x (C*P*P)`` row-major patches; ragged edges dropped."""
    C, H, W = image.shape
    if H < P or W < P:
        raise ValueError(f"image {H}x{W} smaller than patch size {P}")
    rows, cols = H // P, W // P
    x = image[:, : rows * P, : cols * P].reshape(C, rows, P, cols, P)
    return x.transpose(1, 3, 0, 2, 4).reshape(rows * cols, C * P * P)


def grid_shape_for(image_shape, P: int) -> tuple:
    return image_shape[-2] // P, image_shape[-1] // P


def _pos_embed(params, cfg: ModelConfig, grid_shape) -> Tensor:
    pos = params["pos_embed"]
    if tuple(grid_shape) == tuple(cfg.base_grid):
        return pos
    N = cfg.base_grid[0] * cfg.base_grid[1]
    W = bilinear_weights(cfg.base_grid, FULL_BOX, grid_shape)
    patch_pos = ad.matmul(Tensor(W, dtype=pos.dtype), ad.gather_rows(pos, np.arange(1, N + 1)))
    return ad.concat([ad.gather_rows(pos, [0]), patch_pos], axis=0)


def _block(x: Tensor, params, pre: str, cfg: ModelConfig):
    B, T, d = x.shape
    h, dh = cfg.heads, d // cfg.heads
    y = ad.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
    qkv = ad.linear(y, params[pre + "qkv.w"], params[pre + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, h, dh)), (2, 0, 3, 1, 4))  # 3 B h T dh
    q = ad.reshape(ad.gather_rows(qkv, [0]), (B, h, T, dh))
    k = ad.reshape(ad.gather_rows(qkv, [1]), (B, h, T, dh))
    v = ad.reshape(ad.gather_rows(qkv, [2]), (B, h, T, dh))
    attn = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh)))
    out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
    x = ad.add(x, ad.linear(out, params[pre + "proj.w"], params[pre + "proj.b"]))
    y = ad.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    y = ad.linear(ad.gelu(ad.linear(y, params[pre + "fc1.w"], params[pre + "fc1.b"])), params[pre + "fc2.w"], params[pre + "fc2.b"])
    return ad.add(x, y), attn


def encode(params: dict, patches, cfg: ModelConfig, grid_shape=None) -> FeatureGrid:
    """Spatial tokens and CLS attention for ``N x D`` or ``B x N x D`` patches."""
    patches = ad.as_tensor(patches, dtype=params["patch_embed.w"].dtype)
    single = patches.ndim == 2
    if single:
        patches = ad.reshape(patches, (1,) + patches.shape)
    B, N, D = patches.shape
    if D != cfg.patch_dim:
        raise ad.ShapeError(f"encode: patch width {D} does not match {cfg.patch_dim}")
    if grid_shape is None:
        side = int(round(math.sqrt(N)))
        grid_shape = (side, N // side)
    if grid_shape[0] * grid_shape[1] != N:
        raise ad.ShapeError(f"encode: grid {grid_shape} does not hold {N} patches")
    d = cfg.dim
    x = ad.linear(patches, params["patch_embed.w"], params["patch_embed.b"])
    cls = ad.broadcast_to(params["cls_token"], (B, 1, d))
    x = ad.concat([cls, x], axis=1)
    x = ad.add(x, ad.broadcast_to(_pos_embed(params, cfg, grid_shape), (B, N + 1, d)))
    attn = None
    for k in range(cfg.depth):
        x, attn = _block(x, params, f"blocks.{k}.", cfg)
    x = ad.layer_norm(x, params["norm.g"], params["norm.b"])
    tokens = ad.reshape(ad.gather_rows(ad.transpose(x, (1, 0, 2)), np.arange(1, N + 1)), (N, B, d))
    tokens = ad.transpose(tokens, (1, 0, 2))
    cls_att = attn.data[:, :, 0, 1:].mean(axis=1)
    cls_att = cls_att / cls_att.sum(axis=-1, keepdims=True)
    if single:
        return FeatureGrid(ad.reshape(tokens, (N, d)), cls_att[0], tuple(grid_shape))
    return FeatureGrid(tokens, cls_att, tuple(grid_shape))


def encode_images(params: dict, images: np.ndarray, cfg: ModelConfig) -> FeatureGrid:
    """Encode a ``B x C x H x W`` batch."""
    patches = np.stack([patchify(img, cfg.patch_size) for img in images])
    return encode(params, patches, cfg, grid_shape_for(images.shape, cfg.patch_size))


def project(head: dict, tokens) -> Tensor:
    x = ad.gelu(ad.linear(tokens, head["head.fc1.w"], head["head.fc1.b"]))
    x = ad.gelu(ad.linear(x, head["head.fc2.w"], head["head.fc2.b"]))
    return ad.linear(x, head["head.fc3.w"], head["head.fc3.b"])


def copy_params(params: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v.data, requires_grad=requires_grad, name=k) for k, v in params.items()}


def ema_update(teacher: dict, student: dict, m: float) -> dict:
    """In place: every teacher parameter becomes ``m * teacher + (1 - m) * student``."""
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name].data
        if s.shape != t.shape:
            raise ad.ShapeError(f"ema_update: {name} shapes {t.shape} and {s.shape}")
        t.data = m * t.data + (1.0 - m) * s
    return teacher


def momentum_schedule(step: int, total: int, m0: float = 0.9995) -> float:
    """Half-cosine ramp of the EMA momentum from ``m0`` up to 1."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return 1.0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total) + 1.0) / 2.0

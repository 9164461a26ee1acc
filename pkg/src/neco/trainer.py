"""Post-pretraining loop: views, teacher/student encoding, NeCo loss, Adam, EMA.

Every random draw comes from a seed derived from ``(seed, tag, step, ...)``,
so a run is a pure function of its config and the resumed and uninterrupted
trajectories coincide bitwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .loss import LossConfig, ReferenceSet, neco_loss, sample_references
from .model import (
    FeatureGrid,
    ModelConfig,
    copy_params,
    ema_update,
    encode_images,
    init_encoder,
    init_head,
    momentum_schedule,
    project,
)
from .seeds import derive_seed, rng_for
from .views import FULL_BOX, ViewConfig, intersection_boxes, photometric_jitter, roi_align, sample_views

CHECKPOINT_MAGIC = b"NECOCKPT"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    weight_decay: float = 0.04
    seed: int = 0
    m0: float = 0.9995
    use_ema: bool = True
    aligned_grid: int = 7
    use_roi_align: bool = True
    local_view: bool = True  # student also encodes the smaller second view
    warmstart_epochs: int = 3
    warmstart_lr: float = 1e-3
    dtype: str = "float64"
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    views: ViewConfig = field(default_factory=ViewConfig)

    def __post_init__(self):
        if self.lr_backbone < 0 or self.lr_head < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if self.aligned_grid < 1:
            raise ValueError("aligned_grid must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that shapes the trajectory."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainState:
    student: dict  # backbone and head parameters by name
    teacher: dict
    moments: dict  # name -> (first, second) Adam moments
    step: int
    config: TrainConfig
    steps_per_epoch: int


# --------------------------------------------------------------------------
# schedules and optimizer


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr0 * (math.cos(math.pi * step / total) + 1.0) / 2.0


def _is_head(name: str) -> bool:
    return name.startswith("head.")


def _decays(name: str) -> bool:
    return name.endswith(".w")


def adam_step(params: dict, grads: dict, moments: dict, step: int, lr, weight_decay: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam with bias correction and decoupled weight decay on ``.w`` matrices.

    ``lr`` is a float or a callable ``name -> lr`` (parameter groups).
    ``step`` counts from 1.
    """
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step: {name} grad {g.shape} vs param {p.shape}")
        m, v = moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        rate = lr(name) if callable(lr) else lr
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay and _decays(name):
            update = update + weight_decay * p.data
        p.data = (p.data - rate * update).astype(p.dtype)
        moments[name] = (m, v)


# --------------------------------------------------------------------------
# state


def _split(params: dict):
    enc = {k: v for k, v in params.items() if not _is_head(k)}
    head = {k: v for k, v in params.items() if _is_head(k)}
    return enc, head


def init_state(cfg: TrainConfig, train_scenes=None) -> TrainState:
    """Fresh student (warm-started when scenes are given) and an exact teacher copy."""
    dt = cfg.np_dtype
    enc = init_encoder(cfg.model, rng_for(cfg.seed, "init", "encoder"), dt)
    head = init_head(cfg.model, rng_for(cfg.seed, "init", "head"), dt)
    if train_scenes is not None and cfg.warmstart_epochs > 0:
        warm_start(enc, train_scenes, cfg)
    student = {**enc, **head}
    steps = max(1, math.ceil(len(train_scenes) / cfg.batch_size)) if train_scenes is not None else 1
    return TrainState(student, copy_params(student), {}, 0, cfg, steps)


def warm_start(enc: dict, scenes, cfg: TrainConfig) -> None:
    """Stand-in for a pretrained backbone: from jittered images, regress each patch's clean mean color."""
    mc = cfg.model
    dt = cfg.np_dtype
    P = mc.patch_size
    rng = rng_for(cfg.seed, "warmstart", "readout")
    readout = {"w": Tensor(rng.normal(0, mc.init_std, (mc.dim, mc.channels)), requires_grad=True, dtype=dt),
               "b": Tensor(np.zeros(mc.channels), requires_grad=True, dtype=dt)}
    params = {**enc, **{"readout." + k: v for k, v in readout.items()}}
    moments: dict = {}
    n = len(scenes)
    total = cfg.warmstart_epochs * math.ceil(n / cfg.batch_size)
    step = 0
    for epoch in range(cfg.warmstart_epochs):
        order = rng_for(cfg.seed, "warmstart", "epoch", epoch).permutation(n)
        for s in range(0, n, cfg.batch_size):
            batch = [scenes[i] for i in order[s : s + cfg.batch_size]]
            clean = np.stack([b.image for b in batch]).astype(dt)
            noisy = np.stack([
                photometric_jitter(b.image, derive_seed(cfg.seed, "warmstart", step, j), cfg.views)
                for j, b in enumerate(batch)
            ]).astype(dt)
            B, C, H, W = clean.shape
            target = clean[:, :, : H // P * P, : W // P * P].reshape(B, C, H // P, P, W // P, P).mean(axis=(3, 5))
            target = target.transpose(0, 2, 3, 1).reshape(B, -1, C)
            with ad.GradTape() as tape:
                grid = encode_images(enc, noisy, mc)
                pred = ad.linear(grid.tokens, readout["w"], readout["b"])
                err = ad.sub(pred, Tensor(target, dtype=dt))
                loss = ad.mul(ad.sum(ad.mul(err, err)), 1.0 / err.data.size)
            grads = tape.backward(loss)
            g = {k: grads[v.node_id].data for k, v in params.items()}
            step += 1
            adam_step(params, g, moments, step, cosine_lr(step - 1, total, cfg.warmstart_lr))


# --------------------------------------------------------------------------
# one step


def _batch_views(images, cfg: TrainConfig, step: int):
    v1, v2 = [], []
    for i, img in enumerate(images):
        a, b = sample_views(img, rng_for(cfg.seed, "views", step, i), cfg.views)
        v1.append(a)
        v2.append(b)
    return v1, v2


def _aligned(tokens: Tensor, grid_shape, boxes, g: int) -> Tensor:
    return roi_align(tokens, grid_shape, boxes, out=g)


def compute_loss(state: TrainState, images, step: int):
    """Loss of one batch at ``step`` plus the list of student parameters used.

    Must run inside a ``GradTape`` for gradients.
    """
    cfg = state.config
    dt = cfg.np_dtype
    g = cfg.aligned_grid
    v1, v2 = _batch_views(images, cfg, step)
    x1 = np.stack([v.image for v in v1]).astype(dt)
    s_enc, s_head = _split(state.student)
    t_params = state.teacher if cfg.use_ema else state.student
    t_enc, t_head = _split(t_params)

    with ad.no_grad():
        t_grid = encode_images(t_enc, x1, cfg.model)
        t_proj = project(t_head, t_grid.tokens)  # B x N x p
    per_image = [FeatureGrid(t_proj.data[b], t_grid.attention[b], t_grid.grid_shape) for b in range(len(images))]
    ref_rng = rng_for(cfg.seed, "refs", step)
    R = cfg.loss.num_references
    if cfg.loss.reference_mode == "inter":
        refs = sample_references(per_image, cfg.loss, R, ref_rng)
    else:
        sets = [sample_references(per_image, cfg.loss, R, ref_rng, anchor=b) for b in range(len(images))]
        refs = ReferenceSet(Tensor(np.stack([s.features.data for s in sets])),
                            np.concatenate([s.source_index for s in sets]), "intra")

    streams = [(v1, x1)]
    if cfg.local_view:
        streams.append((v2, np.stack([v.image for v in v2]).astype(dt)))
    students, teachers = [], []
    for views, x in streams:
        s_grid = encode_images(s_enc, x, cfg.model)
        s_proj = project(s_head, s_grid.tokens)
        if cfg.use_roi_align:
            pairs = [intersection_boxes(v1[b].crop, views[b].crop) for b in range(len(images))]
        else:
            pairs = [(FULL_BOX, FULL_BOX)] * len(images)
        students.append(_aligned(s_proj, s_grid.grid_shape, [p[1] for p in pairs], g))
        with ad.no_grad():
            teachers.append(_aligned(t_proj, t_grid.grid_shape, [p[0] for p in pairs], g))
    F_s = ad.concat(students, axis=1)  # B x (V g^2) x p
    F_t = ad.concat(teachers, axis=1)
    if cfg.loss.reference_mode == "inter":
        F_s = ad.reshape(F_s, (-1, F_s.shape[-1]))
        F_t = ad.reshape(F_t, (-1, F_t.shape[-1]))
    loss = neco_loss(F_s, F_t, refs, cfg.loss)
    return ad.mul(loss, 1.0 / (len(images) * len(streams)))


def train_step(state: TrainState, images) -> float:
    """One optimizer step on the student followed by the EMA teacher update."""
    cfg = state.config
    total = cfg.epochs * state.steps_per_epoch
    t = state.step
    try:
        with ad.GradTape() as tape:
            loss = compute_loss(state, images, t)
    except ad.DomainError as exc:
        raise FloatingPointError(f"invalid values at step {t} (epoch {t // state.steps_per_epoch}): {exc}") from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {t} (epoch {t // state.steps_per_epoch})")
    grads = tape.backward(loss)
    g = {k: grads[v.node_id].data for k, v in state.student.items()}
    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite gradient for {k} at step {t}")
    lr_b = cosine_lr(t, total, cfg.lr_backbone)
    lr_h = cosine_lr(t, total, cfg.lr_head)
    adam_step(state.student, g, state.moments, t + 1, lambda n: lr_h if _is_head(n) else lr_b, cfg.weight_decay)
    state.step = t + 1
    if cfg.use_ema:
        ema_update(state.teacher, state.student, momentum_schedule(state.step, total, cfg.m0))
    return value


def epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return rng_for(cfg.seed, "epoch", epoch).permutation(n)


def train(state: TrainState, scenes, log=None, stop_at: int | None = None) -> list:
    """Run from ``state.step`` to the end (or to ``stop_at``); returns per-step log records.

    ``log`` is an optional text stream receiving one JSON object per line.
    """
    cfg = state.config
    spe = state.steps_per_epoch
    total = cfg.epochs * spe
    end = total if stop_at is None else min(stop_at, total)
    records = []
    while state.step < end:
        epoch, k = divmod(state.step, spe)
        order = epoch_order(cfg, epoch, len(scenes))
        idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        images = [scenes[i].image for i in idx]
        step = state.step
        loss = train_step(state, images)
        rec = {
            "step": step,
            "epoch": epoch,
            "loss": loss,
            "lr": cosine_lr(step, total, cfg.lr_backbone),
            "momentum": momentum_schedule(state.step, total, cfg.m0) if cfg.use_ema else None,
        }
        records.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
            log.flush()
    return records


def epoch_means(records) -> list:
    by_epoch: dict = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r["loss"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# --------------------------------------------------------------------------
# checkpoints
#
# b"NECOCKPT" | u64 little-endian manifest length | manifest JSON | blobs
# Blobs are little-endian reals in manifest order at the listed offsets
# (relative to the first blob byte).


def save_checkpoint(path, state: TrainState) -> None:
    entries, blobs, offset = [], [], 0
    code = "<f8" if state.config.dtype == "float64" else "<f4"
    arrays = []
    for group, table in (("student", state.student), ("teacher", state.teacher)):
        arrays += [(group, k, v.data) for k, v in table.items()]
    for k, (m, v) in state.moments.items():
        arrays += [("adam_m", k, m), ("adam_v", k, v)]
    for group, name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"group": group, "name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "config_hash": state.config.config_hash(),
        "config": state.config.to_dict(),
        "entries": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path):
    """Raw ``(manifest, {group: {name: array}})`` without config validation."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        (size,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(size).decode("utf-8"))
        body = fh.read()
    groups: dict = {}
    for e in manifest["entries"]:
        raw = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob {e['group']}/{e['name']}")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        groups.setdefault(e["group"], {})[e["name"]] = arr
    return manifest, groups


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a state; ``cfg`` if given must hash to the stored config."""
    manifest, groups = read_checkpoint(path)
    if cfg is None:
        cfg = config_from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: config hash {cfg.config_hash()} does not match stored {manifest['config_hash']}")
    dt = cfg.np_dtype

    def table(group, grad):
        return {k: Tensor(v, requires_grad=grad, dtype=dt, name=k) for k, v in groups.get(group, {}).items()}

    moments = {k: (groups["adam_m"][k].astype(dt), groups["adam_v"][k].astype(dt)) for k in groups.get("adam_m", {})}
    return TrainState(table("student", True), table("teacher", False), moments, manifest["step"], cfg,
                      manifest["steps_per_epoch"])


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    loss = LossConfig(**d.pop("loss"))
    model = d.pop("model")
    model["base_grid"] = tuple(model["base_grid"])
    views = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("views").items()}
    return TrainConfig(**d, loss=loss, model=ModelConfig(**model), views=ViewConfig(**views))

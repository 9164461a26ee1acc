"""Patch neighbor consistency loss.

For each aligned patch, distances to a set of detached reference features are
computed for the student and the teacher, each distance row is sorted with a
differentiable sorting network, and the teacher's relaxed permutation serves
as the cross-entropy target for the student's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sortnet import RelaxFamily, build_network, soft_sort_rows

NETWORK_KINDS = ("bitonic", "odd_even", "none")


@dataclass(frozen=True)
class LossConfig:
    steepness_student: float = 100.0
    steepness_teacher: float = 100.0
    network_kind: str = "bitonic"
    relax_kind: str = "logistic"
    relax_lambda: float = 0.25
    top_k: int | None = None  # None sorts all references
    similarity: str = "cosine"
    reference_mode: str = "inter"
    patch_policy: str = "both"
    attention_mass: float = 0.7
    num_references: int = 64

    def __post_init__(self):
        if self.network_kind not in NETWORK_KINDS:
            raise ValueError(f"network_kind must be one of {NETWORK_KINDS}")
        if self.similarity not in ("cosine", "euclidean"):
            raise ValueError("similarity must be cosine or euclidean")
        if self.reference_mode not in ("intra", "inter"):
            raise ValueError("reference_mode must be intra or inter")
        if self.patch_policy not in ("fg", "bg", "both"):
            raise ValueError("patch_policy must be fg, bg or both")
        if not 0 < self.attention_mass <= 1:
            raise ValueError("attention_mass must lie in (0, 1]")
        if self.num_references < 2:
            raise ValueError("num_references must be >= 2")
        if self.top_k is not None and not 1 <= self.top_k <= self.num_references:
            raise ValueError("top_k must lie in [1, num_references]")

    def family(self, steepness: float) -> RelaxFamily:
        return RelaxFamily(self.relax_kind, float(steepness), self.relax_lambda)


@dataclass
class ReferenceSet:
    features: Tensor  # R x d, or G x R x d for per-group references
    source_index: np.ndarray  # R x 2 rows of (image, patch)
    mode: str

    def __post_init__(self):
        self.features = self.features.detach()

    def __len__(self) -> int:
        return self.features.shape[-2]


# --------------------------------------------------------------------------
# distances


def cosine_distance_matrix(A, B) -> Tensor:
    """``1 - cos(a_i, b_j)``; works on ``n x d`` or batched ``G x n x d`` inputs."""
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[-1] != B.shape[-1] or A.ndim != B.ndim:
        raise ad.ShapeError(f"cosine_distance_matrix: incompatible shapes {A.shape} and {B.shape}")
    An = ad.row_normalize(A)
    Bn = ad.row_normalize(B)
    return ad.sub(1.0, ad.matmul(An, ad.transpose(Bn)))


def euclidean_distance_matrix(A, B) -> Tensor:
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[-1] != B.shape[-1] or A.ndim != B.ndim:
        raise ad.ShapeError(f"euclidean_distance_matrix: incompatible shapes {A.shape} and {B.shape}")
    lead = A.shape[:-2]
    n, m = A.shape[-2], B.shape[-2]
    sa = ad.sum(ad.mul(A, A), axis=-1, keepdims=True)  # ... x n x 1
    sb = ad.sum(ad.mul(B, B), axis=-1, keepdims=True)  # ... x m x 1
    ones_m = Tensor(np.ones(lead + (1, m), dtype=A.dtype))
    ones_n = Tensor(np.ones(lead + (n, 1), dtype=A.dtype))
    sq = ad.add(ad.matmul(sa, ones_m), ad.matmul(ones_n, ad.transpose(sb)))
    sq = ad.sub(sq, ad.mul(ad.matmul(A, ad.transpose(B)), 2.0))
    return ad.sqrt(ad.maximum(sq, 0.0))


def distance_matrix(A, B, similarity: str = "cosine") -> Tensor:
    if similarity == "cosine":
        return cosine_distance_matrix(A, B)
    if similarity == "euclidean":
        return euclidean_distance_matrix(A, B)
    raise ValueError(f"unknown similarity {similarity!r}")


# --------------------------------------------------------------------------
# references and selection


def select_patches(attention, policy: str, mass: float = 0.7) -> np.ndarray:
    """Patch indices for ``fg`` / ``bg`` / ``both``.

    Foreground is the shortest run of patches, by descending attention (ties
    to the lower index), whose cumulative attention reaches ``mass``.
    """
    if policy == "both":
        n = len(attention) if attention is not None else None
        if n is None:
            raise ValueError("select_patches: policy 'both' needs the patch count (pass attention)")
        return np.arange(n)
    if attention is None:
        raise ValueError(f"select_patches: policy {policy!r} needs an attention map")
    if not 0 < mass <= 1:
        raise ValueError("mass must lie in (0, 1]")
    att = np.asarray(attention, dtype=np.float64)
    att = att / att.sum()
    order = np.lexsort((np.arange(len(att)), -att))
    csum = np.cumsum(att[order])
    count = int(np.searchsorted(csum, mass - 1e-12) + 1)
    fg = np.sort(order[: min(count, len(att))])
    if policy == "fg":
        return fg
    if policy == "bg":
        return np.setdiff1d(np.arange(len(att)), fg)
    raise ValueError(f"unknown patch policy {policy!r}")


def sample_references(batch_features, cfg: LossConfig, count: int, rng: np.random.Generator, anchor: int = 0) -> ReferenceSet:
    """Draw ``count`` detached reference patches from a batch of feature grids.

    ``batch_features`` is a sequence of grids with ``tokens`` (N x d) and
    ``attention`` (N,) fields.  ``inter`` draws from all images, ``intra``
    only from image ``anchor``.
    """
    images = range(len(batch_features)) if cfg.reference_mode == "inter" else [anchor]
    pool = []
    for b in images:
        grid = batch_features[b]
        att = grid.attention
        att = None if att is None else np.asarray(getattr(att, "data", att))
        if cfg.patch_policy == "both":
            idx = np.arange(np.asarray(getattr(grid.tokens, "data", grid.tokens)).shape[0])
        else:
            idx = select_patches(att, cfg.patch_policy, cfg.attention_mass)
        pool.extend((b, int(i)) for i in idx)
    if len(pool) < count:
        raise ValueError(f"insufficient patches: {len(pool)} available, {count} references requested")
    pool = np.array(pool, dtype=np.int64)
    pick = rng.choice(len(pool), size=count, replace=False)
    src = pool[pick]
    feats = np.stack([np.asarray(getattr(batch_features[b].tokens, "data", batch_features[b].tokens))[p] for b, p in src])
    return ReferenceSet(Tensor(feats), src, cfg.reference_mode)


def restrict_top_k(distance_row, k: int):
    """Indices (ascending) of the ``k`` smallest entries and the matching subrow."""
    row = np.asarray(getattr(distance_row, "data", distance_row))
    if not 1 <= k <= row.shape[-1]:
        raise ValueError(f"top_k={k} outside [1, {row.shape[-1]}]")
    order = np.argsort(row, axis=-1, kind="stable")[..., :k]
    idx = np.sort(order, axis=-1)
    if isinstance(distance_row, Tensor):
        if distance_row.ndim == 1:
            return idx, ad.reshape(ad.take_along(ad.reshape(distance_row, (1, -1)), idx[None]), (k,))
        return idx, ad.take_along(distance_row, idx)
    return idx, np.take_along_axis(row, idx, axis=-1)


# --------------------------------------------------------------------------
# loss


def cross_entropy_perm(Qt, Qs) -> Tensor:
    """``-sum Qt * log Qs`` over all entries; the target carries no gradient."""
    Qt, Qs = ad.as_tensor(Qt), ad.as_tensor(Qs)
    if Qt.shape != Qs.shape:
        raise ad.ShapeError(f"cross_entropy_perm: shapes {Qt.shape} and {Qs.shape} differ")
    return ad.neg(ad.sum(ad.mul(Qt.detach(), ad.log(Qs))))


def _relaxed_targets(D: Tensor, cfg: LossConfig, steepness: float) -> Tensor:
    if cfg.network_kind == "none":
        return ad.softmax(ad.mul(D, -float(steepness)))
    net = build_network(cfg.network_kind, D.shape[-1])
    return soft_sort_rows(D, net, cfg.family(steepness)).perm


def neco_loss(F_s, F_t, refs: ReferenceSet, cfg: LossConfig) -> Tensor:
    """Sum over aligned patches of the permutation cross-entropy.

    ``F_s``/``F_t`` are ``n x d`` against ``R x d`` references, or grouped
    ``G x n x d`` against ``G x R x d`` references (one reference set per group).
    """
    F_s = ad.as_tensor(F_s)
    F_t = ad.as_tensor(F_t).detach()
    if F_s.shape != F_t.shape:
        raise ad.ShapeError(f"neco_loss: student {F_s.shape} and teacher {F_t.shape} differ")
    R_feats = _canonical(refs.features)[0]
    Ds = distance_matrix(F_s, R_feats, cfg.similarity)
    with ad.no_grad():
        Dt = distance_matrix(F_t, R_feats, cfg.similarity)
    R = Ds.shape[-1]
    Ds = ad.reshape(Ds, (-1, R))
    Dt = ad.reshape(Dt, (-1, R))
    if cfg.top_k is not None and cfg.top_k < R:
        idx, Dt = restrict_top_k(Dt, cfg.top_k)
        Ds = ad.take_along(Ds, idx)
    with ad.no_grad():
        Qt = _relaxed_targets(Dt, cfg, cfg.steepness_teacher)
    Qs = _relaxed_targets(Ds, cfg, cfg.steepness_student)
    return cross_entropy_perm(Qt, Qs)


def relaxed_permutations(F, refs: ReferenceSet, cfg: LossConfig, steepness: float) -> Tensor:
    """Per-row relaxed permutations of ``F`` against ``refs`` (no top-k).

    Columns follow the caller's reference order.
    """
    feats, order = _canonical(refs.features)
    D = distance_matrix(ad.as_tensor(F), feats, cfg.similarity)
    R = D.shape[-1]
    Q = _relaxed_targets(ad.reshape(D, (-1, R)), cfg, steepness)
    inv = np.argsort(order, axis=-1)
    groups = inv.reshape(-1, R)
    per_row = Q.shape[0] // groups.shape[0]
    idx = np.repeat(groups, per_row * R, axis=0)
    flat = ad.take_along(ad.reshape(Q, (-1, R)), idx)
    return ad.reshape(flat, Q.shape)


def _canonical(features: Tensor):
    """Sort references lexicographically by their unit-normalised rows.

    The loss sees references in this order, so it does not depend on how
    they were drawn. Normalising first keeps the order scale-free.
    """
    X = features.data
    U = X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), 1e-300)
    if U.ndim == 2:
        order = np.lexsort(U.T[::-1])
        return Tensor(X[order]), order
    order = np.stack([np.lexsort(u.T[::-1]) for u in U])
    return Tensor(np.take_along_axis(X, order[..., None], axis=-2)), order

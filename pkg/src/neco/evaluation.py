"""Frozen-feature evaluation: clustering, overclustering and in-context retrieval.

All protocols score patch-level label maps (one label per patch, the
majority pixel label) with mIoU accumulated over the whole split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .data import patch_labels
from .model import ModelConfig, encode_images
from .seeds import rng_for


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list  # inertia after every assignment step


@dataclass
class MemoryBank:
    features: np.ndarray  # M x d, unit rows
    labels: np.ndarray  # M
    cap: int

    def __post_init__(self):
        if len(self.features) > self.cap:
            raise ValueError(f"memory bank holds {len(self.features)} > cap {self.cap}")

    def __len__(self) -> int:
        return len(self.labels)


# --------------------------------------------------------------------------
# k-means


def _sq_dists(X, C):
    return np.maximum((X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None], 0.0)


def kmeans(features, K: int, max_iters: int = 100, seed: int = 0) -> ClusterAssignment:
    """k-means++ seeding followed by Lloyd iterations until the assignment is stable."""
    X = np.asarray(features, dtype=np.float64)
    n = len(X)
    if n < K:
        raise ValueError(f"kmeans: {n} points for {K} clusters")
    rng = np.random.default_rng(seed)
    centroids = np.empty((K, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centroids[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else int(rng.integers(n))
        centroids[k] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centroids[k : k + 1])[:, 0])

    labels = None
    history = []
    for _ in range(max_iters):
        d = _sq_dists(X, centroids)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            members = labels == k
            if members.any():
                centroids[k] = X[members].mean(axis=0)
            else:
                far = int(d[np.arange(n), labels].argmax())
                centroids[k] = X[far]
                labels[far] = k
                d[far] = 0.0
    inertia = float(_sq_dists(X, centroids)[np.arange(n), labels].sum())
    return ClusterAssignment(labels, centroids, inertia, history)


# --------------------------------------------------------------------------
# matching and scoring


def hungarian(cost) -> np.ndarray:
    """Minimum-cost injective assignment; ``result[row] = column`` (or -1).

    Rectangular inputs are padded with zero-cost dummies.  Among optimal
    assignments the lexicographically smallest column sequence is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: non-finite cost")
    K, C = cost.shape
    n = max(K, C)
    padded = np.zeros((n, n))
    padded[:K, :C] = cost
    rows, cols = linear_sum_assignment(padded)
    best = padded[rows, cols].sum()
    tol = 1e-9 * max(1.0, np.abs(padded).sum())

    forced = np.full(n, -1)
    used = np.zeros(n, dtype=bool)
    for r in range(n):
        for c in range(n):
            if used[c]:
                continue
            free_r = [i for i in range(n) if forced[i] < 0 and i != r]
            free_c = [j for j in range(n) if not used[j] and j != c]
            fixed = padded[r, c] + sum(padded[i, forced[i]] for i in range(n) if forced[i] >= 0)
            if free_r:
                sub = padded[np.ix_(free_r, free_c)]
                rr, cc = linear_sum_assignment(sub)
                fixed += sub[rr, cc].sum()
            if fixed <= best + tol:
                forced[r] = c
                used[c] = True
                break
    out = forced[:K].copy()
    out[out >= C] = -1
    return out


def miou(pred, gt, num_classes: int, per_class: bool = False):
    """Mean IoU over classes present in ``pred`` or ``gt``."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"miou: shapes {pred.shape} and {gt.shape} differ")
    ious = np.full(num_classes, np.nan)
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            ious[c] = np.count_nonzero(p & g) / union
    score = float(np.nanmean(ious)) if np.any(~np.isnan(ious)) else 0.0
    return (score, ious) if per_class else score


def confusion(pred, gt, num_pred: int, num_gt: int) -> np.ndarray:
    m = np.zeros((num_pred, num_gt), dtype=np.int64)
    np.add.at(m, (np.asarray(pred).ravel(), np.asarray(gt).ravel()), 1)
    return m


def match_clusters(clusters, gt, K: int, num_classes: int) -> np.ndarray:
    """Hungarian cluster-to-class map maximizing total overlap (-1 = unmatched)."""
    return hungarian(-confusion(clusters, gt, K, num_classes))


def overcluster_match(clusters, gt, K_over: int, num_classes: int) -> np.ndarray:
    """Cluster-to-class map for ``K_over >= num_classes`` clusters.

    Each cluster first joins the class it is most precise for; the merged maps
    are then matched 1:1 to classes by Hungarian matching on ``1 - IoU``.
    """
    if K_over < num_classes:
        raise ValueError("K_over must be >= num_classes")
    conf = confusion(clusters, gt, K_over, num_classes)
    greedy = conf.argmax(axis=1)  # precision argmax; ties to the lower class
    merged = greedy[np.asarray(clusters).ravel()]
    inter = confusion(merged, gt, num_classes, num_classes)
    union = inter.sum(1)[:, None] + inter.sum(0)[None] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    assign = hungarian(1.0 - iou)
    return assign[greedy]


# --------------------------------------------------------------------------
# feature extraction


def extract_features(params: dict, scenes, cfg: ModelConfig, batch_size: int = 64):
    """Backbone tokens (projection head unused) and majority patch labels."""
    feats, labels = [], []
    dtype = params["patch_embed.w"].dtype
    with ad.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start : start + batch_size]
            images = np.stack([s.image for s in chunk]).astype(dtype)
            grid = encode_images(params, images, cfg)
            feats.append(grid.tokens.data.reshape(-1, cfg.dim))
            rows, cols = grid.grid_shape
            labels.extend(patch_labels(s.mask, cfg.patch_size, rows, cols) for s in chunk)
    return np.concatenate(feats).astype(np.float64), np.concatenate(labels)


def _unit(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def eval_clustering(features, labels, num_classes: int, K: int | None = None, seed: int = 0, normalize: bool = False):
    """mIoU of k-means clusters matched to classes (overclustering when ``K > num_classes``)."""
    K = num_classes if K is None else K
    X = _unit(features) if normalize else features
    clusters = kmeans(X, K, seed=seed).labels
    if K == num_classes:
        mapping = match_clusters(clusters, labels, K, num_classes)
    else:
        mapping = overcluster_match(clusters, labels, K, num_classes)
    pred = mapping[clusters]
    return miou(pred, labels, num_classes, per_class=True)


# --------------------------------------------------------------------------
# in-context retrieval


def build_memory_bank(features, labels, cap: int = 50_000, seed: int = 0) -> MemoryBank:
    feats = _unit(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    if len(feats) > cap:
        keep = np.sort(np.random.default_rng(seed).choice(len(feats), cap, replace=False))
        feats, labels = feats[keep], labels[keep]
    return MemoryBank(feats, labels, cap)


def incontext_predict(query, bank: MemoryBank, k: int = 30, temperature: float = 0.1, num_classes: int | None = None, chunk: int = 2048):
    """Label each query patch by softmax-weighted votes of its ``k`` nearest bank entries."""
    if k > len(bank):
        raise ValueError(f"k={k} exceeds memory bank size {len(bank)}")
    q = _unit(np.asarray(query, dtype=np.float64))
    C = int(bank.labels.max()) + 1 if num_classes is None else num_classes
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        sims = q[s : s + chunk] @ bank.features.T
        top = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        top_sims = np.take_along_axis(sims, top, axis=1)
        w = np.exp((top_sims - top_sims.max(1, keepdims=True)) / temperature)
        w /= w.sum(1, keepdims=True)
        scores = np.zeros((len(top), C))
        np.add.at(scores, (np.repeat(np.arange(len(top)), k), bank.labels[top].ravel()), w.ravel())
        out[s : s + chunk] = scores.argmax(axis=1)
    return out


def balanced_subset(scenes, fraction: float, num_classes: int, seed: int) -> list:
    """Indices of about ``fraction * len(scenes)`` scenes spread evenly over the labels they contain."""
    n = len(scenes)
    target = max(1, int(round(n * fraction)))
    if target >= n:
        return list(range(n))
    rng = np.random.default_rng(seed)
    present = [set(np.unique(s.mask).tolist()) - {0} for s in scenes]
    chosen, counts = [], np.zeros(num_classes, dtype=int)
    order = list(rng.permutation(n))
    while len(chosen) < target and order:
        # pick the unused scene covering the currently rarest label
        rare = [c for c in np.argsort(counts[1:], kind="stable") + 1]
        pick = None
        for c in rare:
            pick = next((i for i in order if c in present[i]), None)
            if pick is not None:
                break
        pick = order[0] if pick is None else pick
        order.remove(pick)
        chosen.append(pick)
        for c in present[pick]:
            counts[c] += 1
    return sorted(chosen)


def eval_incontext(params: dict, train_scenes, val_scenes, cfg: ModelConfig, num_classes: int, k: int = 30,
                   fraction: float = 1.0, seeds=(0, 1, 2, 3, 4), temperature: float = 0.1, cap: int = 50_000,
                   train_features=None, val_features=None):
    """Dense nearest-neighbor retrieval mIoU; fractions below 1 average over ``seeds``."""
    if train_features is None:
        train_features = extract_features(params, train_scenes, cfg)
    if val_features is None:
        val_features = extract_features(params, val_scenes, cfg)
    tf, tl = train_features
    vf, vl = val_features
    per_scene = len(tf) // len(train_scenes)
    runs = [0] if fraction >= 1 else list(seeds)
    scores, per_class = [], []
    for s in runs:
        idx = balanced_subset(train_scenes, fraction, num_classes, seed=int(rng_for(s, "subset").integers(2**31)))
        rows = np.concatenate([np.arange(i * per_scene, (i + 1) * per_scene) for i in idx])
        bank = build_memory_bank(tf[rows], tl[rows], cap=cap, seed=s)
        pred = incontext_predict(vf, bank, k=min(k, len(bank)), temperature=temperature, num_classes=num_classes)
        score, ious = miou(pred, vl, num_classes, per_class=True)
        scores.append(score)
        per_class.append(ious)
    return float(np.mean(scores)), float(np.std(scores)), np.nanmean(np.array(per_class), axis=0), len(runs)

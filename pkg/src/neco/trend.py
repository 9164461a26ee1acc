"""Before/after comparison of frozen features around NeCo post-pretraining.

The warm-started encoder is scored, trained for the configured epochs, and
the teacher is scored again on the same split.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .data import load_or_generate
from .evaluation import eval_clustering, eval_incontext, extract_features
from .loss import LossConfig
from .trainer import TrainConfig, init_state, train

# Defaults, with the aligned grid and reference count reduced so three
# seeds fit in 15 minutes on one CPU core.
TREND_CONFIG = TrainConfig(aligned_grid=4, loss=LossConfig(num_references=32))


def frozen_scores(params: dict, cfg: TrainConfig, train_scenes, val_scenes, num_classes: int,
                  kmeans_seeds=(0, 1, 2)) -> dict:
    """Clustering mIoU (K = num_classes) and in-context mIoU (fraction 1, k = 30) of a backbone."""
    enc = {n: p for n, p in params.items() if not n.startswith("head.")}
    tr = extract_features(enc, train_scenes, cfg.model)
    va = extract_features(enc, val_scenes, cfg.model)
    cluster = float(np.mean([eval_clustering(va[0], va[1], num_classes, seed=s)[0] for s in kmeans_seeds]))
    incontext = eval_incontext(enc, train_scenes, val_scenes, cfg.model, num_classes, k=30, fraction=1.0,
                               train_features=tr, val_features=va)[0]
    return {"cluster": cluster, "incontext": float(incontext)}


def run_trend(seeds=(0, 1, 2), config: TrainConfig = TREND_CONFIG, data_seed: int = 0, num_classes: int = 4,
              log=None) -> dict:
    """Score warm start and trained teacher for each seed; ``log`` receives one line per seed."""
    train_scenes, val_scenes = load_or_generate(None, seed=data_seed)
    start = time.time()
    runs = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        state = init_state(cfg, train_scenes)
        before = frozen_scores(state.teacher, cfg, train_scenes, val_scenes, num_classes)
        records = train(state, train_scenes)
        after = frozen_scores(state.teacher, cfg, train_scenes, val_scenes, num_classes)
        runs.append({"seed": seed, "before": before, "after": after, "final_loss": records[-1]["loss"]})
        if log is not None:
            log(f"seed {seed}: cluster {before['cluster']:.4f} -> {after['cluster']:.4f}, "
                f"in-context {before['incontext']:.4f} -> {after['incontext']:.4f}")
    margin = {m: float(np.mean([r["after"][m] - r["before"][m] for r in runs])) for m in ("cluster", "incontext")}
    return {"runs": runs, "margin": margin, "seconds": time.time() - start,
            "config": dataclasses.asdict(config), "data_seed": data_seed}

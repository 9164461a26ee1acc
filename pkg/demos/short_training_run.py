"""A few epochs of post-pretraining on a small synthetic split, then frozen evaluation.

Kept small so it finishes in seconds on one core; the full-size
comparison lives in ``neco.trend.run_trend``.
"""

import dataclasses

from neco.data import load_or_generate
from neco.loss import LossConfig
from neco.trainer import TrainConfig, epoch_means, init_state, train
from neco.trend import frozen_scores

train_scenes, val_scenes = load_or_generate(None, seed=0, num_train=64, num_val=32)
print(len(train_scenes), "train scenes,", len(val_scenes), "val scenes, image", train_scenes[0].image.shape)

cfg = TrainConfig(epochs=4, aligned_grid=4, loss=LossConfig(num_references=32))
state = init_state(cfg, train_scenes)  # runs the warm start
before = frozen_scores(state.teacher, cfg, train_scenes, val_scenes, num_classes=4)

records = train(state, train_scenes)
print("epoch mean loss:", [round(x, 1) for x in epoch_means(records)])
after = frozen_scores(state.teacher, cfg, train_scenes, val_scenes, num_classes=4)

student = frozen_scores(state.student, cfg, train_scenes, val_scenes, num_classes=4)

# 16 steps at momentum 0.9995 leave the teacher almost where it started
for metric in ("cluster", "incontext"):
    print(f"{metric:9s} {before[metric]:.4f} -> teacher {after[metric]:.4f}, student {student[metric]:.4f}")

# without EMA the student is its own target
no_ema = dataclasses.replace(cfg, use_ema=False)
s2 = init_state(no_ema, train_scenes)
train(s2, train_scenes)
print("no EMA, student:", frozen_scores(s2.student, no_ema, train_scenes, val_scenes, 4))

import dataclasses
import math

import numpy as np
import pytest

from neco import autodiff as ad
from neco.data import DatasetManifest, generate_split, load_or_generate
from neco.loss import LossConfig, cross_entropy_perm, relaxed_permutations
from neco.model import ModelConfig
from neco.trainer import (
    CheckpointError,
    TrainConfig,
    adam_step,
    compute_loss,
    cosine_lr,
    epoch_means,
    init_state,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
from neco.autodiff import Tensor
from neco.views import ViewConfig

TINY = TrainConfig(
    epochs=2,
    batch_size=4,
    aligned_grid=2,
    warmstart_epochs=1,
    loss=LossConfig(num_references=8),
    model=ModelConfig(dim=16, heads=2, head_hidden=32, head_out=8, base_grid=(4, 4)),
    views=ViewConfig(global_size=32, local_size=16),
)


@pytest.fixture(scope="module")
def scenes():
    return generate_split(DatasetManifest(num_scenes=12, H=32, W=32, seed=2))


class TestSchedules:
    def test_cosine_lr(self):
        assert cosine_lr(0, 100, 0.5) == 0.5
        assert cosine_lr(100, 100, 0.5) == 0.0
        assert cosine_lr(50, 100, 0.5) == pytest.approx(0.25, abs=1e-15)

    def test_cosine_lr_range(self):
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 1.0)


class TestAdam:
    def test_first_step_is_sign_like(self):
        # bias-corrected step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        p = {"a.w": Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)}
        g = np.array([0.5, -2.0, 1e-9])
        adam_step(p, {"a.w": g}, {}, 1, 0.1)
        np.testing.assert_allclose(p["a.w"].data, 1.0 - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-14)

    def test_zero_gradient_no_decay(self):
        p = {"a.w": Tensor(np.array([1.5, -2.0]), requires_grad=True)}
        adam_step(p, {"a.w": np.zeros(2)}, {}, 1, 0.1)
        assert p["a.w"].data.tolist() == [1.5, -2.0]

    def test_decoupled_decay_on_matrices_only(self):
        p = {"a.w": Tensor(np.array([2.0]), requires_grad=True), "a.b": Tensor(np.array([2.0]), requires_grad=True)}
        adam_step(p, {"a.w": np.zeros(1), "a.b": np.zeros(1)}, {}, 1, 0.1, weight_decay=0.5)
        assert p["a.w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
        assert p["a.b"].data[0] == 2.0

    def test_parameter_groups(self):
        p = {"blocks.0.x.w": Tensor(np.zeros(1), requires_grad=True), "head.fc1.w": Tensor(np.zeros(1), requires_grad=True)}
        g = {k: np.ones(1) for k in p}
        adam_step(p, g, {}, 1, lambda n: 1e-3 if n.startswith("head.") else 1e-4)
        assert p["blocks.0.x.w"].data[0] == pytest.approx(-1e-4, rel=1e-6)
        assert p["head.fc1.w"].data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            adam_step({"a": Tensor(np.zeros(2))}, {"a": np.zeros(3)}, {}, 1, 0.1)


class TestStep:
    def test_first_loss_is_entropy_without_local_view(self, scenes):
        cfg = dataclasses.replace(TINY, local_view=False, warmstart_epochs=0)
        state = init_state(cfg, scenes)
        images = [s.image for s in scenes[:4]]
        loss = compute_loss(state, images, 0).item()
        # teacher == student and a single view: F_s == F_t, so CE(Q, Q) per row
        from neco.trainer import _batch_views, _split
        from neco.model import encode_images, project
        from neco.loss import sample_references
        from neco.model import FeatureGrid
        from neco.seeds import rng_for
        from neco.views import roi_align

        v1, _ = _batch_views(images, cfg, 0)
        x = np.stack([v.image for v in v1]).astype(np.float64)
        enc, head = _split(state.student)
        with ad.no_grad():
            grid = encode_images(enc, x, cfg.model)
            proj = project(head, grid.tokens)
        per_image = [FeatureGrid(proj.data[b], grid.attention[b], grid.grid_shape) for b in range(4)]
        refs = sample_references(per_image, cfg.loss, 8, rng_for(cfg.seed, "refs", 0))
        F = roi_align(proj, grid.grid_shape, [(0.0, 0.0, 1.0, 1.0)] * 4, out=2).data.reshape(-1, 8)
        Q = relaxed_permutations(F, refs, cfg.loss, 100.0).data
        entropy = sum(cross_entropy_perm(q, q).item() for q in Q)
        assert loss == pytest.approx(entropy / 4, rel=1e-10)
        assert loss > 0

    def test_zero_lr_leaves_student_unchanged(self, scenes):
        cfg = dataclasses.replace(TINY, lr_backbone=0.0, lr_head=0.0, warmstart_epochs=0)
        state = init_state(cfg, scenes)
        before = {k: v.data.copy() for k, v in state.student.items()}
        train_step(state, [s.image for s in scenes[:4]])
        for k, v in state.student.items():
            assert np.array_equal(v.data, before[k]), k

    def test_teacher_gets_no_gradient(self, scenes):
        state = init_state(dataclasses.replace(TINY, warmstart_epochs=0), scenes)
        with ad.GradTape() as tape:
            loss = compute_loss(state, [s.image for s in scenes[:4]], 0)
        table = tape.backward(loss)
        assert not any(t.node_id in table for t in state.teacher.values())
        assert all(s.node_id in table for s in state.student.values())

    def test_ema_moves_teacher_towards_student(self, scenes):
        state = init_state(dataclasses.replace(TINY, warmstart_epochs=0, m0=0.5), scenes)
        before = {k: v.data.copy() for k, v in state.teacher.items()}
        train_step(state, [s.image for s in scenes[:4]])
        k = "blocks.0.qkv.w"
        assert not np.array_equal(state.teacher[k].data, before[k])

    def test_shared_teacher_without_ema(self, scenes):
        cfg = dataclasses.replace(TINY, use_ema=False, warmstart_epochs=0)
        state = init_state(cfg, scenes)
        records = train(state, scenes, stop_at=2)
        assert len(records) == 2 and records[0]["momentum"] is None
        assert all(math.isfinite(r["loss"]) for r in records)

    def test_nan_aborts(self, scenes):
        state = init_state(dataclasses.replace(TINY, warmstart_epochs=0), scenes)
        state.student["patch_embed.w"].data[:] = np.nan
        with pytest.raises(FloatingPointError, match="step 0"):
            train_step(state, [s.image for s in scenes[:4]])


class TestDeterminismAndCheckpoints:
    def test_identical_trajectories(self, scenes):
        a = train(init_state(TINY, scenes), scenes)
        b = train(init_state(TINY, scenes), scenes)
        assert [r["loss"] for r in a] == [r["loss"] for r in b]
        assert len(a) == 2 * 3

    def test_resume_is_bitwise(self, scenes, tmp_path):
        full_state = init_state(TINY, scenes)
        full = train(full_state, scenes)
        state = init_state(TINY, scenes)
        first = train(state, scenes, stop_at=4)
        save_checkpoint(tmp_path / "ck.bin", state)
        resumed = load_checkpoint(tmp_path / "ck.bin", TINY)
        rest = train(resumed, scenes)
        assert [r["loss"] for r in first + rest] == [r["loss"] for r in full]
        for k, v in full_state.teacher.items():
            assert np.array_equal(resumed.teacher[k].data, v.data)

    def test_round_trip(self, scenes, tmp_path):
        state = init_state(TINY, scenes)
        train(state, scenes, stop_at=1)
        save_checkpoint(tmp_path / "ck.bin", state)
        back = load_checkpoint(tmp_path / "ck.bin")
        assert back.step == 1 and back.config == TINY
        for group in ("student", "teacher"):
            for k, v in getattr(state, group).items():
                assert np.array_equal(getattr(back, group)[k].data, v.data)
        for k, (m, v) in state.moments.items():
            assert np.array_equal(back.moments[k][0], m) and np.array_equal(back.moments[k][1], v)

    def test_config_hash_mismatch(self, scenes, tmp_path):
        state = init_state(dataclasses.replace(TINY, warmstart_epochs=0), scenes)
        save_checkpoint(tmp_path / "ck.bin", state)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(tmp_path / "ck.bin", dataclasses.replace(TINY, warmstart_epochs=0, lr_head=0.5))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "x.bin")


def test_five_epochs_reduce_loss():
    # default synthetic dataset, reduced aligned grid and reference count for speed
    train_scenes, _ = load_or_generate(None, seed=0)
    cfg = TrainConfig(epochs=5, aligned_grid=4, loss=LossConfig(num_references=32))
    state = init_state(cfg, train_scenes)
    means = epoch_means(train(state, train_scenes))
    assert means[-1] < means[0], means

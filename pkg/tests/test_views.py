import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neco.autodiff import Tensor, finite_difference_check
from neco import autodiff as ad
from neco.views import (
    FULL_BOX,
    CropParams,
    ViewConfig,
    box_intersection_area,
    intersection_boxes,
    photometric_jitter,
    render_crop,
    roi_align,
    sample_views,
)


def naive_bilinear(grid, box, g):
    """Sample a rows x cols x d grid at g x g cell centers of box, one point at a time."""
    rows, cols, d = grid.shape
    x0, y0, x1, y1 = box
    out = np.zeros((g * g, d))
    for a in range(g):
        for b in range(g):
            y = (y0 + (a + 0.5) / g * (y1 - y0)) * rows - 0.5
            x = (x0 + (b + 0.5) / g * (x1 - x0)) * cols - 0.5
            y = min(max(y, 0.0), rows - 1.0)
            x = min(max(x, 0.0), cols - 1.0)
            r0, c0 = int(math.floor(y)), int(math.floor(x))
            r1, c1 = min(r0 + 1, rows - 1), min(c0 + 1, cols - 1)
            fy, fx = y - r0, x - c0
            out[a * g + b] = ((1 - fy) * (1 - fx) * grid[r0, c0] + (1 - fy) * fx * grid[r0, c1]
                              + fy * (1 - fx) * grid[r1, c0] + fy * fx * grid[r1, c1])
    return out


def _field(x, y):
    return np.stack([1.0 + 0.3 * np.sin(2 * x), 1.0 + 0.3 * np.cos(3 * y), 1.0 + 0.2 * x * y], axis=-1)


def _crop_tokens(crop, n):
    # token (r, c) of a crop sees the field at its source-image location
    x0, y0, x1, y1 = crop.box
    u = (np.arange(n) + 0.5) / n
    if crop.flip:
        u = u[::-1]
    xs = x0 + u * (x1 - x0)
    ys = y0 + (np.arange(n) + 0.5) / n * (y1 - y0)
    X, Y = np.meshgrid(xs, ys)
    return _field(X, Y).reshape(n * n, 3)


class TestIntersection:
    def test_identical(self):
        c = CropParams((0.1, 0.2, 0.7, 0.9))
        assert intersection_boxes(c, c) == (FULL_BOX, FULL_BOX)

    def test_left_half(self):
        b1, b2 = intersection_boxes(CropParams((0, 0, 0.5, 1)), CropParams(FULL_BOX))
        assert b1 == FULL_BOX
        assert b2 == (0.0, 0.0, 0.5, 1.0)

    def test_flipped(self):
        _, b2 = intersection_boxes(CropParams((0, 0, 0.5, 1)), CropParams(FULL_BOX, flip=True))
        assert b2 == (0.5, 0.0, 1.0, 1.0)

    def test_disjoint(self):
        with pytest.raises(ValueError):
            intersection_boxes(CropParams((0, 0, 0.4, 1)), CropParams((0.5, 0, 1, 1)))

    def test_invalid_crop(self):
        with pytest.raises(ValueError):
            CropParams((0.5, 0, 0.4, 1))

    def test_area(self):
        assert box_intersection_area((0, 0, 0.5, 0.5), (0.25, 0.25, 1, 1)) == pytest.approx(0.0625)
        assert box_intersection_area((0, 0, 0.2, 0.2), (0.5, 0.5, 1, 1)) == 0.0


class TestRoiAlign:
    def test_identity(self):
        tokens = np.random.default_rng(0).normal(size=(49, 5))
        np.testing.assert_allclose(roi_align(tokens, (7, 7), FULL_BOX, out=7).data, tokens, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_constant(self, x0, y0, w, h):
        tokens = np.full((64, 3), 2.5)
        out = roi_align(tokens, (8, 8), (x0, y0, x0 + w, y0 + h), out=5).data
        np.testing.assert_allclose(out, 2.5, atol=1e-12)

    def test_naive_oracle(self):
        grid = np.random.default_rng(1).normal(size=(8, 8, 4))
        for box in [(0.25, 0.25, 0.75, 0.75), (0.0, 0.1, 0.93, 0.6), (0.01, 0.0, 0.2, 1.0)]:
            got = roi_align(grid.reshape(64, 4), (8, 8), box, out=7).data
            np.testing.assert_allclose(got, naive_bilinear(grid, box, 7), atol=1e-6)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        tokens = rng.normal(size=(3, 16, 2))
        boxes = [(0, 0, 1, 1), (0.1, 0.2, 0.5, 0.9), (0.5, 0.5, 1, 1)]
        batched = roi_align(tokens, (4, 4), boxes, out=3).data
        for i, b in enumerate(boxes):
            np.testing.assert_allclose(batched[i], roi_align(tokens[i], (4, 4), b, out=3).data, atol=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(49, 3))
        fn = lambda t: ad.sum(ad.mul(roi_align(t, (8, 8), (0.2, 0.1, 0.9, 0.75), out=7), Tensor(w)))
        assert finite_difference_check(fn, Tensor(rng.normal(size=(64, 3)))) <= 1e-5

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            roi_align(np.zeros((4, 1)), (2, 2), (0.5, 0, 1.2, 1), out=2)

    @pytest.mark.parametrize("flips", [(False, False), (False, True), (True, True)])
    def test_composition_consistency(self, flips):
        rng = np.random.default_rng(4)
        n = 16
        for _ in range(20):
            a = CropParams((0.1, 0.0, 0.8, 0.7), flip=flips[0])
            b = CropParams(tuple(np.round([rng.uniform(0, 0.3), rng.uniform(0, 0.3),
                                           rng.uniform(0.6, 1), rng.uniform(0.6, 1)], 3)), flip=flips[1])
            ba, bb = intersection_boxes(a, b)
            fa = roi_align(_crop_tokens(a, n), (n, n), ba, out=7).data
            fb = roi_align(_crop_tokens(b, n), (n, n), bb, out=7).data
            cos = np.sum(fa * fb, 1) / np.linalg.norm(fa, axis=1) / np.linalg.norm(fb, axis=1)
            assert np.max(1 - cos) <= 1e-2


class TestSampling:
    def test_overlap_constraint_1000_draws(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(3, 64, 64))
        cfg = ViewConfig(jitter=False)
        for _ in range(1000):
            v1, v2 = sample_views(img, rng, cfg)
            assert box_intersection_area(v1.crop.box, v2.crop.box) >= cfg.min_overlap

    def test_view_sizes(self):
        img = np.random.default_rng(6).uniform(size=(3, 64, 64))
        v1, v2 = sample_views(img, np.random.default_rng(0))
        assert v1.image.shape == (3, 64, 64) and v2.image.shape == (3, 32, 32)
        assert np.all((v1.image >= 0) & (v1.image <= 1))

    def test_deterministic(self):
        img = np.random.default_rng(7).uniform(size=(3, 64, 64))
        a = sample_views(img, np.random.default_rng(3))
        b = sample_views(img, np.random.default_rng(3))
        assert np.array_equal(a[0].image, b[0].image) and a[1].crop == b[1].crop

    def test_unsatisfiable_overlap(self):
        cfg = ViewConfig(min_overlap=2.0, max_attempts=5)
        with pytest.raises(RuntimeError):
            sample_views(np.zeros((3, 8, 8)), np.random.default_rng(0), cfg)


class TestRendering:
    def test_full_box_is_identity(self):
        img = np.random.default_rng(8).uniform(size=(3, 16, 16))
        np.testing.assert_allclose(render_crop(img, FULL_BOX, 16), img, atol=1e-12)

    def test_flip(self):
        img = np.random.default_rng(9).uniform(size=(3, 16, 16))
        np.testing.assert_allclose(render_crop(img, FULL_BOX, 16, flip=True), img[:, :, ::-1], atol=1e-12)

    def test_jitter_off_is_identity(self):
        img = np.random.default_rng(10).uniform(size=(3, 8, 8))
        assert photometric_jitter(img, 3, ViewConfig(jitter=False)) is img

    def test_jitter_in_range(self):
        img = np.random.default_rng(11).uniform(size=(3, 8, 8))
        for seed in range(20):
            out = photometric_jitter(img, seed, ViewConfig())
            assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

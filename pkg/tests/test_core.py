import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrnet.core import (
    binarize,
    boundary_extract,
    boundary_extract_torch,
    difference_image,
    mask_to_png,
    prob_to_png,
    read_mask_png,
)
from PIL import Image


def loop_abs_diff(a, b):
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for c in range(a.shape[2]):
                out[i, j, c] = abs(a[i, j, c] - b[i, j, c])
    return out


def brute_boundary(mask):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if 0 <= y < h and 0 <= x < w and not mask[y, x]:
                    out[i, j] = 1
    return out


masks = arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 1))
unit = st.floats(0, 1, allow_nan=False)


class TestDifferenceImage:
    def test_identical_inputs(self):
        a = np.random.default_rng(0).random((5, 6, 3))
        assert np.all(difference_image(a, a) == 0)

    def test_zero_minus_x(self):
        x = np.random.default_rng(1).random((4, 4, 3))
        np.testing.assert_array_equal(difference_image(np.zeros_like(x), x), x)

    def test_matches_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((4, 4, 3)), rng.random((4, 4, 3))
        np.testing.assert_array_equal(difference_image(a, b), loop_abs_diff(a, b))

    def test_torch_path(self):
        a, b = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
        torch.testing.assert_close(difference_image(a, b), (a - b).abs())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            difference_image(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    @given(arrays(np.float64, (3, 3, 3), elements=unit), arrays(np.float64, (3, 3, 3), elements=unit))
    def test_symmetric(self, a, b):
        np.testing.assert_array_equal(difference_image(a, b), difference_image(b, a))


class TestBinarize:
    def test_inclusive_threshold(self):
        assert binarize(np.full((3, 3), 0.5), 0.5).all()

    def test_below(self):
        assert not binarize(np.full((3, 3), 0.49), 0.5).any()

    def test_matches_loop(self):
        p = np.random.default_rng(3).random((6, 7))
        expected = np.array([[1 if v >= 0.3 else 0 for v in row] for row in p])
        np.testing.assert_array_equal(binarize(p, 0.3), expected)

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            binarize(np.zeros((2, 2)), 1.0)

    @given(arrays(np.float64, (4, 4), elements=unit), st.floats(0.01, 0.98), st.floats(0.0, 0.01))
    def test_monotone_in_threshold(self, p, t, dt):
        lo, hi = binarize(p, t), binarize(p, t + dt)
        assert np.all(hi <= lo)


class TestBoundary:
    def test_empty(self):
        assert not boundary_extract(np.zeros((5, 5), np.uint8)).any()

    def test_single_pixel(self):
        m = np.zeros((5, 5), np.uint8)
        m[2, 2] = 1
        np.testing.assert_array_equal(boundary_extract(m), m)

    def test_square_perimeter(self):
        m = np.zeros((5, 5), np.uint8)
        m[1:4, 1:4] = 1
        b = boundary_extract(m)
        assert b.sum() == 8
        assert b[2, 2] == 0
        np.testing.assert_array_equal(b, brute_boundary(m))

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            boundary_extract(np.full((3, 3), 2))

    @settings(max_examples=200)
    @given(masks)
    def test_matches_brute_force(self, m):
        np.testing.assert_array_equal(boundary_extract(m), brute_boundary(m))

    @given(masks)
    def test_subset(self, m):
        assert np.all(boundary_extract(m) <= m)

    @given(masks)
    def test_idempotent_without_interior(self, m):
        b = boundary_extract(m)
        np.testing.assert_array_equal(boundary_extract(b), b)

    @given(masks)
    def test_torch_agrees(self, m):
        t = torch.from_numpy(m)[None, None].float()
        np.testing.assert_array_equal(boundary_extract_torch(t)[0, 0].numpy().astype(np.uint8),
                                      boundary_extract(m))


def test_png_roundtrip(tmp_path):
    m = np.random.default_rng(4).integers(0, 2, (8, 8)).astype(np.uint8)
    mask_to_png(m, tmp_path / "m.png")
    raw = np.asarray(Image.open(tmp_path / "m.png"))
    assert set(np.unique(raw)) <= {0, 255}
    np.testing.assert_array_equal(read_mask_png(tmp_path / "m.png"), m)

    p = np.array([[0.0, 0.5], [0.25, 1.0]])
    prob_to_png(p, tmp_path / "p.png")
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "p.png")), [[0, 128], [64, 255]])

import math

import numpy as np
import pytest

from surfeltrace.metrics import (
    align_albedo, align_scales, compare_sets, metric_mse, metric_normal_mae, metric_psnr, metric_ssim,
)


def test_identical_images(rng):
    a = rng.random((16, 16, 3))
    assert metric_psnr(a, a) == math.inf
    assert metric_ssim(a, a) == pytest.approx(1.0)


def test_uniform_error_psnr():
    a = np.full((8, 8, 3), 0.3)
    assert metric_psnr(a + 0.1, a) == pytest.approx(20.0)
    assert metric_mse(a + 0.1, a) == pytest.approx(0.01)


def test_masked_mse():
    a, b = np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, 0.0]])
    m = np.array([[False, True], [True, True]])
    assert metric_mse(a, b, m) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        metric_psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_normals_rotated_ninety_degrees():
    gt = np.tile([0.0, 0.0, 1.0], (4, 4, 1))
    pred = np.tile([1.0, 0.0, 0.0], (4, 4, 1))
    assert metric_normal_mae(pred, gt) == pytest.approx(90.0)
    assert metric_normal_mae(gt, gt) == pytest.approx(0.0, abs=1e-6)


def test_normal_mae_ignores_background():
    gt = np.zeros((2, 2, 3))
    gt[0, 0] = (0, 0, 1)
    pred = np.tile([0.0, 0.0, -1.0], (2, 2, 1))
    pred[0, 0] = (0, 0, 1)
    assert metric_normal_mae(pred, gt) == pytest.approx(0.0, abs=1e-6)


def test_align_half_albedo(rng):
    gt = rng.random((8, 8, 3)) + 0.1
    assert np.allclose(align_scales(0.5 * gt, gt), 2.0)
    assert metric_psnr(align_albedo(0.5 * gt, gt), gt) == math.inf
    assert np.allclose(align_scales(gt, gt), 1.0)


def test_align_matches_brute_force(rng):
    pred, gt = rng.random((10, 10, 3)), rng.random((10, 10, 3))
    s = align_scales(pred, gt)
    for c in range(3):
        grid = np.linspace(s[c] - 1e-3, s[c] + 1e-3, 2001)
        err = [((g * pred[..., c] - gt[..., c]) ** 2).sum() for g in grid]
        assert abs(grid[int(np.argmin(err))] - s[c]) <= 1e-6
        closed = (pred[..., c] * gt[..., c]).sum() / (pred[..., c] ** 2).sum()
        assert s[c] == pytest.approx(closed, abs=1e-9)


def test_align_zero_channel_fallback(rng):
    pred = rng.random((4, 4, 3))
    pred[..., 1] = 0.0
    assert align_scales(pred, rng.random((4, 4, 3)))[1] == 1.0


def test_compare_sets(rng):
    a = [rng.random((12, 12, 3)) for _ in range(2)]
    rep = compare_sets(a, a)
    assert rep.psnr == math.inf and rep.ssim == pytest.approx(1.0) and rep.count == 2
    assert "psnr: inf" in rep.lines()
    with pytest.raises(ValueError):
        compare_sets([], [])

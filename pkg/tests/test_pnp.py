"""Minimal-solver and consensus-loop tests for pose-from-correspondences."""

import time

import numpy as np
import pytest

from pose6d.errors import DegenerateConfiguration
from pose6d.geometry import (CameraIntrinsics, Pose, axis_angle_to_matrix,
                             geodesic_distance, project)
from pose6d.pnp import RansacConfig, solve_pnp_ransac

CAM = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0,
                       width=640, height=480)


def synthetic_problem(rng: np.random.Generator, n: int = 50,
                      outlier_fraction: float = 0.0, noise_px: float = 0.0):
    """Random pose plus correspondences, a fraction replaced by junk pixels."""
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.1, 2.5)
    pose = Pose(axis_angle_to_matrix(w),
                np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                          rng.uniform(2.0, 5.0)]))
    points = rng.uniform(-0.5, 0.5, size=(n, 3))
    pixels = project(points, pose, CAM)
    if noise_px > 0:
        pixels = pixels + rng.normal(scale=noise_px, size=pixels.shape)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        pixels[idx, 0] = rng.uniform(0, CAM.width, size=n_out)
        pixels[idx, 1] = rng.uniform(0, CAM.height, size=n_out)
    return pose, points, pixels, n_out


def test_noise_free_recovery() -> None:
    rng = np.random.default_rng(21)
    for _ in range(20):
        gt, points, pixels, _ = synthetic_problem(rng, n=30)
        pose, inliers = solve_pnp_ransac(pixels, points, CAM, seed=0)
        assert geodesic_distance(pose.rotation, gt.rotation) < 1e-6
        assert np.linalg.norm(pose.translation - gt.translation) < 1e-6
        assert inliers.all()
        reproj = project(points, pose, CAM)
        rmse = np.sqrt(np.mean(np.sum((reproj - pixels) ** 2, axis=1)))
        assert rmse < 1e-6


def test_robust_to_thirty_percent_outliers() -> None:
    rng = np.random.default_rng(22)
    for _ in range(20):
        gt, points, pixels, n_out = synthetic_problem(
            rng, n=50, outlier_fraction=0.3)
        pose, inliers = solve_pnp_ransac(pixels, points, CAM, seed=1)
        assert geodesic_distance(pose.rotation, gt.rotation) < 1e-3
        assert np.linalg.norm(pose.translation - gt.translation) < 1e-3
        # The consensus set contains essentially all clean points.
        assert inliers.sum() >= 50 - n_out - 2


def test_deterministic_given_seed() -> None:
    rng = np.random.default_rng(23)
    _, points, pixels, _ = synthetic_problem(rng, n=40, outlier_fraction=0.2)
    p1, m1 = solve_pnp_ransac(pixels, points, CAM, seed=5)
    p2, m2 = solve_pnp_ransac(pixels, points, CAM, seed=5)
    assert np.array_equal(p1.matrix(), p2.matrix())
    assert np.array_equal(m1, m2)


def test_rejects_five_correspondences() -> None:
    rng = np.random.default_rng(24)
    _, points, pixels, _ = synthetic_problem(rng, n=5)
    with pytest.raises(DegenerateConfiguration):
        solve_pnp_ransac(pixels, points, CAM, seed=0)


def test_degenerate_when_no_consensus() -> None:
    rng = np.random.default_rng(25)
    points = rng.uniform(-0.5, 0.5, size=(20, 3))
    pixels = np.stack([rng.uniform(0, 640, size=20),
                       rng.uniform(0, 480, size=20)], axis=1)
    with pytest.raises(DegenerateConfiguration):
        solve_pnp_ransac(pixels, points, CAM,
                         RansacConfig(threshold_px=0.5, iterations=64,
                                      min_inliers=15), seed=0)


def test_small_noise_stays_accurate() -> None:
    rng = np.random.default_rng(26)
    gt, points, pixels, _ = synthetic_problem(rng, n=100, noise_px=0.3)
    pose, _ = solve_pnp_ransac(pixels, points, CAM, seed=2)
    assert geodesic_distance(pose.rotation, gt.rotation) < 5e-3
    assert np.linalg.norm(pose.translation - gt.translation) < 0.01

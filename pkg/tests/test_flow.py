"""Correspondence-field tests against exact render-pair oracles."""

import numpy as np
import pytest

from pose6d.errors import DimMismatch, ImageTooSmall
from pose6d.flow import (FlowConfig, FlowField, build_feature_pyramid,
                         correlate, estimate_flow,
                         forward_backward_consistency, gt_flow_from_geometry,
                         warp)
from pose6d.geometry import (CameraIntrinsics, Pose, axis_angle_to_matrix,
                             look_at_pose)
from pose6d.meshes import box_mesh, icosphere_mesh
from pose6d.render import ImageBuffer, render


def shifted_cam(cam: CameraIntrinsics, dx: int, dy: int) -> CameraIntrinsics:
    """Shifting the principal point translates the render exactly."""
    return CameraIntrinsics(fx=cam.fx, fy=cam.fy, cx=cam.cx + dx,
                            cy=cam.cy + dy, width=cam.width,
                            height=cam.height)


@pytest.fixture
def textured_pair(cam256):
    mesh = box_mesh((1.0, 0.8, 0.6))
    pose = look_at_pose([0.4, 0.5, 0.77], radius=4.0, roll=0.3)
    img, geom = render(mesh, pose, cam256, shading="textured")
    return mesh, pose, img, geom


def test_identity_pair_is_exact(cam256, textured_pair) -> None:
    # matching an image against itself must yield zero flow on texture
    mesh, pose, img, geom = textured_pair
    flow = estimate_flow(img, img)
    sel = geom.mask & flow.valid
    assert sel.sum() > 200
    assert np.abs(flow.du[sel]).max() < 0.1
    assert np.abs(flow.dv[sel]).max() < 0.1


def test_known_integer_shift(cam256, textured_pair) -> None:
    mesh, pose, img, geom = textured_pair
    img_b, _ = render(mesh, pose, shifted_cam(cam256, 12, -4),
                      shading="textured")
    flow = estimate_flow(img, img_b)
    sel = geom.mask & flow.valid
    assert sel.sum() > 200
    epe = np.hypot(flow.du[sel] - 12.0, flow.dv[sel] + 4.0)
    assert np.median(epe) < 0.5


def test_small_rotation_against_geometry_oracle(cam256, textured_pair) -> None:
    mesh, pose, img, geom = textured_pair
    delta = axis_angle_to_matrix(np.deg2rad(10.0) * np.array([0.2, 0.9, 0.1]))
    pose_b = Pose(delta @ pose.rotation, pose.translation)
    img_b, geom_b = render(mesh, pose_b, cam256, shading="textured")
    gt = gt_flow_from_geometry(geom, pose, pose_b, cam256, geom_b=geom_b,
                               diameter=mesh.diameter)
    est = estimate_flow(img, img_b)
    sel = gt.valid & est.valid
    assert sel.sum() > 200
    epe = np.hypot(est.du[sel] - gt.du[sel], est.dv[sel] - gt.dv[sel])
    assert np.median(epe) < 1.5


def test_shift_equivariance(cam256, textured_pair) -> None:
    mesh, pose, img, _ = textured_pair
    img_b, _ = render(mesh, pose, shifted_cam(cam256, 12, -4),
                      shading="textured")
    flow = estimate_flow(img, img_b)
    img_s, geom_s = render(mesh, pose, shifted_cam(cam256, 8, 8),
                           shading="textured")
    img_bs, _ = render(mesh, pose, shifted_cam(cam256, 20, 4),
                       shading="textured")
    flow_s = estimate_flow(img_s, img_bs)
    sel = geom_s.mask & flow_s.valid
    sel[:8, :] = False
    sel[:, :8] = False
    shifted_du = np.roll(np.roll(flow.du, 8, axis=0), 8, axis=1)
    shifted_dv = np.roll(np.roll(flow.dv, 8, axis=0), 8, axis=1)
    shifted_valid = np.roll(np.roll(flow.valid, 8, axis=0), 8, axis=1)
    sel &= shifted_valid
    dev = np.hypot(flow_s.du[sel] - shifted_du[sel],
                   flow_s.dv[sel] - shifted_dv[sel])
    assert np.median(dev) < 0.25


def test_untextured_pixels_invalid() -> None:
    flat = ImageBuffer(np.full((64, 64, 3), 0.5, dtype=np.float32))
    flow = estimate_flow(flat, flat)
    assert not flow.valid.any()
    assert np.all(flow.du == 0) and np.all(flow.dv == 0)


def test_flow_rejects_dim_mismatch() -> None:
    a = ImageBuffer(np.zeros((64, 64, 3), dtype=np.float32))
    b = ImageBuffer(np.zeros((64, 96, 3), dtype=np.float32))
    with pytest.raises(DimMismatch):
        estimate_flow(a, b)


def test_flow_rejects_tiny_image() -> None:
    a = ImageBuffer(np.zeros((16, 16, 3), dtype=np.float32))
    with pytest.raises(ImageTooSmall):
        estimate_flow(a, a)


def test_self_correlation_peaks_on_diagonal(textured_pair) -> None:
    _, _, img, _ = textured_pair
    pyr = build_feature_pyramid(img)
    vol = correlate(pyr.levels[0], pyr.levels[0])
    textured = np.sum(pyr.levels[0] ** 2, axis=2).reshape(-1) > 0
    diag = np.diag(vol.values)
    np.testing.assert_allclose(diag[textured], 1.0, atol=1e-9)
    assert vol.values.min() >= -1.0 - 1e-6
    assert vol.values.max() <= 1.0 + 1e-6


def test_warp_zero_flow_identity(textured_pair) -> None:
    _, _, img, geom = textured_pair
    h, w = geom.mask.shape
    zero = FlowField(np.zeros((h, w)), np.zeros((h, w)),
                     np.ones((h, w), dtype=bool))
    warped_geom = warp(geom, zero)
    np.testing.assert_array_equal(warped_geom.coords, geom.coords)
    np.testing.assert_array_equal(warped_geom.mask, geom.mask)
    warped_img = warp(img, zero)
    np.testing.assert_array_equal(warped_img.data, img.data)


def test_warp_pulls_target_geometry(cam256, textured_pair) -> None:
    # Warping the target-view geometry by the exact flow must land the
    # same model points on the query pixels.
    mesh, pose, img, geom = textured_pair
    delta = axis_angle_to_matrix(np.deg2rad(8.0) * np.array([0.0, 1.0, 0.0]))
    pose_b = Pose(delta @ pose.rotation, pose.translation)
    img_b, geom_b = render(mesh, pose_b, cam256, shading="textured")
    gt = gt_flow_from_geometry(geom, pose, pose_b, cam256, geom_b=geom_b,
                               diameter=mesh.diameter)
    pulled = warp(geom_b, gt)
    sel = pulled.mask & geom.mask
    assert sel.sum() > 200
    err = np.linalg.norm(pulled.coords[sel] - geom.coords[sel], axis=1)
    # Nearest-neighbor gather quantizes to half a pixel of surface motion.
    assert np.median(err) < 0.02 * mesh.diameter


def test_gt_flow_round_trip_consistency(cam256, textured_pair) -> None:
    mesh, pose, img, geom = textured_pair
    delta = axis_angle_to_matrix(np.deg2rad(12.0) * np.array([0.5, 0.5, 0.0]))
    pose_b = Pose(delta @ pose.rotation, pose.translation)
    img_b, geom_b = render(mesh, pose_b, cam256, shading="textured")
    fwd = gt_flow_from_geometry(geom, pose, pose_b, cam256, geom_b=geom_b,
                                diameter=mesh.diameter)
    bwd = gt_flow_from_geometry(geom_b, pose_b, pose, cam256, geom_b=geom,
                                diameter=mesh.diameter)
    err = forward_backward_consistency(fwd, bwd)
    finite = np.isfinite(err)
    assert finite.sum() > 200
    # Exact fields disagree only by nearest-pixel lookup of the backward
    # field, bounded by the local flow gradient over half a pixel.
    assert np.median(err[finite]) < 1.0


def test_gt_flow_back_faces_invalid(cam256, textured_pair) -> None:
    mesh, pose, img, geom = textured_pair
    # A half turn about the vertical axis exposes the opposite side.
    delta = axis_angle_to_matrix(np.array([0.0, np.pi, 0.0]))
    pose_b = Pose(delta @ pose.rotation, pose.translation)
    _, geom_b = render(mesh, pose_b, cam256, shading="textured")
    gt = gt_flow_from_geometry(geom, pose, pose_b, cam256, geom_b=geom_b,
                               diameter=mesh.diameter)
    assert gt.valid.sum() < 0.05 * geom.mask.sum()


def test_forward_backward_consistency_brute_force() -> None:
    # Independent loop oracle over a tiny random field.
    rng = np.random.default_rng(77)
    h, w = 12, 10
    f = FlowField(rng.uniform(-3, 3, (h, w)), rng.uniform(-3, 3, (h, w)),
                  rng.random((h, w)) > 0.2)
    b = FlowField(rng.uniform(-3, 3, (h, w)), rng.uniform(-3, 3, (h, w)),
                  rng.random((h, w)) > 0.2)
    got = forward_backward_consistency(f, b)
    for i in range(h):
        for j in range(w):
            if not f.valid[i, j]:
                assert got[i, j] == np.inf
                continue
            qx = j + 0.5 + f.du[i, j]
            qy = i + 0.5 + f.dv[i, j]
            tj, ti = int(np.floor(qx)), int(np.floor(qy))
            if not (0 <= ti < h and 0 <= tj < w) or not b.valid[ti, tj]:
                assert got[i, j] == np.inf
                continue
            expect = np.hypot(f.du[i, j] + b.du[ti, tj],
                              f.dv[i, j] + b.dv[ti, tj])
            assert abs(got[i, j] - expect) < 1e-6


def test_flow_deterministic(textured_pair, cam256) -> None:
    mesh, pose, img, _ = textured_pair
    img_b, _ = render(mesh, pose, shifted_cam(cam256, 6, 3),
                      shading="textured")
    f1 = estimate_flow(img, img_b)
    f2 = estimate_flow(img, img_b)
    assert np.array_equal(f1.du, f2.du)
    assert np.array_equal(f1.dv, f2.dv)
    assert np.array_equal(f1.valid, f2.valid)

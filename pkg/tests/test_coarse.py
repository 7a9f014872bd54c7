"""Template scoring, voting and coarse-pose tests."""

import numpy as np
import pytest

from pose6d.coarse import (CoarseConfig, ScoredTemplate, Template,
                           build_template_set, estimate_coarse_pose,
                           estimate_roll, medoid_vote, pose_from_candidates,
                           rotate_template_view, score_template,
                           select_templates, template_radius)
from pose6d.errors import InsufficientCorrespondences, KTooLarge
from pose6d.geometry import (CameraIntrinsics, Pose, geodesic_distance,
                             project, rotation_z)
from pose6d.meshes import box_mesh
from pose6d.render import GeometryMap, render

CAM = CameraIntrinsics(fx=800.0, fy=800.0, cx=128.0, cy=128.0,
                       width=256, height=256)
MESH = box_mesh((1.0, 0.8, 0.6))
CFG = CoarseConfig(n_templates=16, k=3, seed=5)


@pytest.fixture(scope="module")
def templates():
    return build_template_set(MESH, CAM, CFG)


def test_config_validation() -> None:
    with pytest.raises(ValueError):
        CoarseConfig(n_templates=0)
    with pytest.raises(ValueError):
        CoarseConfig(vote="plurality")
    with pytest.raises(ValueError):
        CoarseConfig(fill=0.0)


def test_template_set_basics(templates) -> None:
    assert len(templates) == 16
    assert [t.index for t in templates] == list(range(16))
    radius = template_radius(MESH, CAM, CFG.fill)
    for t in templates:
        assert abs(np.linalg.norm(t.pose.translation) - radius) < 1e-9
        assert t.geometry.mask.any()


def test_template_reprojection_closure(templates) -> None:
    # Each geometry pixel stores the model point seen through it, so
    # projecting that point under the template pose must land inside the
    # pixel (rasterization samples pixel centers).
    for t in templates[:4]:
        ii, jj = np.nonzero(t.geometry.mask)
        sel = slice(0, len(ii), 37)
        pts = t.geometry.coords[ii[sel], jj[sel]].astype(np.float64)
        uv = project(pts, t.pose, CAM)
        du = np.abs(uv[:, 0] - (jj[sel] + 0.5))
        dv = np.abs(uv[:, 1] - (ii[sel] + 0.5))
        assert np.percentile(np.maximum(du, dv), 99) <= 0.5 + 1e-6


def test_self_match_scores_highest(templates) -> None:
    t = templates[3]
    self_score = score_template(t, t.image)
    assert self_score > 0.9
    other = score_template(templates[11], t.image)
    assert self_score > other


def test_select_templates_ordering(templates) -> None:
    scored = [ScoredTemplate(t, s) for t, s in
              zip(templates[:5], [0.2, 0.8, 0.8, -0.1, 0.5])]
    picked = select_templates(scored, 3)
    assert [p.template.index for p in picked] == [1, 2, 4]
    assert [p.score for p in picked] == [0.8, 0.8, 0.5]
    with pytest.raises(KTooLarge):
        select_templates(scored, 6)


def geometry_from(coords, mask):
    return GeometryMap(coords=coords,
                       depth=np.where(mask, 1.0, 0.0), mask=mask)


def brute_force_medoid(stacks, valids):
    k, h, w, _ = stacks.shape
    out = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            cands = [(c, stacks[c, i, j]) for c in range(k)
                     if valids[c, i, j]]
            if not cands:
                continue
            best_idx, best_sum = None, None
            for c, pc in cands:
                s = sum(np.linalg.norm(pc - po) for co, po in cands
                        if co != c)
                if best_sum is None or s < best_sum:
                    best_idx, best_sum = c, s
            out[i, j] = stacks[best_idx, i, j]
            mask[i, j] = True
    return out, mask


def test_medoid_vote_matches_brute_force(rng) -> None:
    k, h, w = 5, 7, 6
    stacks = rng.uniform(-1, 1, size=(k, h, w, 3)).astype(np.float32)
    valids = rng.random((k, h, w)) < 0.7
    maps = [geometry_from(stacks[c], valids[c]) for c in range(k)]
    voted = medoid_vote(maps)
    expect, expect_mask = brute_force_medoid(
        np.stack([m.coords for m in maps]).astype(np.float64),
        valids)
    assert np.array_equal(voted.mask, expect_mask)
    assert np.allclose(voted.coords[expect_mask], expect[expect_mask])
    # every voted coordinate is one of the candidates
    for i, j in zip(*np.nonzero(voted.mask)):
        options = [stacks[c, i, j] for c in range(k) if valids[c, i, j]]
        assert any(np.array_equal(voted.coords[i, j], o) for o in options)


def test_mean_vote(rng) -> None:
    k, h, w = 3, 4, 4
    stacks = rng.uniform(-1, 1, size=(k, h, w, 3)).astype(np.float32)
    valids = np.ones((k, h, w), dtype=bool)
    valids[2, 0, 0] = False
    maps = [geometry_from(stacks[c], valids[c]) for c in range(k)]
    voted = medoid_vote(maps, mode="mean")
    assert np.allclose(voted.coords[1, 1],
                       stacks[:, 1, 1].astype(np.float64).mean(axis=0),
                       atol=1e-6)
    assert np.allclose(voted.coords[0, 0],
                       stacks[:2, 0, 0].astype(np.float64).mean(axis=0),
                       atol=1e-6)


def test_vote_empty_pixels_unmasked(rng) -> None:
    coords = rng.uniform(size=(2, 3, 3, 3)).astype(np.float32)
    valids = np.zeros((2, 3, 3), dtype=bool)
    valids[0, 1, 1] = True
    maps = [geometry_from(coords[c], valids[c]) for c in range(2)]
    voted = medoid_vote(maps)
    assert voted.mask.sum() == 1
    assert voted.mask[1, 1]


def test_plant_the_answer(templates) -> None:
    hits = 0
    for idx in (2, 9, 14):
        t = templates[idx]
        pose, voted, report = estimate_coarse_pose(
            t.image, t.geometry.mask, templates, MESH, CAM, CFG)
        assert report["selected"][0] == idx
        rot_err = geodesic_distance(pose.rotation, t.pose.rotation)
        trans_err = np.linalg.norm(pose.translation - t.pose.translation)
        if rot_err < np.deg2rad(5) and trans_err < 0.05 * MESH.diameter:
            hits += 1
        assert voted.mask.sum() >= 6
    assert hits == 3


def test_insufficient_correspondences(templates) -> None:
    t = templates[0]
    empty_mask = np.zeros_like(t.geometry.mask)
    with pytest.raises(InsufficientCorrespondences):
        estimate_coarse_pose(t.image, empty_mask, templates, MESH, CAM, CFG)


def test_roll_estimate_recovers_synthetic_rotation(templates) -> None:
    t = templates[7]
    for deg in (60.0, -75.0, 140.0):
        rolled = rotate_template_view(t, np.deg2rad(deg))
        est = np.rad2deg(estimate_roll(t, rolled.image))
        assert abs(est - deg) < 0.5


def test_roll_estimate_on_rendered_roll(templates) -> None:
    # camera-frame roll of the pose rotates the image about the
    # principal point, so the estimate must track the applied angle
    t = templates[2]
    for deg in (25.0, -120.0):
        rz = rotation_z(np.deg2rad(deg))
        img, _ = render(MESH, Pose(rz @ t.pose.rotation,
                                   rz @ t.pose.translation),
                        CAM, shading="textured")
        est = np.rad2deg(estimate_roll(t, img))
        assert abs(est - deg) < 1.5


def test_rotated_view_keeps_model_points(templates) -> None:
    t = templates[4]
    view = rotate_template_view(t, np.deg2rad(73.0))
    originals = {tuple(c) for c in t.geometry.coords[t.geometry.mask]}
    rotated = view.geometry.coords[view.geometry.mask]
    for c in rotated[:: max(1, len(rotated) // 200)]:
        assert tuple(c) in originals
    area, area_rot = t.geometry.mask.sum(), view.geometry.mask.sum()
    assert abs(int(area_rot) - int(area)) < 0.03 * area


def test_roll_alignment_rescues_score(templates) -> None:
    rz = rotation_z(np.deg2rad(80.0))
    for idx in (5, 7):
        t = templates[idx]
        img, _ = render(MESH, Pose(rz @ t.pose.rotation,
                                   rz @ t.pose.translation),
                        CAM, shading="textured")
        aligned = score_template(t, img)
        unaligned = score_template(t, img, roll=0.0)
        assert aligned > 0.0
        assert aligned > unaligned + 0.5


def test_exact_pose_template_beats_far_templates(templates) -> None:
    # controlled pose-gap check: the template rendered at the query's
    # own pose must outrank every template at least 45 degrees away
    for idx in range(10):
        query = templates[idx].image
        scores = {t.index: score_template(t, query) for t in templates}
        for t in templates:
            gap = geodesic_distance(t.pose.rotation,
                                    templates[idx].pose.rotation)
            if gap >= np.deg2rad(45.0):
                assert scores[idx] > scores[t.index]


def test_report_screen_layout(templates) -> None:
    t = templates[6]
    _, _, report = estimate_coarse_pose(
        t.image, t.geometry.mask, templates, MESH, CAM, CFG)
    n = len(templates)
    n_keep = max(CFG.k, int(np.ceil(0.6 * n)))
    assert len(report["scores"]) == n
    assert sum(s is None for s in report["scores"]) == n - n_keep
    assert len(report["rolls"]) == n
    assert all(isinstance(r, float) for r in report["rolls"])
    assert len(report["selected"]) == CFG.k


def test_pose_from_candidates_matches_full_run(templates) -> None:
    t = templates[9]
    pose, voted, report = estimate_coarse_pose(
        t.image, t.geometry.mask, templates, MESH, CAM, CFG,
        return_candidates=True)
    cands = report["candidates"]
    assert len(cands) == CFG.k
    re_pose, re_voted = pose_from_candidates(cands, CAM, CFG)
    assert np.array_equal(re_pose.matrix(), pose.matrix())
    assert np.array_equal(re_voted.mask, voted.mask)

"""Metric oracles: rigid-offset MSSD, pinhole MSPD arithmetic, depth-map
VSD cases, and a hand-computed recall worksheet."""

import dataclasses
import math

import numpy as np
import pytest

from pose6d.errors import EmptyInput, NonPositiveDepth
from pose6d.evaluation import (EvalRecord, MetricThresholds, average_recall,
                               bootstrap_ar, evaluate_record, failed_record,
                               mspd, mssd, run_ablation, vsd)
from pose6d.geometry import Pose, compose, identity_pose, look_at_pose, rotation_z
from pose6d.meshes import TriangleMesh, box_mesh, cylinder_mesh


BOX = box_mesh((1.0, 1.0, 1.0))


def pose_at(t, rotation=None):
    r = np.eye(3) if rotation is None else rotation
    return Pose(r, np.asarray(t, dtype=np.float64))


def test_metrics_zero_at_ground_truth(cam256):
    gt = pose_at([0.0, 0.0, 4.0])
    assert mssd(gt, gt, BOX) == 0.0
    assert mspd(gt, gt, BOX, cam256) == 0.0
    assert vsd(gt, gt, BOX, cam256, tau=0.05) == 0.0


def test_mssd_pure_translation_is_offset_norm():
    gt = look_at_pose([0.3, -0.5, 0.81], 4.0)
    d = np.array([0.1, -0.2, 0.05])
    pred = Pose(gt.rotation, gt.translation + d)
    assert mssd(pred, gt, BOX) == pytest.approx(np.linalg.norm(d), rel=1e-12)


def test_mssd_symmetry_toggle():
    sym_mesh = cylinder_mesh(segments=16, symmetry_order=8)
    bare_mesh = cylinder_mesh(segments=16, symmetry_order=1)
    gt = look_at_pose([0.4, 0.2, 0.89], 3.0, roll=0.4)
    step = Pose(rotation_z(2.0 * math.pi / 8.0), np.zeros(3))
    pred = compose(gt, step)
    assert mssd(pred, gt, sym_mesh) < 1e-12
    assert mssd(pred, gt, bare_mesh) > 0.3


def test_mspd_symmetric_rotation_is_zero(cam256):
    mesh = cylinder_mesh(segments=16, symmetry_order=8)
    gt = pose_at([0.0, 0.0, 4.0])
    pred = compose(gt, Pose(rotation_z(2.0 * math.pi / 8.0), np.zeros(3)))
    assert mspd(pred, gt, mesh, cam256) < 1e-9


def test_mspd_depth_shift_matches_pinhole_arithmetic(cam256):
    gt = pose_at([0.0, 0.0, 4.0])
    pred = pose_at([0.0, 0.0, 4.4])
    worst = 0.0
    for x in (-0.5, 0.5):
        for y in (-0.5, 0.5):
            for z in (-0.5, 0.5):
                du = cam256.fx * x / (z + 4.0) - cam256.fx * x / (z + 4.4)
                dv = cam256.fy * y / (z + 4.0) - cam256.fy * y / (z + 4.4)
                worst = max(worst, math.hypot(du, dv))
    got = mspd(pred, gt, BOX, cam256)
    assert got == pytest.approx(worst, rel=1e-12)
    assert got > 0.0


def test_mspd_behind_camera_raises(cam256):
    gt = pose_at([0.0, 0.0, 4.0])
    with pytest.raises(NonPositiveDepth):
        mspd(pose_at([0.0, 0.0, -4.0]), gt, BOX, cam256)


def test_mssd_invariant_to_vertex_permutation(rng):
    perm = rng.permutation(BOX.vertices.shape[0])
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    shuffled = TriangleMesh(BOX.vertices[perm], inv[BOX.triangles])
    gt = look_at_pose([0.1, 0.7, 0.7], 4.0)
    pred = Pose(gt.rotation, gt.translation + np.array([0.02, 0.0, -0.04]))
    assert mssd(pred, gt, shuffled) == pytest.approx(mssd(pred, gt, BOX))


def test_mssd_monotone_under_added_vertices():
    far = np.vstack([BOX.vertices, [[1.5, 0.0, 0.0]]])
    bigger = TriangleMesh(far, BOX.triangles)
    gt = look_at_pose([0.0, 0.6, 0.8], 4.0)
    pred = compose(gt, Pose(rotation_z(0.1), np.zeros(3)))
    assert mssd(pred, gt, bigger) >= mssd(pred, gt, BOX)


def test_vsd_disjoint_renders_score_one(cam256):
    small = box_mesh((0.5, 0.5, 0.5))
    gt = pose_at([0.0, 0.0, 6.0])
    pred = pose_at([0.8, 0.0, 6.0])
    assert vsd(pred, gt, small, cam256, tau=0.1) == 1.0


def test_vsd_half_tau_depth_shift_passes_shared_pixels(cam256):
    from pose6d.render import render

    tau = 0.1
    gt = pose_at([0.0, 0.0, 4.0])
    pred = pose_at([0.0, 0.0, 4.0 + tau / 2.0])
    _, gp = render(BOX, pred, cam256)
    _, gg = render(BOX, gt, cam256)
    both = gp.mask & gg.mask
    union = gp.mask | gg.mask
    # every pixel seen under both poses agrees within tau, so the only
    # error is the silhouette rim present in one render alone
    rim = (union.sum() - both.sum()) / union.sum()
    err = vsd(pred, gt, BOX, cam256, tau=tau)
    assert err == pytest.approx(rim, abs=0)
    assert 0.0 < err < 0.1


def test_vsd_monotone_in_tau(cam256):
    gt = pose_at([0.0, 0.0, 4.0])
    pred = pose_at([0.05, 0.02, 4.15])
    errs = [vsd(pred, gt, BOX, cam256, tau=t) for t in (0.02, 0.1, 0.3)]
    assert errs[0] >= errs[1] >= errs[2]


def test_threshold_grids_default_shape():
    th = MetricThresholds()
    for grid in (th.vsd_taus, th.vsd_cutoffs, th.mssd_cutoffs,
                 th.mspd_cutoffs):
        assert len(grid) == 10
        assert all(b > a > 0 for a, b in zip(grid, grid[1:]))
    assert th.vsd_taus[0] == pytest.approx(0.05)
    assert th.mspd_cutoffs[-1] == pytest.approx(50.0)


def test_threshold_grids_reject_bad_values():
    with pytest.raises(ValueError):
        MetricThresholds(vsd_taus=(0.2, 0.1))
    with pytest.raises(ValueError):
        MetricThresholds(mssd_cutoffs=(-0.1, 0.2))
    with pytest.raises(ValueError):
        MetricThresholds(mspd_cutoffs=())


def _worksheet_record(i, vsd_flags, mssd_flags, mspd_flags, th):
    errors = {"vsd": np.full(len(th.vsd_taus), 0.25),
              "mssd": 0.15, "mspd": 7.0}
    passes = {"vsd": np.asarray(vsd_flags, dtype=bool),
              "mssd": np.asarray(mssd_flags, dtype=bool),
              "mspd": np.asarray(mspd_flags, dtype=bool)}
    return EvalRecord(f"obj{i}", identity_pose(), identity_pose(),
                      errors, passes)


def test_average_recall_hand_worksheet():
    th = MetricThresholds(vsd_taus=(0.2, 0.4), vsd_cutoffs=(0.3,),
                          mssd_cutoffs=(0.1, 0.2), mspd_cutoffs=(5.0, 10.0))
    records = [
        _worksheet_record(0, [[1], [1]], [1, 1], [1, 1], th),
        _worksheet_record(1, [[1], [0]], [0, 1], [0, 0], th),
        _worksheet_record(2, [[0], [0]], [0, 0], [1, 0], th),
        _worksheet_record(3, [[1], [0]], [1, 1], [0, 1], th),
    ]
    summary = average_recall(records)
    assert summary.vsd_recall == pytest.approx(4 / 8, abs=0)
    assert summary.mssd_recall == pytest.approx(5 / 8, abs=0)
    assert summary.mspd_recall == pytest.approx(4 / 8, abs=0)
    assert summary.ar == pytest.approx((4 / 8 + 5 / 8 + 4 / 8) / 3.0)
    shuffled = [records[2], records[0], records[3], records[1]]
    assert average_recall(shuffled).ar == summary.ar


def test_average_recall_empty_raises():
    with pytest.raises(EmptyInput):
        average_recall([])


def test_evaluate_record_perfect_and_broken(cam256):
    th = MetricThresholds()
    gt = pose_at([0.0, 0.0, 4.0])
    good = evaluate_record("box", gt, gt, BOX, cam256, th)
    assert good.passes["vsd"].all()
    assert good.passes["mssd"].all() and good.passes["mspd"].all()
    assert good.errors["mssd"] == 0.0

    behind = evaluate_record("box", pose_at([0.0, 0.0, -4.0]), gt, BOX,
                             cam256, th)
    assert not behind.passes["mssd"].any()
    assert math.isinf(behind.errors["mspd"])

    missing = evaluate_record("box", None, gt, BOX, cam256, th)
    assert missing.estimate is None
    assert not missing.passes["vsd"].any()


def test_failed_record_counts_as_all_misses():
    th = MetricThresholds()
    rec = failed_record("obj", identity_pose(), th)
    summary = average_recall([rec])
    assert summary.ar == 0.0


def test_bootstrap_interval_brackets_ar():
    th = MetricThresholds(vsd_taus=(0.2,), vsd_cutoffs=(0.3,),
                          mssd_cutoffs=(0.1,), mspd_cutoffs=(5.0,))
    records = [_worksheet_record(i, [[i % 2]], [i % 2], [i % 2], th)
               for i in range(20)]
    lo, hi = bootstrap_ar(records, n_boot=300, seed=5)
    ar = average_recall(records).ar
    assert lo <= ar <= hi
    assert (lo, hi) == bootstrap_ar(records, n_boot=300, seed=5)


@dataclasses.dataclass(frozen=True)
class _FakeConfig:
    n_templates: int = 128
    k_selected: int = 4
    vote_mode: str = "medoid"
    attention_mode: str = "cg"
    estimator: str = "geometric"


def test_run_ablation_table_layout():
    th = MetricThresholds(vsd_taus=(0.2,), vsd_cutoffs=(0.3,),
                          mssd_cutoffs=(0.1,), mspd_cutoffs=(5.0,))

    def runner(scenes, config):
        hit = 1 if config.n_templates >= 128 else 0
        return [_worksheet_record(i, [[hit]], [hit], [hit], th)
                for i in range(8)]

    rows = run_ablation("n_templates", scenes=None,
                        base_config=_FakeConfig(), runner=runner, n_boot=50)
    assert [r["value"] for r in rows] == [64, 128, 256]
    assert [r["ar"] for r in rows] == [0.0, 1.0, 1.0]
    assert all(r["ci_low"] <= r["ar"] <= r["ci_high"] for r in rows)

    k_rows = run_ablation("k_selected", None, _FakeConfig(), runner=runner,
                          n_boot=50)
    assert [r["value"] for r in k_rows] == [1, 2, 4, 8]

    vote_rows = run_ablation("vote_mode", None, _FakeConfig(), runner=runner,
                             n_boot=50)
    assert [r["value"] for r in vote_rows] == ["medoid", "mean"]

    with pytest.raises(ValueError):
        run_ablation("learning_rate", None, _FakeConfig(), runner=runner)

"""Pose-error metrics and recall aggregation.

Three complementary errors: VSD compares rendered depth maps over the
union of visible pixels, MSSD takes the worst vertex distance in 3D,
and MSPD the worst vertex distance in projection.  The surface metrics
are minimized over the object's declared symmetries so equivalent poses
score zero.  ``average_recall`` folds per-threshold pass flags into the
scalar the ablation tables report.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, EmptyRender, NonPositiveDepth
from .geometry import (CameraIntrinsics, Pose, compose, project, seeded_rng,
                       transform_points)
from .meshes import TriangleMesh
from .render import render

_METRICS = ("vsd", "mssd", "mspd")

# sweep axes the ablation harness understands, with their swept values
_SWEEPS = {
    "n_templates": (64, 128, 256),
    "k_selected": (1, 2, 4, 8),
    "vote_mode": ("medoid", "mean"),
    "attention_mode": ("cg", "vanilla"),
    "estimator": ("geometric", "learned"),
}

# reference image width the pixel cutoffs are quoted at
_MSPD_BASE_WIDTH = 640.0


def _grid(start: float, stop: float, step: float) -> tuple[float, ...]:
    n = int(round((stop - start) / step)) + 1
    return tuple(round(start + i * step, 10) for i in range(n))


def _check_ascending(name: str, values) -> tuple[float, ...]:
    vals = tuple(float(v) for v in values)
    if not vals:
        raise ValueError(f"{name} must be non-empty")
    if any(v <= 0 for v in vals):
        raise ValueError(f"{name} must be positive")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{name} must be sorted strictly ascending")
    return vals


@dataclass(frozen=True)
class MetricThresholds:
    """Cutoff grids for the three metrics.

    vsd_taus are depth-mismatch tolerances and mssd_cutoffs error
    cutoffs, both as fractions of the object diameter; vsd_cutoffs cut
    the VSD error fraction itself; mspd_cutoffs are pixels quoted at a
    640-wide image and scaled by actual width over 640 when applied.
    """

    vsd_taus: tuple = _grid(0.05, 0.5, 0.05)
    vsd_cutoffs: tuple = _grid(0.05, 0.5, 0.05)
    mssd_cutoffs: tuple = _grid(0.05, 0.5, 0.05)
    mspd_cutoffs: tuple = _grid(5.0, 50.0, 5.0)

    def __post_init__(self) -> None:
        for name in ("vsd_taus", "vsd_cutoffs", "mssd_cutoffs",
                     "mspd_cutoffs"):
            object.__setattr__(self, name,
                               _check_ascending(name, getattr(self, name)))


@dataclass(frozen=True)
class EvalRecord:
    """Per-estimate errors and threshold outcomes.

    errors holds "vsd" as a per-tau array and "mssd"/"mspd" as floats;
    passes holds boolean grids shaped (taus, cutoffs) for VSD and
    (cutoffs,) for the other two.  A failed estimate is represented by
    estimate=None with infinite errors and all-False flags.
    """

    object_id: str
    gt: Pose
    estimate: Pose | None
    errors: dict
    passes: dict

    def __post_init__(self) -> None:
        if set(self.errors) != set(_METRICS) or set(self.passes) != set(
                _METRICS):
            raise ValueError("errors and passes must cover vsd/mssd/mspd")
        vsd_err = np.asarray(self.errors["vsd"], dtype=np.float64)
        if vsd_err.ndim != 1:
            raise ValueError("vsd error must be one value per tau")
        checks = [vsd_err, np.float64(self.errors["mssd"]),
                  np.float64(self.errors["mspd"])]
        for arr in checks:
            if np.any(np.isnan(arr)) or np.any(arr < 0):
                raise ValueError("errors must be non-negative (inf allowed)")
        if np.asarray(self.passes["vsd"]).shape[0] != vsd_err.shape[0]:
            raise ValueError("vsd pass grid rows must match the tau count")


def mssd(pred: Pose, gt: Pose, mesh: TriangleMesh) -> float:
    """Maximum surface distance, minimized over declared symmetries."""
    pv = transform_points(pred, mesh.vertices)
    best = np.inf
    for sym in mesh.symmetries:
        gv = transform_points(compose(gt, sym), mesh.vertices)
        worst = float(np.max(np.linalg.norm(pv - gv, axis=1)))
        best = min(best, worst)
    return best


def mspd(pred: Pose, gt: Pose, mesh: TriangleMesh,
         cam: CameraIntrinsics) -> float:
    """Maximum projection distance in pixels, minimized over symmetries.

    Raises:
        NonPositiveDepth: a vertex lands at or behind the camera plane
            under either pose.
    """
    pp = project(mesh.vertices, pred, cam)
    best = np.inf
    for sym in mesh.symmetries:
        gp = project(mesh.vertices, compose(gt, sym), cam)
        worst = float(np.max(np.linalg.norm(pp - gp, axis=1)))
        best = min(best, worst)
    return best


def vsd_errors(pred: Pose, gt: Pose, mesh: TriangleMesh,
               cam: CameraIntrinsics, taus, delta: float = 0.015,
               gt_geom=None) -> np.ndarray:
    """Visible surface discrepancy for a whole tau grid at once.

    Renders each pose once and sweeps the tolerances over the shared
    depth maps; ``gt_geom`` lets a caller scoring many estimates against
    one ground truth reuse its render.

    Raises:
        EmptyRender: either pose pushes the object out of the viewport.
    """
    taus = np.asarray(taus, dtype=np.float64)
    if np.any(taus <= 0):
        raise ValueError("tau must be positive")
    _, gp = render(mesh, pred, cam)
    gg = gt_geom if gt_geom is not None else render(mesh, gt, cam)[1]
    both = gp.mask & gg.mask
    union = int((gp.mask | gg.mask).sum())
    gap = np.abs(gp.depth.astype(np.float64) -
                 gg.depth.astype(np.float64))[both]
    single = union - int(both.sum())
    return np.array([(int((gap > tau).sum()) + single) / union
                     for tau in taus])


def vsd(pred: Pose, gt: Pose, mesh: TriangleMesh, cam: CameraIntrinsics,
        tau: float, delta: float = 0.015) -> float:
    """Visible surface discrepancy between depth renders of both poses.

    Over the union of the two visibility masks, a pixel counts as wrong
    when only one render covers it or when both do and the depths differ
    by more than ``tau`` (model units).  Visibility is checked against
    the scene depth within ``delta``; scenes here contain only the
    object itself, so its own render is the scene and every rasterized
    pixel is visible regardless of delta.

    Raises:
        EmptyRender: either pose pushes the object out of the viewport.
    """
    return float(vsd_errors(pred, gt, mesh, cam, [tau], delta=delta)[0])


def evaluate_record(object_id: str, pred: Pose | None, gt: Pose,
                    mesh: TriangleMesh, cam: CameraIntrinsics,
                    thresholds: MetricThresholds, delta: float = 0.015,
                    gt_geom=None) -> EvalRecord:
    """Score one estimate against ground truth on all three metrics.

    pred=None marks an upstream failure.  A pose that breaks a metric's
    own preconditions (behind-camera vertices, empty render) scores
    infinite error on every metric rather than raising: a broken
    estimate is a miss, not an evaluation bug.  ``gt_geom`` optionally
    carries the ground-truth render for reuse across estimates.
    """
    if pred is None:
        return failed_record(object_id, gt, thresholds)
    try:
        mssd_err = mssd(pred, gt, mesh)
        mspd_err = mspd(pred, gt, mesh, cam)
        vsd_errs = vsd_errors(
            pred, gt, mesh, cam,
            [frac * mesh.diameter for frac in thresholds.vsd_taus],
            delta=delta, gt_geom=gt_geom)
    except (NonPositiveDepth, EmptyRender):
        return failed_record(object_id, gt, thresholds, estimate=pred)
    mspd_scale = cam.width / _MSPD_BASE_WIDTH
    passes = {
        "vsd": vsd_errs[:, None] < np.asarray(thresholds.vsd_cutoffs)[None, :],
        "mssd": mssd_err < np.asarray(thresholds.mssd_cutoffs) * mesh.diameter,
        "mspd": mspd_err < np.asarray(thresholds.mspd_cutoffs) * mspd_scale,
    }
    errors = {"vsd": vsd_errs, "mssd": mssd_err, "mspd": mspd_err}
    return EvalRecord(object_id, gt, pred, errors, passes)


def failed_record(object_id: str, gt: Pose, thresholds: MetricThresholds,
                  estimate: Pose | None = None) -> EvalRecord:
    """All-fail record for an entry whose estimate crashed or is unusable."""
    n_tau = len(thresholds.vsd_taus)
    errors = {"vsd": np.full(n_tau, np.inf), "mssd": np.inf, "mspd": np.inf}
    passes = {
        "vsd": np.zeros((n_tau, len(thresholds.vsd_cutoffs)), dtype=bool),
        "mssd": np.zeros(len(thresholds.mssd_cutoffs), dtype=bool),
        "mspd": np.zeros(len(thresholds.mspd_cutoffs), dtype=bool),
    }
    return EvalRecord(object_id, gt, estimate, errors, passes)


@dataclass(frozen=True)
class RecallSummary:
    """Per-metric recalls and their mean."""

    ar: float
    vsd_recall: float
    mssd_recall: float
    mspd_recall: float

    def as_dict(self) -> dict:
        return {"ar": self.ar, "vsd_recall": self.vsd_recall,
                "mssd_recall": self.mssd_recall,
                "mspd_recall": self.mspd_recall}


def average_recall(records: list) -> RecallSummary:
    """Mean pass fraction per metric over its threshold grid, then AR.

    Every record carries one pass flag per grid cell; recall is the
    mean over records and cells, and AR the mean of the three recalls.

    Raises:
        EmptyInput: no records.
    """
    if not records:
        raise EmptyInput("no evaluation records")
    recalls = {}
    for metric in _METRICS:
        flags = np.stack([np.asarray(r.passes[metric]) for r in records])
        recalls[metric] = float(flags.mean())
    ar = float(np.mean([recalls[m] for m in _METRICS]))
    return RecallSummary(ar, recalls["vsd"], recalls["mssd"],
                         recalls["mspd"])


def bootstrap_ar(records: list, n_boot: int = 200,
                 seed: int = 0) -> tuple[float, float]:
    """95% percentile bootstrap interval for AR, resampling records."""
    if not records:
        raise EmptyInput("no evaluation records")
    rng = seeded_rng(seed, 11)
    n = len(records)
    samples = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        samples[b] = average_recall([records[i] for i in idx]).ar
    return (float(np.percentile(samples, 2.5)),
            float(np.percentile(samples, 97.5)))


def run_ablation(sweep: str, scenes, base_config, runner=None,
                 n_boot: int = 200, seed: int = 0) -> list:
    """Sweep one configuration axis and report AR per setting.

    Each row re-runs the pipeline over the scene set with a single
    field of ``base_config`` replaced; ``runner(scenes, config)`` must
    return evaluation records.  Rows carry the per-metric recalls and a
    bootstrap interval on AR.
    """
    if sweep not in _SWEEPS:
        raise ValueError(f"unknown sweep axis: {sweep!r}")
    if runner is None:
        from .pipeline import run_scenes as runner  # deferred: pipeline imports this module
    rows = []
    for value in _SWEEPS[sweep]:
        config = dataclasses.replace(base_config, **{sweep: value})
        records = runner(scenes, config)
        summary = average_recall(records)
        lo, hi = bootstrap_ar(records, n_boot=n_boot, seed=seed)
        rows.append({"sweep": sweep, "value": value,
                     "ar": summary.ar, "ci_low": lo, "ci_high": hi,
                     **{f"{m}_recall": getattr(summary, f"{m}_recall")
                        for m in _METRICS}})
    return rows

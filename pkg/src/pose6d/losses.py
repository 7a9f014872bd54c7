"""Training objectives with analytic gradients.

Each loss returns a LossValue carrying the scalar and, where defined, the
gradient with respect to the loss's immediate input; network weights are
never differentiated here (the micro-training harness uses finite
differences for those).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import EncodedGeometryMap
from .errors import (DimMismatch, EmptyMask, EmptySequence, LengthMismatch)
from .geometry import Pose, axis_angle_to_matrix
from .meshes import TriangleMesh


@dataclass(frozen=True)
class LossValue:
    """Scalar objective plus optional flat gradient w.r.t. its input."""

    value: float
    gradient: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError("loss value must be finite and non-negative")
        if self.gradient is not None and not np.all(np.isfinite(self.gradient)):
            raise ValueError("gradient must be finite")


@dataclass(frozen=True)
class GridConfig:
    """Lattice resolution for the pose loss; 3 points per axis gives the
    27-point bounding-box grid."""

    points_per_axis: int = 3

    def __post_init__(self) -> None:
        if self.points_per_axis < 2:
            raise ValueError("need at least 2 lattice points per axis")


def geo_loss(pred: EncodedGeometryMap, gt: EncodedGeometryMap) -> LossValue:
    """Mean absolute difference over gt-masked pixels and all channels.

    The gradient (w.r.t. pred.values, flattened) is sign(pred - gt)
    divided by the number of contributing entries, zero off the mask.
    """
    if pred.values.shape != gt.values.shape:
        raise DimMismatch("encoded map shapes differ")
    mask = gt.mask
    if not mask.any():
        raise EmptyMask("geo loss over an empty mask")
    diff = pred.values[mask] - gt.values[mask]
    count = diff.size
    grad = np.zeros_like(pred.values)
    grad[mask] = np.sign(diff) / count
    return LossValue(float(np.abs(diff).mean()), grad.ravel())


def _bbox_lattice(mesh: TriangleMesh, cfg: GridConfig) -> np.ndarray:
    lo, hi = mesh.bounds()
    axes = [np.linspace(lo[i], hi[i], cfg.points_per_axis) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def pose_loss(pred: Pose, gt: Pose, mesh: TriangleMesh,
              grid_cfg: GridConfig = GridConfig()) -> LossValue:
    """Lattice-distance pose objective.

    A fixed lattice on the mesh bounding box is transformed by both
    poses; term 1 is the mean pointwise distance between the two grids,
    term 2 the absolute difference of translation norms.  The gradient
    is taken w.r.t. the 6-dim tangent of pred: a left-applied axis-angle
    perturbation of the rotation followed by the translation offset.
    """
    pts = _bbox_lattice(mesh, grid_cfg)
    rotated = pts @ pred.rotation.T
    v = rotated + pred.translation - (pts @ gt.rotation.T + gt.translation)
    norms = np.linalg.norm(v, axis=1)
    term1 = norms.mean()

    # unit residuals; zero-length residuals get a zero subgradient
    vhat = np.zeros_like(v)
    nz = norms > 0
    vhat[nz] = v[nz] / norms[nz, None]

    grad_w = np.cross(rotated, vhat).mean(axis=0)
    grad_t = vhat.mean(axis=0)

    tp = np.linalg.norm(pred.translation)
    tg = np.linalg.norm(gt.translation)
    term2 = abs(tp - tg)
    if tp > 0 and term2 > 0:
        grad_t = grad_t + np.sign(tp - tg) * pred.translation / tp

    return LossValue(float(term1 + term2),
                     np.concatenate([grad_w, grad_t]))


def perturb_pose(pose: Pose, tangent) -> Pose:
    """Apply a 6-dim tangent (axis-angle, translation offset) to a pose.

    The rotation perturbation is left-applied, matching the gradient
    convention of :func:`pose_loss`.
    """
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != (6,):
        raise DimMismatch("pose tangent must be a 6-vector")
    dr = axis_angle_to_matrix(tangent[:3])
    return Pose(dr @ pose.rotation, pose.translation + tangent[3:])


def sequence_loss(per_iteration, gamma: float) -> LossValue:
    """Exponentially weighted sum over refinement iterations.

    Weight for iteration m (1-based, M total) is gamma**(M - m); the
    final iteration always carries weight 1.  When every component has a
    gradient of a common shape, the weighted combination is propagated.
    """
    if len(per_iteration) == 0:
        raise EmptySequence("sequence loss needs at least one iteration")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    m_total = len(per_iteration)
    total = 0.0
    grads = []
    for i, lv in enumerate(per_iteration):
        w = gamma ** (m_total - 1 - i)
        total += w * lv.value
        if lv.gradient is not None:
            grads.append(w * lv.gradient)
    grad = None
    if len(grads) == m_total and len({g.shape for g in grads}) == 1:
        grad = np.sum(grads, axis=0)
    return LossValue(float(total), grad)


def bce_loss(logits, labels) -> LossValue:
    """Mean binary cross-entropy on raw logits.

    Uses the overflow-safe log(1 + exp(-y'z)) form with y' = 2y - 1.
    The gradient w.r.t. the logits is (sigmoid(z) - y) / n, the exact
    derivative of the mean; finite differences confirm it.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape or z.ndim != 1:
        raise LengthMismatch("logits and labels must be equal-length 1d")
    if z.size == 0:
        raise EmptySequence("bce over zero samples")
    margin = (2.0 * y - 1.0) * z
    value = float(np.logaddexp(0.0, -margin).mean())
    sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    return LossValue(value, (sig - y) / z.size)

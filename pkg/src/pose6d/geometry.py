"""Rigid transforms, camera models and viewpoint sampling.

Conventions used throughout the package:

* A :class:`Pose` maps model-frame points into the camera frame,
  ``x_cam = R @ x_model + t``.  Rotations are stored as 3x3 matrices;
  axis-angle vectors appear only at update boundaries.
* Pixel ``(row i, col j)`` has its center at continuous image position
  ``(j + 0.5, i + 0.5)``; projection returns positions in that convention.
* The camera looks down +z; points with depth ``z <= DEPTH_EPS`` cannot be
  projected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

# Depth at or below this value counts as behind the camera.
DEPTH_EPS = 1e-9

# Orthonormality slack accepted when constructing a Pose.  Produced poses
# are far tighter (see tests); the constructor only rejects junk input.
_ROTATION_ATOL = 1e-6

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def _as_f64(a, shape, name: str) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform from the model frame to the camera frame.

    Attributes:
        rotation: 3x3 orthonormal matrix with determinant +1.
        translation: 3-vector, same units as the model.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = _as_f64(self.rotation, (3, 3), "rotation")
        t = _as_f64(self.translation, (3,), "translation")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ROTATION_ATOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ROTATION_ATOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        """Return the pose as a 4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = _as_f64(m, (4, 4), "matrix")
        return cls(m[:3, :3], m[:3, 3])


def identity_pose() -> Pose:
    """Identity transform."""
    return Pose(np.eye(3), np.zeros(3))


def compose(a: Pose, b: Pose) -> Pose:
    """Compose two poses; the result applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation,
                a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    """Inverse transform, mapping camera-frame points back to the model frame."""
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_to_matrix(axis_angle) -> np.ndarray:
    """Rodrigues formula; the vector's norm is the rotation angle in radians."""
    w = _as_f64(axis_angle, (3,), "axis_angle")
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # Second-order expansion keeps the map smooth through zero.
        k = _skew(w)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = _skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def matrix_to_axis_angle(r) -> np.ndarray:
    """Logarithm of a rotation matrix; inverse of :func:`axis_angle_to_matrix`.

    The returned angle lies in [0, pi].  At exactly pi the axis sign is
    chosen deterministically from the largest diagonal entry.
    """
    r = _as_f64(r, (3, 3), "rotation")
    cos_theta = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-7:
        # Near identity the off-diagonal differences are the axis*angle.
        return 0.5 * np.array([r[2, 1] - r[1, 2],
                               r[0, 2] - r[2, 0],
                               r[1, 0] - r[0, 1]])
    if np.pi - theta < 1e-5:
        # Near pi the antisymmetric part vanishes; recover the axis from
        # the symmetric part R + I = 2 axis axis^T (up to sign).
        m = (r + np.eye(3)) * 0.5
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = m[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        return axis * theta
    axis = np.array([r[2, 1] - r[1, 2],
                     r[0, 2] - r[2, 0],
                     r[1, 0] - r[0, 1]]) / (2.0 * np.sin(theta))
    return axis * theta


def geodesic_distance(ra, rb) -> float:
    """Angle in radians between two rotations."""
    ra = _as_f64(ra, (3, 3), "ra")
    rb = _as_f64(rb, (3, 3), "rb")
    cos_theta = np.clip((np.trace(ra.T @ rb) - 1.0) * 0.5, -1.0, 1.0)
    return float(np.arccos(cos_theta))


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def transform_points(pose: Pose, points) -> np.ndarray:
    """Apply a pose to an (..., 3) array of model-frame points."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation


def project(points, pose: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """Project model-frame points to continuous pixel positions.

    Args:
        points: (..., 3) model-frame points.
        pose: model-to-camera transform.
        cam: pinhole intrinsics.

    Returns:
        (..., 2) array of (u, v) image positions.

    Raises:
        NonPositiveDepth: if any point has camera-frame depth <= 1e-9.
    """
    pc = transform_points(pose, points)
    z = pc[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth("point depth is at or below the near limit")
    u = cam.fx * pc[..., 0] / z + cam.cx
    v = cam.fy * pc[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def unproject(uv, depth, cam: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel positions with known depth to camera-frame points.

    Inverse of the pinhole map: ``project(unproject(uv, z), identity)``
    recovers ``uv`` for positive depth.
    """
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth("depth is at or below the near limit")
    x = (uv[..., 0] - cam.cx) * z / cam.fx
    y = (uv[..., 1] - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=-1)


def look_at_pose(direction, radius: float, roll: float = 0.0) -> Pose:
    """Pose of a camera placed at ``radius * direction`` looking at the origin.

    Args:
        direction: unit vector from the origin toward the camera center,
            in the model frame.
        radius: camera distance from the origin.
        roll: in-plane rotation about the optical axis, radians.

    Returns:
        Pose with translation (0, 0, radius): the object sits centered on
        the optical axis at depth ``radius``.
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    z_axis = -d
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(z_axis, up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    r = np.stack([x_axis, y_axis, z_axis], axis=0)
    r = rotation_z(roll) @ r
    return Pose(r, np.array([0.0, 0.0, float(radius)]))


def fibonacci_directions(n: int) -> np.ndarray:
    """Roughly uniform unit directions on the sphere (golden-angle lattice)."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    az = i * _GOLDEN_ANGLE
    return np.stack([rho * np.cos(az), rho * np.sin(az), z], axis=1)


def sample_template_poses(n: int, radius: float, seed: int) -> list[Pose]:
    """Viewpoint set for template rendering.

    Viewpoint directions come from a golden-angle lattice covering the
    sphere; each viewpoint gets an independent in-plane roll drawn
    uniformly from [0, 2pi) using the seed.  Lattices for different ``n``
    are stratified independently, so the sets do not nest.
    """
    dirs = fibonacci_directions(n)
    rng = seeded_rng(seed, 0x7E3A)
    rolls = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return [look_at_pose(dirs[i], radius, rolls[i]) for i in range(n)]


@dataclass(frozen=True)
class PoseGrid:
    """A fixed lattice of model-frame points carried through a pose.

    Used as a pose-difference probe: distances between two grids from the
    same lattice measure the combined rotation and translation gap.
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be (n, 3)")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_pose(cls, pose: Pose, lower, upper, points_per_axis: int = 3) -> "PoseGrid":
        """Transform the axis-aligned lattice over [lower, upper] by ``pose``."""
        lower = _as_f64(lower, (3,), "lower")
        upper = _as_f64(upper, (3,), "upper")
        axes = [np.linspace(lower[k], upper[k], points_per_axis) for k in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        lattice = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        return cls(transform_points(pose, lattice))


def seeded_rng(seed: int, *streams: int) -> np.random.Generator:
    """Deterministic generator for a named substream of a run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, streams)]))

"""Deterministic software rasterizer and square-crop resampling.

Image conventions shared by every consumer in the package:

* Buffers are row-major with pixel ``(i, j)`` centered at continuous
  position ``(j + 0.5, i + 0.5)``.
* Rasterization uses a z-buffer with perspective-correct barycentric
  interpolation (attributes and inverse depth are interpolated linearly
  in screen space over ``1/z``).
* Pixel-on-edge ties follow the top-left fill rule; depth ties keep the
  triangle with the lower index.  Triangles are processed serially in
  index order, so output is bit-stable.
* There is no backface culling: normals are flipped toward the camera,
  making every surface two-sided.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import EmptyIntersection, EmptyRender
from .geometry import DEPTH_EPS, CameraIntrinsics, Pose, transform_points
from .meshes import TriangleMesh

ShadingMode = Literal["lambertian", "normal_rgb", "textured"]

# Fixed directional light for the shaded modes, pointing toward the light.
_LIGHT_DIR = np.array([0.3, 0.4, -1.0]) / np.linalg.norm([0.3, 0.4, -1.0])
_AMBIENT = 0.2
_DIFFUSE = 0.8


@dataclass
class ImageBuffer:
    """Dense float image, values in [0, 1], shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError("image data must be (h, w, 1) or (h, w, 3)")
        if not np.all(np.isfinite(d)):
            raise ValueError("image contains non-finite values")
        self.data = d

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class GeometryMap:
    """Per-pixel model-frame coordinates with depth and coverage mask.

    Pixels outside the mask carry zeros in every payload plane.
    """

    coords: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coords, dtype=np.float32)
        d = np.asarray(self.depth, dtype=np.float32)
        m = np.asarray(self.mask, dtype=bool)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError("coords must be (h, w, 3)")
        if d.shape != c.shape[:2] or m.shape != c.shape[:2]:
            raise ValueError("depth/mask shape must match coords")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(d))):
            raise ValueError("geometry contains non-finite values")
        c = np.where(m[:, :, None], c, 0.0).astype(np.float32)
        d = np.where(m, d, 0.0).astype(np.float32)
        self.coords, self.depth, self.mask = c, d, m

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class CropTransform:
    """Affine square crop: full-frame position ``p`` maps to
    ``(p - offset) * scale`` in the crop, and ``cam`` holds the virtual
    intrinsics under which crop pixels project consistently."""

    scale: float
    offset_x: float
    offset_y: float
    out_size: int
    cam: CameraIntrinsics

    def to_crop(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        out = np.empty_like(uv)
        out[..., 0] = (uv[..., 0] - self.offset_x) * self.scale
        out[..., 1] = (uv[..., 1] - self.offset_y) * self.scale
        return out

    def to_full(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        out = np.empty_like(uv)
        out[..., 0] = uv[..., 0] / self.scale + self.offset_x
        out[..., 1] = uv[..., 1] / self.scale + self.offset_y
        return out


# Wave vectors of the procedural albedo, in cycles per object diameter.
# Three octaves per channel: roughly 2.7, 5.2 and 10.7 cycles across the
# diameter, so each pyramid level of the matcher sees texture near its
# own cell scale and correlation peaks stay sharp.
_ALBEDO_WAVES = (
    # (amplitude, (ax, ay, az), phase) per term, grouped by channel.
    # Directions spread over the sphere, norms in cycles per diameter,
    # so every face keeps mid-frequency content under foreshortening.
    ((0.09, (1.3650, 0.8782, 2.1577), 3.8871),
     (0.11, (-4.8393, -0.7496, 0.1709), 3.2114),
     (0.13, (6.0495, -4.4635, -2.4272), 0.6568),
     (0.12, (-3.8893, 10.7614, -2.8819), 0.1727),
     (0.09, (-8.2087, 0.0887, -14.7723), 2.9868)),
    ((0.09, (-1.4184, 1.3251, 1.8767), 6.2021),
     (0.11, (2.3276, -3.2280, 2.8588), 4.8444),
     (0.13, (3.5589, 7.0121, -0.7578), 2.7460),
     (0.12, (-7.8005, -3.2702, -8.2279), 5.1227),
     (0.09, (8.2877, -5.9510, -13.4726), 3.3562)),
    ((0.09, (0.9787, -1.5473, 1.9844), 1.5782),
     (0.11, (3.2570, 2.3056, 2.8436), 4.8398),
     (0.13, (-6.2480, -1.5605, 4.5757), 1.3313),
     (0.12, (9.9278, -5.5289, -3.1797), 2.3464),
     (0.09, (-3.4091, 8.7747, -14.0354), 3.4664)),
)

_ALBEDO_GAIN = 2.2


def procedural_albedo(coords, diameter: float) -> np.ndarray:
    """Multi-octave model-space color field for the ``textured`` mode.

    Anchored to model coordinates so the pattern is photo-consistent
    across viewpoints.  Incommensurate wave vectors keep the field
    aperiodic, and the tanh shaping mixes the octaves into a broadband
    pattern, so the correspondence search cannot lock onto repeated or
    locally linear structure.
    """
    q = np.asarray(coords, dtype=np.float64) / float(diameter)
    tau = 2.0 * np.pi
    channels = []
    for terms in _ALBEDO_WAVES:
        s = np.zeros(q.shape[:-1])
        for amp, (ax, ay, az), phase in terms:
            s = s + amp * np.sin(
                tau * (ax * q[..., 0] + ay * q[..., 1] + az * q[..., 2])
                + phase)
        channels.append(0.5 + 0.46 * np.tanh(_ALBEDO_GAIN * s)
                        / np.tanh(_ALBEDO_GAIN))
    return np.clip(np.stack(channels, axis=-1), 0.02, 0.98)


def render(mesh: TriangleMesh, pose: Pose, cam: CameraIntrinsics,
           shading: ShadingMode = "lambertian") -> tuple[ImageBuffer, GeometryMap]:
    """Rasterize a mesh under a pose.

    Args:
        mesh: object to draw.
        pose: model-to-camera transform.
        cam: pinhole intrinsics defining the viewport.
        shading: ``lambertian`` (flat gray diffuse), ``normal_rgb``
            (camera-frame normals as colors), or ``textured``
            (model-space procedural albedo with diffuse shading).

    Returns:
        (image, geometry): the shaded image and per-pixel model
        coordinates/depth/mask of the nearest surface.

    Raises:
        EmptyRender: no triangle covered any pixel of the viewport.
    """
    h, w = cam.height, cam.width
    verts_cam = transform_points(pose, mesh.vertices)
    tri = mesh.triangles
    tv_cam = verts_cam[tri]
    tv_model = mesh.vertices[tri]

    in_front = np.all(tv_cam[:, :, 2] > DEPTH_EPS, axis=1)
    z = np.where(tv_cam[:, :, 2] > DEPTH_EPS, tv_cam[:, :, 2], 1.0)
    su = cam.fx * tv_cam[:, :, 0] / z + cam.cx
    sv = cam.fy * tv_cam[:, :, 1] / z + cam.cy

    img = np.zeros((h, w, 3), dtype=np.float64)
    zbuf = np.full((h, w), np.inf, dtype=np.float64)
    coords = np.zeros((h, w, 3), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    wrote = False

    for t in np.nonzero(in_front)[0]:
        pts = np.stack([su[t], sv[t]], axis=1)
        cam_pts = tv_cam[t].copy()
        model_pts = tv_model[t].copy()
        area2 = ((pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                 - (pts[1, 1] - pts[0, 1]) * (pts[2, 0] - pts[0, 0]))
        if abs(area2) < 1e-12:
            continue
        if area2 < 0:
            pts[[1, 2]] = pts[[2, 1]]
            cam_pts[[1, 2]] = cam_pts[[2, 1]]
            model_pts[[1, 2]] = model_pts[[2, 1]]
            area2 = -area2

        j0 = max(0, int(np.ceil(pts[:, 0].min() - 0.5)))
        j1 = min(w - 1, int(np.floor(pts[:, 0].max() - 0.5)))
        i0 = max(0, int(np.ceil(pts[:, 1].min() - 0.5)))
        i1 = min(h - 1, int(np.floor(pts[:, 1].max() - 0.5)))
        if j0 > j1 or i0 > i1:
            continue

        px = np.arange(j0, j1 + 1) + 0.5
        py = (np.arange(i0, i1 + 1) + 0.5)[:, None]

        inside = np.ones((i1 - i0 + 1, j1 - j0 + 1), dtype=bool)
        lam = np.empty((3, i1 - i0 + 1, j1 - j0 + 1))
        for k in range(3):
            ax, ay = pts[(k + 1) % 3]
            bx, by = pts[(k + 2) % 3]
            e = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            # Top-left fill rule: zero-valued edges count as inside only
            # for top (dy == 0, dx > 0) and left (dy < 0) edges.
            dx, dy = bx - ax, by - ay
            top_left = dy < 0 or (dy == 0 and dx > 0)
            inside &= (e > 0) | ((e == 0) & top_left)
            lam[k] = e / area2
        if not inside.any():
            continue

        inv_z = (lam[0] / cam_pts[0, 2] + lam[1] / cam_pts[1, 2]
                 + lam[2] / cam_pts[2, 2])
        depth = 1.0 / np.where(inv_z > 0, inv_z, 1.0)
        region_z = zbuf[i0:i1 + 1, j0:j1 + 1]
        win = inside & (inv_z > 0) & (depth < region_z)
        if not win.any():
            continue

        over_z = (lam[:, :, :, None] / cam_pts[:, 2, None, None, None])
        model_at = (over_z * model_pts[:, None, None, :]).sum(axis=0) \
            * depth[:, :, None]

        normal = np.cross(cam_pts[1] - cam_pts[0], cam_pts[2] - cam_pts[0])
        norm = np.linalg.norm(normal)
        if norm < 1e-15:
            continue
        normal /= norm
        centroid = cam_pts.mean(axis=0)
        if np.dot(normal, centroid) > 0:  # make the normal face the camera
            normal = -normal
        lambert = max(0.0, float(np.dot(normal, _LIGHT_DIR)))

        if shading == "lambertian":
            value = _AMBIENT + _DIFFUSE * lambert
            color = np.broadcast_to(np.array([value, value, value]),
                                    model_at.shape)
        elif shading == "normal_rgb":
            color = np.broadcast_to((normal + 1.0) * 0.5, model_at.shape)
        elif shading == "textured":
            color = procedural_albedo(model_at, mesh.diameter) \
                * (0.3 + 0.7 * lambert)
        else:
            raise ValueError(f"unknown shading mode: {shading!r}")

        wrote = True
        region_z[win] = depth[win]
        img[i0:i1 + 1, j0:j1 + 1][win] = color[win]
        coords[i0:i1 + 1, j0:j1 + 1][win] = model_at[win]
        mask[i0:i1 + 1, j0:j1 + 1] |= win

    if not wrote:
        raise EmptyRender("no triangle rasterized inside the viewport")
    depth_plane = np.where(mask, zbuf, 0.0)
    return (ImageBuffer(img.astype(np.float32)),
            GeometryMap(coords.astype(np.float32),
                        depth_plane.astype(np.float32), mask))


def bilinear_sample(data: np.ndarray, px, py, fill: float = 0.0):
    """Sample (h, w, c) data at continuous positions, pixel-center convention.

    Positions whose interpolation footprint would extrapolate beyond the
    pixel-center lattice are reported invalid and take the fill value.

    Returns:
        (values, valid): (..., c) samples and a boolean validity mask.
    """
    h, w = data.shape[:2]
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    xf = px - 0.5
    yf = py - 0.5
    valid = (xf >= 0) & (xf <= w - 1) & (yf >= 0) & (yf <= h - 1)
    x0 = np.clip(np.floor(xf).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(yf).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = np.clip(xf - x0, 0.0, 1.0)[..., None]
    ay = np.clip(yf - y0, 0.0, 1.0)[..., None]
    flat = data.reshape(h * w, -1).astype(np.float64)
    v00 = flat[y0 * w + x0]
    v01 = flat[y0 * w + x1]
    v10 = flat[y1 * w + x0]
    v11 = flat[y1 * w + x1]
    out = (v00 * (1 - ax) * (1 - ay) + v01 * ax * (1 - ay)
           + v10 * (1 - ax) * ay + v11 * ax * ay)
    out = np.where(valid[..., None], out, fill)
    return out, valid


def nearest_sample(data: np.ndarray, px, py):
    """Nearest-pixel gather at continuous positions; position p lies in
    pixel floor(p).  Returns (values, valid)."""
    h, w = data.shape[:2]
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    xi = np.floor(px).astype(np.int64)
    yi = np.floor(py).astype(np.int64)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    xi = np.clip(xi, 0, w - 1)
    yi = np.clip(yi, 0, h - 1)
    flat = data.reshape(h * w, -1)
    out = flat[yi * w + xi]
    out = np.where(valid[..., None], out, 0)
    return out.astype(data.dtype, copy=False), valid


def crop_and_resize(image: ImageBuffer, geometry: GeometryMap | None,
                    bbox, out_size: int, cam: CameraIntrinsics
                    ) -> tuple[ImageBuffer, GeometryMap | None, CropTransform]:
    """Resample a padded square region around a bounding box.

    The box is expanded to a square (centered), resampled to
    ``out_size`` x ``out_size`` with bilinear filtering for the image and
    nearest-neighbor for geometry payloads, and the returned transform
    carries virtual intrinsics under which the cropped content projects
    consistently: ``fx' = fx * s``, ``cx' = (cx - x0) * s`` and likewise
    for y.

    Raises:
        EmptyIntersection: the box does not overlap the image at all.
    """
    x0, y0, x1, y1 = bbox
    x0, y0 = int(np.floor(x0)), int(np.floor(y0))
    x1, y1 = int(np.ceil(x1)), int(np.ceil(y1))
    if x1 <= x0 or y1 <= y0:
        raise ValueError("bbox must have positive extent")
    if x1 <= 0 or y1 <= 0 or x0 >= image.width or y0 >= image.height:
        raise EmptyIntersection("crop box lies outside the image")

    bw, bh = x1 - x0, y1 - y0
    side = max(bw, bh)
    sq_x0 = x0 - (side - bw) // 2
    sq_y0 = y0 - (side - bh) // 2
    scale = out_size / side

    jj = (np.arange(out_size) + 0.5) / scale + sq_x0
    ii = (np.arange(out_size) + 0.5) / scale + sq_y0
    px = np.broadcast_to(jj[None, :], (out_size, out_size))
    py = np.broadcast_to(ii[:, None], (out_size, out_size))

    img_out, _ = bilinear_sample(image.data, px, py)
    out_image = ImageBuffer(img_out.astype(np.float32))

    out_geometry = None
    if geometry is not None:
        c, cv = nearest_sample(geometry.coords, px, py)
        d, _ = nearest_sample(geometry.depth[:, :, None], px, py)
        m, _ = nearest_sample(geometry.mask[:, :, None].astype(np.uint8),
                              px, py)
        out_mask = (m[:, :, 0] > 0) & cv
        out_geometry = GeometryMap(c, d[:, :, 0], out_mask)

    virtual = CameraIntrinsics(fx=cam.fx * scale, fy=cam.fy * scale,
                               cx=(cam.cx - sq_x0) * scale,
                               cy=(cam.cy - sq_y0) * scale,
                               width=out_size, height=out_size)
    transform = CropTransform(scale=scale, offset_x=float(sq_x0),
                              offset_y=float(sq_y0), out_size=out_size,
                              cam=virtual)
    return out_image, out_geometry, transform


def mask_bbox(mask: np.ndarray, pad_factor: float = 1.25):
    """Tight bounding box of a boolean mask, expanded by ``pad_factor``.

    Returns (x0, y0, x1, y1) with exclusive upper bounds.

    Raises:
        EmptyIntersection: the mask has no true pixel.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyIntersection("mask is empty")
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hw = (x1 - x0) * pad_factor / 2.0
    hh = (y1 - y0) * pad_factor / 2.0
    return (int(np.floor(cx - hw)), int(np.floor(cy - hh)),
            int(np.ceil(cx + hw)), int(np.ceil(cy + hh)))

"""Dense 2D correspondence from handcrafted multi-scale features.

Matching works on a three-level pyramid whose cells are 8, 16 and 32
pixels wide.  Each cell carries a 31-dim descriptor: a mean-subtracted
5x5 patch of the area-downsampled grayscale (25), the two Sobel
derivatives, and four hard-assigned oriented-gradient magnitude bins.
Descriptors are zero-mean and unit-norm; cells without texture (norm
below threshold) get the zero vector and are treated as unmatchable.

Flow estimation runs coarse-to-fine windowed correlation with argmax
matching, a separable parabolic subpixel fit, and a factor-2 upsample
between levels; the final cell field is upsampled bilinearly to full
resolution.  ``estimate_flow(query, target)`` yields a field on query
pixels pointing into the target: ``target_pos = p + flow(p)``.

Everything here is exact arithmetic on fixed inputs, so results are
bit-stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimMismatch, ImageTooSmall
from .geometry import DEPTH_EPS, CameraIntrinsics, Pose, transform_points
from .render import GeometryMap, ImageBuffer, bilinear_sample, nearest_sample

# Descriptor layout: 25 patch + 2 Sobel + 4 orientation bins.
FEATURE_DIM = 31

_NORM_EPS = 1e-6
_INVALID_SCORE = -2.0  # below the [-1, 1] correlation range

_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]]) / 8.0
_SOBEL_Y = _SOBEL_X.T.copy()


@dataclass(frozen=True)
class FlowConfig:
    """Pyramid matching settings."""

    levels: int = 3
    window_radius: int = 4

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")
        if self.window_radius < 1:
            raise ValueError("window radius must be positive")


@dataclass
class FeaturePyramid:
    """Per-level cell descriptors; level l has cells of ``8 * 2**l`` px."""

    levels: list

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("pyramid has no levels")
        for f in self.levels:
            if f.ndim != 3 or f.shape[2] != FEATURE_DIM:
                raise ValueError("levels must be (h, w, FEATURE_DIM)")


@dataclass
class FlowField:
    """Per-pixel displacement; invalid pixels carry zero displacement."""

    du: np.ndarray
    dv: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        du = np.asarray(self.du, dtype=np.float32)
        dv = np.asarray(self.dv, dtype=np.float32)
        valid = np.asarray(self.valid, dtype=bool)
        if du.shape != dv.shape or du.shape != valid.shape or du.ndim != 2:
            raise ValueError("du, dv and valid must share a 2d shape")
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dv))):
            raise ValueError("flow contains non-finite values")
        du = np.where(valid, du, 0.0).astype(np.float32)
        dv = np.where(valid, dv, 0.0).astype(np.float32)
        self.du, self.dv, self.valid = du, dv, valid

    @property
    def height(self) -> int:
        return self.du.shape[0]

    @property
    def width(self) -> int:
        return self.du.shape[1]


@dataclass
class CorrelationVolume:
    """All-pairs cosine similarities between two descriptor grids.

    ``values[q, k]`` is the dot product between unit-norm descriptors, so
    entries live in [-1, 1] and a cell's self-correlation is exactly 1.
    ``feature_dim`` is kept for attention temperature scaling.
    """

    values: np.ndarray
    query_shape: tuple
    key_shape: tuple
    feature_dim: int = FEATURE_DIM


def grayscale(image: ImageBuffer) -> np.ndarray:
    """Luma conversion used everywhere features are computed."""
    d = image.data.astype(np.float64)
    if d.shape[2] == 1:
        return d[:, :, 0]
    return 0.299 * d[:, :, 0] + 0.587 * d[:, :, 1] + 0.114 * d[:, :, 2]


def _level_features(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    pad2 = np.pad(gray, 2, mode="edge")
    patches = sliding_window_view(pad2, (5, 5)).reshape(h, w, 25)
    patches = patches - patches.mean(axis=2, keepdims=True)

    pad1 = np.pad(gray, 1, mode="edge")
    win3 = sliding_window_view(pad1, (3, 3))
    gx = np.einsum("hwij,ij->hw", win3, _SOBEL_X)
    gy = np.einsum("hwij,ij->hw", win3, _SOBEL_Y)

    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bin_idx = np.minimum((theta / (np.pi / 4.0)).astype(np.int64), 3)
    bins = np.zeros((h, w, 4))
    np.put_along_axis(bins, bin_idx[:, :, None], mag[:, :, None], axis=2)

    feat = np.concatenate(
        [patches, gx[:, :, None], gy[:, :, None], bins], axis=2)
    feat = feat - feat.mean(axis=2, keepdims=True)
    norm = np.sqrt(np.sum(feat * feat, axis=2, keepdims=True))
    return np.where(norm > _NORM_EPS, feat / np.where(norm > 0, norm, 1.0),
                    0.0)


def build_feature_pyramid(image: ImageBuffer, levels: int = 3) -> FeaturePyramid:
    """Compute cell descriptors at 1/8, 1/16, ... of the input resolution.

    Raises:
        ImageTooSmall: input below 32x32, or a requested level would have
            no cells.
    """
    if image.width < 32 or image.height < 32:
        raise ImageTooSmall(
            f"need at least 32x32, got {image.width}x{image.height}")
    gray = grayscale(image)
    out = []
    for lvl in range(levels):
        f = 8 << lvl
        h, w = gray.shape[0] // f, gray.shape[1] // f
        if h < 1 or w < 1:
            raise ImageTooSmall(f"pyramid level {lvl} has no cells")
        block = gray[:h * f, :w * f].reshape(h, f, w, f).mean(axis=(1, 3))
        out.append(_level_features(block))
    return FeaturePyramid(out)


def correlate(a: np.ndarray, b: np.ndarray) -> CorrelationVolume:
    """All-pairs correlation volume between two descriptor grids."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[2] != b.shape[2]:
        raise DimMismatch("descriptor grids must share the channel dim")
    qa = a.reshape(-1, a.shape[2])
    kb = b.reshape(-1, b.shape[2])
    return CorrelationVolume(values=qa @ kb.T, query_shape=a.shape[:2],
                             key_shape=b.shape[:2], feature_dim=a.shape[2])


def _half_grid_keys(fb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Key descriptors resampled at half-cell pitch.

    Half-offset descriptors are renormalized means of their neighbors and
    count as valid only when every contributor is.  Gives the windowed
    search half-cell resolution, which integer cells cannot provide: cell
    content decorrelates within half a cell, so a displacement near a
    half-cell phase has no good integer-lag match at all.
    """
    h, w, c = fb.shape
    ok = np.sum(fb * fb, axis=2) > 0
    g = np.zeros((2 * h - 1, 2 * w - 1, c))
    gok = np.zeros((2 * h - 1, 2 * w - 1), dtype=bool)
    g[::2, ::2] = fb
    gok[::2, ::2] = ok

    def put(sl, mix, okm):
        norm = np.sqrt(np.sum(mix * mix, axis=2))
        okm = okm & (norm > _NORM_EPS)
        g[sl] = np.where(okm[:, :, None],
                         mix / np.where(norm > 0, norm, 1.0)[:, :, None], 0.0)
        gok[sl] = okm

    put((slice(0, None, 2), slice(1, None, 2)),
        fb[:, :-1] + fb[:, 1:], ok[:, :-1] & ok[:, 1:])
    put((slice(1, None, 2), slice(0, None, 2)),
        fb[:-1] + fb[1:], ok[:-1] & ok[1:])
    put((slice(1, None, 2), slice(1, None, 2)),
        fb[:-1, :-1] + fb[:-1, 1:] + fb[1:, :-1] + fb[1:, 1:],
        ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, :-1] & ok[1:, 1:])
    return g, gok


def _sample_descriptors(fb: np.ndarray, ok: np.ndarray, yf: np.ndarray,
                        xf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Renormalized bilinear sample of a descriptor grid at cell coords.

    A sample is valid only when every contributing cell (weight above
    rounding) is valid and in bounds.
    """
    h, w = ok.shape
    y0 = np.floor(yf).astype(np.int64)
    x0 = np.floor(xf).astype(np.int64)
    ty = yf - y0
    tx = xf - x0
    acc = np.zeros(yf.shape + (fb.shape[2],))
    good = np.ones(yf.shape, dtype=bool)
    for dy2, wy in ((0, 1.0 - ty), (1, ty)):
        for dx2, wx in ((0, 1.0 - tx), (1, tx)):
            wgt = wy * wx
            yy, xx = y0 + dy2, x0 + dx2
            inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            cell_ok = inb & ok[yc, xc]
            used = wgt > 1e-9
            good &= cell_ok | ~used
            acc += (wgt * cell_ok)[..., None] * fb[yc, xc]
    norm = np.sqrt(np.sum(acc * acc, axis=-1))
    good &= norm > _NORM_EPS
    acc = acc / np.where(norm > 0, norm, 1.0)[..., None]
    return acc, good


def _match_level(fa: np.ndarray, fb: np.ndarray, radius: int,
                 center_dx: np.ndarray, center_dy: np.ndarray,
                 subpixel: bool = True):
    """Windowed argmax matching of ``fa`` cells into ``fb``.

    The search window spans ``radius`` cells around each query cell
    displaced by the (integer) center prediction, sampled at half-cell
    pitch on the interpolated key grid.  A quadratic fitted per axis
    through the argmax and quarter-pitch resamples around it supplies the
    subpixel term (skipped entirely when ``subpixel`` is off; template
    ranking only needs the peak).  Returns per-cell float displacements,
    a validity mask, and the peak correlation.
    """
    h, w = fa.shape[:2]
    side = 4 * radius + 1                  # half-cell steps across window
    ar = np.arange(side) - 2 * radius
    oy, ox = np.meshgrid(ar, ar, indexing="ij")
    oy, ox = oy.ravel(), ox.ravel()

    g, gok = _half_grid_keys(fb)
    gh, gw = gok.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ky = 2 * (ys + center_dy)[:, :, None] + oy[None, None, :]
    kx = 2 * (xs + center_dx)[:, :, None] + ox[None, None, :]
    in_bounds = (ky >= 0) & (ky < gh) & (kx >= 0) & (kx < gw)
    kyc = np.clip(ky, 0, gh - 1)
    kxc = np.clip(kx, 0, gw - 1)

    g_flat = g.reshape(gh * gw, -1)
    gok_flat = gok.reshape(gh * gw)
    idx = kyc * gw + kxc                              # (h, w, side^2)
    key_ok = in_bounds & gok_flat[idx]

    # One dense GEMM against the whole key grid beats gathering per-cell
    # key stacks by a wide margin; the window is then a row lookup.
    full = fa.reshape(h * w, -1) @ g_flat.T
    scores = np.take_along_axis(full, idx.reshape(h * w, -1),
                                axis=1).reshape(h, w, -1)
    scores = np.where(key_ok, scores, _INVALID_SCORE)

    # Prefer the window center on degenerate plateaus (featureless ridges
    # correlate near 1.0 at many offsets); the bias is far below any real
    # correlation margin.
    biased = scores - 5e-5 * (np.abs(ox) + np.abs(oy))[None, None, :]
    best = np.argmax(biased, axis=2)
    best_score = np.take_along_axis(scores, best[:, :, None], axis=2)[:, :, 0]
    fa_norm = np.sum(fa * fa, axis=2) > 0
    valid = fa_norm & (best_score > -1.5)

    by, bx = best // side, best % side
    fb_ok = np.sum(fb * fb, axis=2) > 0
    cyf = ys + center_dy + 0.5 * (by - 2 * radius)  # matched node, cells
    cxf = xs + center_dx + 0.5 * (bx - 2 * radius)

    def sub_offset(along_x: bool) -> np.ndarray:
        # Quarter-pitch resample around the argmax node; fall back to the
        # half-pitch window samples where the resamples are invalid.
        if along_x:
            f_lo, ok_lo = _sample_descriptors(fb, fb_ok, cyf, cxf - 0.25)
            f_hi, ok_hi = _sample_descriptors(fb, fb_ok, cyf, cxf + 0.25)
        else:
            f_lo, ok_lo = _sample_descriptors(fb, fb_ok, cyf - 0.25, cxf)
            f_hi, ok_hi = _sample_descriptors(fb, fb_ok, cyf + 0.25, cxf)
        q_lo = np.einsum("hwc,hwc->hw", fa, f_lo)
        q_hi = np.einsum("hwc,hwc->hw", fa, f_hi)
        q_den = q_lo - 2.0 * best_score + q_hi
        q_ok = ok_lo & ok_hi & (q_den < -5e-4)
        q_vertex = np.where(q_ok,
                            0.125 * (q_lo - q_hi) / np.where(q_ok, q_den, 1.0),
                            0.0)
        q_vertex = np.clip(q_vertex, -0.15, 0.15)

        pos = bx if along_x else by
        step = 1 if along_x else side
        interior = (pos > 0) & (pos < side - 1)
        lo = np.take_along_axis(
            scores, np.maximum(best - step, 0)[:, :, None], axis=2)[:, :, 0]
        hi = np.take_along_axis(
            scores, np.minimum(best + step, side * side - 1)[:, :, None],
            axis=2)[:, :, 0]
        denom = lo - 2.0 * best_score + hi
        ok = interior & (lo > -1.5) & (hi > -1.5) & (denom < -1e-3)
        vertex = np.where(ok, 0.25 * (lo - hi) / np.where(ok, denom, 1.0),
                          0.0)
        vertex = np.clip(vertex, -0.3, 0.3)
        out = np.where(q_ok, q_vertex, vertex)
        # A float-exact peak is already the answer; skip the fit there.
        return np.where(best_score > 1.0 - 1e-9, 0.0, out)

    dx = cxf - xs
    dy = cyf - ys
    if subpixel:
        dx = dx + sub_offset(True)
        dy = dy + sub_offset(False)
    dx = np.where(valid, dx, 0.0)
    dy = np.where(valid, dy, 0.0)
    return dx, dy, valid, best_score


def _median_filter_flow(dx: np.ndarray, dy: np.ndarray,
                        valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked 3x3 median on each flow component.

    Each valid cell takes the (lower) median over the valid cells of its
    3x3 neighborhood, itself included; invalid cells pass through.  Kills
    isolated mismatches without displacing smooth structure.
    """
    h, w = valid.shape
    stacks = []
    oks = []
    pad_v = np.pad(valid, 1)
    pad_x = np.pad(np.where(valid, dx, 0.0), 1)
    pad_y = np.pad(np.where(valid, dy, 0.0), 1)
    for oy in (-1, 0, 1):
        for ox in (-1, 0, 1):
            sl = (slice(1 + oy, 1 + oy + h), slice(1 + ox, 1 + ox + w))
            stacks.append(np.stack([pad_x[sl], pad_y[sl]], axis=0))
            oks.append(pad_v[sl])
    vals = np.stack(stacks, axis=3)          # (2, h, w, 9)
    ok = np.stack(oks, axis=2)[None]         # (1, h, w, 9)
    big = np.where(ok, vals, np.inf)
    big = np.sort(big, axis=3)
    n = np.maximum(ok.sum(axis=3), 1)
    med = np.take_along_axis(big, ((n - 1) // 2)[:, :, :, None],
                             axis=3)[:, :, :, 0]
    out_x = np.where(valid, med[0], dx)
    out_y = np.where(valid, med[1], dy)
    return out_x, out_y


def _fill_invalid(dx: np.ndarray, dy: np.ndarray,
                  valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flood invalid cells with the mean of known 8-neighbors, iteratively.

    Keeps bilinear upsampling from blending zeros into valid regions near
    texture and mask boundaries.  Returns copies; inputs are untouched.
    """
    dx = np.where(valid, dx, 0.0)
    dy = np.where(valid, dy, 0.0)
    known = valid.copy()
    if not known.any() or known.all():
        return dx, dy
    h, w = known.shape
    while not known.all():
        pad_k = np.pad(known, 1)
        pad_x = np.pad(dx * known, 1)
        pad_y = np.pad(dy * known, 1)
        cnt = np.zeros((h, w), dtype=np.int64)
        sx = np.zeros((h, w))
        sy = np.zeros((h, w))
        for oy in (-1, 0, 1):
            for ox in (-1, 0, 1):
                if oy == 0 and ox == 0:
                    continue
                sl = (slice(1 + oy, 1 + oy + h), slice(1 + ox, 1 + ox + w))
                cnt += pad_k[sl]
                sx += pad_x[sl]
                sy += pad_y[sl]
        grow = ~known & (cnt > 0)
        dx = np.where(grow, sx / np.maximum(cnt, 1), dx)
        dy = np.where(grow, sy / np.maximum(cnt, 1), dy)
        known |= grow
    return dx, dy


def _resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Edge-clamped bilinear resize of an (h, w, c) array."""
    h, w = arr.shape[:2]
    px = (np.arange(out_w) + 0.5) * (w / out_w)
    py = (np.arange(out_h) + 0.5) * (h / out_h)
    gx = np.broadcast_to(px[None, :], (out_h, out_w))
    gy = np.broadcast_to(py[:, None], (out_h, out_w))
    vals, _ = bilinear_sample(arr, gx, gy)
    return vals


def _pyramid_cell_flow(pa: FeaturePyramid, pb: FeaturePyramid,
                       radius: int, subpixel: bool = True):
    """Coarse-to-fine matching; returns level-0 cell flow, validity, peak."""
    n = len(pa.levels)
    dx = dy = None
    valid = peak = None
    for lvl in range(n - 1, -1, -1):
        fa, fb = pa.levels[lvl], pb.levels[lvl]
        h, w = fa.shape[:2]
        if dx is None:
            cdx = np.zeros((h, w), dtype=np.int64)
            cdy = np.zeros((h, w), dtype=np.int64)
        else:
            fx, fy = _fill_invalid(dx, dy, valid)
            up = _resize_bilinear(np.stack([fx, fy], axis=2), h, w) * 2.0
            cdx = np.rint(up[:, :, 0]).astype(np.int64)
            cdy = np.rint(up[:, :, 1]).astype(np.int64)
        dx, dy, valid, peak = _match_level(fa, fb, radius, cdx, cdy,
                                           subpixel=subpixel and lvl == 0)
    return dx, dy, valid, peak


def match_pyramids(pa: FeaturePyramid, pb: FeaturePyramid,
                   radius: int = 4, subpixel: bool = True):
    """Cell-resolution matching between two prebuilt pyramids.

    Returns (dx, dy, valid, peak) at the finest level, displacements in
    cell units.  Template scoring runs this with ``subpixel`` off, which
    leaves the peak correlations untouched and skips the most expensive
    part of the matcher.
    """
    return _pyramid_cell_flow(pa, pb, radius, subpixel=subpixel)


def estimate_flow(query: ImageBuffer, target: ImageBuffer,
                  config: FlowConfig = FlowConfig()) -> FlowField:
    """Dense displacement field on query pixels pointing into the target.

    Untextured query cells come back invalid rather than matched; valid
    pixels satisfy ``target_content(p + flow(p)) ~ query_content(p)``.

    Raises:
        DimMismatch: query and target sizes differ.
        ImageTooSmall: below the 32x32 pyramid minimum.
    """
    if (query.width != target.width) or (query.height != target.height):
        raise DimMismatch("query and target must have identical dimensions")
    pa = build_feature_pyramid(query, config.levels)
    pb = build_feature_pyramid(target, config.levels)
    dx, dy, valid, _ = _pyramid_cell_flow(pa, pb, config.window_radius)

    h, w = query.height, query.width
    dx, dy = _median_filter_flow(dx, dy, valid)
    fx, fy = _fill_invalid(dx, dy, valid)
    cells = np.stack([fx, fy], axis=2) * 8.0
    full = _resize_bilinear(cells, h, w)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    vfull, _ = nearest_sample(valid[:, :, None].astype(np.uint8),
                              (jj + 0.5) / 8.0, (ii + 0.5) / 8.0)
    valid_full = vfull[:, :, 0] > 0
    return FlowField(du=full[:, :, 0], dv=full[:, :, 1], valid=valid_full)


def warp(source, flow: FlowField):
    """Pull source content along a flow field.

    For a :class:`GeometryMap` the gather is nearest-neighbor and the
    output mask combines flow validity, in-bounds sampling and the source
    mask.  For an :class:`ImageBuffer` sampling is bilinear and invalid
    pixels are zeroed.

    Raises:
        DimMismatch: flow and source sizes differ.
    """
    if isinstance(source, GeometryMap):
        if (flow.height, flow.width) != (source.height, source.width):
            raise DimMismatch("flow and source must have identical size")
        h, w = source.height, source.width
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        px = jj + 0.5 + flow.du.astype(np.float64)
        py = ii + 0.5 + flow.dv.astype(np.float64)
        coords, ok_c = nearest_sample(source.coords, px, py)
        depth, _ = nearest_sample(source.depth[:, :, None], px, py)
        msk, _ = nearest_sample(source.mask[:, :, None].astype(np.uint8),
                                px, py)
        mask = flow.valid & ok_c & (msk[:, :, 0] > 0)
        return GeometryMap(coords, depth[:, :, 0], mask)
    if isinstance(source, ImageBuffer):
        if (flow.height, flow.width) != (source.height, source.width):
            raise DimMismatch("flow and source must have identical size")
        h, w = source.height, source.width
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        px = jj + 0.5 + flow.du.astype(np.float64)
        py = ii + 0.5 + flow.dv.astype(np.float64)
        vals, ok = bilinear_sample(source.data, px, py)
        good = flow.valid & ok
        return ImageBuffer(np.where(good[:, :, None], vals,
                                    0.0).astype(np.float32))
    raise TypeError(f"cannot warp {type(source).__name__}")


def gt_flow_from_geometry(geom_a: GeometryMap, pose_a: Pose, pose_b: Pose,
                          cam: CameraIntrinsics,
                          geom_b: GeometryMap | None = None,
                          diameter: float | None = None) -> FlowField:
    """Exact flow between two renders of the same object.

    For every masked pixel of ``geom_a`` (rendered under ``pose_a``) the
    carried model point is reprojected under ``pose_b``; the flow is the
    displacement from the pixel center to the reprojection.  When
    ``geom_b`` (the render under ``pose_b``) and the object ``diameter``
    are given, pixels whose reprojection is occluded, judged by a depth
    test within one percent of the diameter, are marked invalid.
    """
    del pose_a  # documents the source render; the math needs only coords
    h, w = geom_a.height, geom_a.width
    du = np.zeros((h, w), dtype=np.float64)
    dv = np.zeros((h, w), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(geom_a.mask)
    if len(xs) == 0:
        return FlowField(du, dv, valid)
    pts = geom_a.coords[ys, xs].astype(np.float64)
    pc = transform_points(pose_b, pts)
    z = pc[:, 2]
    front = z > DEPTH_EPS
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)

    ok = inside
    if geom_b is not None:
        tol = 0.01 * diameter if diameter is not None else 0.01
        ti = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
        tj = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
        covered = geom_b.mask[ti, tj]
        depth_b = geom_b.depth[ti, tj].astype(np.float64)
        ok = inside & covered & (z <= depth_b + tol)

    du[ys[ok], xs[ok]] = u[ok] - (xs[ok] + 0.5)
    dv[ys[ok], xs[ok]] = v[ok] - (ys[ok] + 0.5)
    valid[ys[ok], xs[ok]] = True
    return FlowField(du, dv, valid)


def forward_backward_consistency(forward: FlowField,
                                 backward: FlowField) -> np.ndarray:
    """Cycle error ``|f(p) + b(p + f(p))|`` per pixel of the forward field.

    The backward field is sampled with nearest-neighbor lookup.  Pixels
    where the forward flow is invalid, the round trip leaves the image,
    or the backward flow is invalid at the landing pixel, get +inf.
    """
    if (forward.height, forward.width) != (backward.height, backward.width):
        raise DimMismatch("fields must have identical size")
    h, w = forward.height, forward.width
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = jj + 0.5 + forward.du.astype(np.float64)
    py = ii + 0.5 + forward.dv.astype(np.float64)
    stacked = np.stack([backward.du, backward.dv,
                        backward.valid.astype(np.float32)], axis=2)
    vals, ok = nearest_sample(stacked, px, py)
    bdu = vals[:, :, 0].astype(np.float64)
    bdv = vals[:, :, 1].astype(np.float64)
    bval = vals[:, :, 2] > 0
    err = np.hypot(forward.du + bdu, forward.dv + bdv)
    good = forward.valid & ok & bval
    return np.where(good, err, np.inf)

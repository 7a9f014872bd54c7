"""Multi-frequency positional encoding of geometry maps.

Coordinates are normalized by half the model diameter so every frequency
band stays inside a valid phase range, which is what makes the decode
side well-posed: band 0 fixes the coarse position and each finer band
halves the remaining ambiguity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, InconsistentBands
from .render import GeometryMap


@dataclass(frozen=True)
class EncodingConfig:
    """Band count and normalization scale for positional encoding.

    half_extent is diameter/2 of the target mesh; model-frame coords are
    divided by it, mapping the object into [-1, 1]^3.
    """

    n_freq: int = 5
    half_extent: float = 1.0

    def __post_init__(self) -> None:
        if self.n_freq < 1:
            raise ValueError("n_freq must be >= 1")
        if not (self.half_extent > 0):
            raise ValueError("half_extent must be positive")

    @property
    def channels(self) -> int:
        return 6 * self.n_freq


class EncodedGeometryMap:
    """Per-pixel sin/cos frequency expansion of normalized coordinates.

    values: (h, w, 6*n_freq) float64, zero outside the mask.  Channel
    layout: x bands first, then y, then z; within a coordinate the bands
    are (sin l=0, cos l=0, sin l=1, ...).
    """

    def __init__(self, values, mask) -> None:
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if values.ndim != 3 or values.shape[2] % 6 != 0:
            raise DimMismatch("encoded values must be (h, w, 6*n_freq)")
        if mask.shape != values.shape[:2]:
            raise DimMismatch("mask shape must match values")
        if not np.all(np.isfinite(values)):
            raise ValueError("encoded values must be finite")
        values = np.where(mask[:, :, None], values, 0.0)
        values.flags.writeable = False
        mask.flags.writeable = False
        self.values = values
        self.mask = mask

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def positional_encode(geom: GeometryMap, cfg: EncodingConfig) -> EncodedGeometryMap:
    """Expand each masked coordinate into sin/cos frequency bands.

    Coordinates beyond the normalization range are clamped with a
    warning; anything within +-(1 + 1e-6) clamps silently.
    """
    p = geom.coords.astype(np.float64) / cfg.half_extent
    if np.any(np.abs(p[geom.mask]) > 1.0 + 1e-6):
        warnings.warn("coordinates beyond the encoding range were clamped",
                      RuntimeWarning, stacklevel=2)
    p = np.clip(p, -1.0, 1.0)
    h, w = geom.mask.shape
    out = np.zeros((h, w, 6 * cfg.n_freq))
    for axis in range(3):
        base = axis * 2 * cfg.n_freq
        for lvl in range(cfg.n_freq):
            phase = (2.0 ** lvl) * np.pi * p[:, :, axis]
            out[:, :, base + 2 * lvl] = np.sin(phase)
            out[:, :, base + 2 * lvl + 1] = np.cos(phase)
    return EncodedGeometryMap(out, geom.mask)


def _decode_axis(sin_cos: np.ndarray, n_freq: int) -> np.ndarray:
    """Phase-unwrap one coordinate from its (…, 2*n_freq) band stack.

    Band 0 spans a full period over [-1, 1] so atan2 fixes the coarse
    value; each finer band picks the branch closest to the running
    estimate.  That branch must stay within half of the band's own
    period of the coarse estimate, otherwise the bands contradict each
    other and no single coordinate explains them.
    """
    theta0 = np.arctan2(sin_cos[..., 0], sin_cos[..., 1])
    est = theta0 / np.pi
    coarse = est
    for lvl in range(1, n_freq):
        scale = (2.0 ** lvl) * np.pi
        theta = np.arctan2(sin_cos[..., 2 * lvl], sin_cos[..., 2 * lvl + 1])
        period = 2.0 * np.pi / scale
        k = np.round((est - theta / scale) / period)
        cand = theta / scale + k * period
        if np.any(np.abs(cand - coarse) > 0.5 * period + 1e-9):
            raise InconsistentBands(
                f"band {lvl} disagrees with the coarse estimate")
        est = cand
    return est


def positional_decode(enc: EncodedGeometryMap, cfg: EncodingConfig) -> GeometryMap:
    """Invert :func:`positional_encode` by per-band phase unwrapping.

    Raises:
        DimMismatch: channel count inconsistent with cfg.
        InconsistentBands: bands contradict each other beyond half a
            period, so no consistent coordinate exists.
    """
    if enc.channels != 6 * cfg.n_freq:
        raise DimMismatch(
            f"expected {6 * cfg.n_freq} channels, got {enc.channels}")
    h, w = enc.mask.shape
    coords = np.zeros((h, w, 3))
    if enc.mask.any():
        sel = enc.values[enc.mask]
        for axis in range(3):
            base = axis * 2 * cfg.n_freq
            p = _decode_axis(sel[:, base:base + 2 * cfg.n_freq], cfg.n_freq)
            coords[enc.mask, axis] = p * cfg.half_extent
    depth = np.zeros((h, w))
    return GeometryMap(coords=coords, depth=depth, mask=enc.mask)

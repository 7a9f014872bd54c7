"""On-disk formats: PPM images, tagged binary containers for geometry
maps / flow fields / network weights, the template-set directory layout,
and the delimited report files.

All binary payloads are little-endian and written in a single
deterministic pass, so equal content produces equal bytes.  JSON is
emitted with sorted keys and a fixed layout for the same reason.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .coarse import Template
from .flow import FlowField
from .geometry import Pose
from .network import GeometryNet, parameter_count
from .render import GeometryMap, ImageBuffer

_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


def _quantize(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Write a binary P6 PPM, maxval 255.

    Accepts an ImageBuffer (unit floats, quantized here) or a uint8
    array shaped (h, w, 3).
    """
    if isinstance(image, ImageBuffer):
        data = image.data
        if data.shape[2] == 1:
            data = np.repeat(data, 3, axis=2)
        rgb = _quantize(data)
    else:
        rgb = np.asarray(image)
        if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("raw PPM payload must be uint8 (h, w, 3)")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _read_ppm_token(fh) -> bytes:
    # skip whitespace and '#' comments between header tokens
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a uint8 (h, w, 3) array."""
    with open(path, "rb") as fh:
        if _read_ppm_token(fh) != b"P6":
            raise ValueError("not a binary PPM (P6) file")
        w = int(_read_ppm_token(fh))
        h = int(_read_ppm_token(fh))
        maxval = int(_read_ppm_token(fh))
        if maxval != 255:
            raise ValueError("only maxval 255 is supported")
        payload = fh.read(w * h * 3)
    if len(payload) != w * h * 3:
        raise ValueError("truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def _write_tagged(fh, tag: bytes, dims: tuple[int, ...]) -> None:
    fh.write(tag)
    fh.write(np.asarray(dims, dtype=_U32).tobytes())


def _read_tagged(fh, tag: bytes, n_dims: int) -> tuple[int, ...]:
    if fh.read(4) != tag:
        raise ValueError(f"bad magic, expected {tag!r}")
    raw = fh.read(4 * n_dims)
    if len(raw) != 4 * n_dims:
        raise ValueError("truncated header")
    return tuple(int(v) for v in np.frombuffer(raw, dtype=_U32))


def write_geometry_map(path, geom: GeometryMap) -> None:
    """RGMP container: u32 width/height, f32 coords and depth, u8 mask."""
    h, w = geom.depth.shape
    with open(path, "wb") as fh:
        _write_tagged(fh, b"RGMP", (w, h))
        fh.write(geom.coords.astype(_F32).tobytes())
        fh.write(geom.depth.astype(_F32).tobytes())
        fh.write(geom.mask.astype(np.uint8).tobytes())


def read_geometry_map(path) -> GeometryMap:
    with open(path, "rb") as fh:
        w, h = _read_tagged(fh, b"RGMP", 2)
        coords = np.frombuffer(fh.read(12 * h * w), dtype=_F32)
        depth = np.frombuffer(fh.read(4 * h * w), dtype=_F32)
        mask = np.frombuffer(fh.read(h * w), dtype=np.uint8)
    if coords.size != 3 * h * w or depth.size != h * w or mask.size != h * w:
        raise ValueError("truncated geometry payload")
    return GeometryMap(coords.reshape(h, w, 3), depth.reshape(h, w),
                       mask.reshape(h, w).astype(bool))


def write_flow_field(path, flow: FlowField) -> None:
    """RFLW container: u32 width/height, f32 du/dv, u8 valid."""
    h, w = flow.du.shape
    with open(path, "wb") as fh:
        _write_tagged(fh, b"RFLW", (w, h))
        fh.write(flow.du.astype(_F32).tobytes())
        fh.write(flow.dv.astype(_F32).tobytes())
        fh.write(flow.valid.astype(np.uint8).tobytes())


def read_flow_field(path) -> FlowField:
    with open(path, "rb") as fh:
        w, h = _read_tagged(fh, b"RFLW", 2)
        du = np.frombuffer(fh.read(4 * h * w), dtype=_F32)
        dv = np.frombuffer(fh.read(4 * h * w), dtype=_F32)
        valid = np.frombuffer(fh.read(h * w), dtype=np.uint8)
    if du.size != h * w or dv.size != h * w or valid.size != h * w:
        raise ValueError("truncated flow payload")
    return FlowField(du.reshape(h, w), dv.reshape(h, w),
                     valid.reshape(h, w).astype(bool))


def write_network(path, net: GeometryNet) -> None:
    """RNET container: u32 parameter count then f32 parameters."""
    with open(path, "wb") as fh:
        _write_tagged(fh, b"RNET", (net.params.size,))
        fh.write(net.params.astype(_F32).tobytes())


def read_network(path, n_freq: int = 5) -> GeometryNet:
    with open(path, "rb") as fh:
        (count,) = _read_tagged(fh, b"RNET", 1)
        params = np.frombuffer(fh.read(4 * count), dtype=_F32)
    if params.size != count:
        raise ValueError("truncated weight payload")
    expected = parameter_count(n_freq)
    if count != expected:
        raise ValueError(
            f"weight count {count} does not match the architecture "
            f"({expected} for n_freq={n_freq})")
    return GeometryNet(params.astype(np.float64), n_freq)


def write_json(path, payload) -> None:
    """Canonical JSON: sorted keys, indent 1, trailing newline."""
    text = json.dumps(payload, indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_template_set(dirpath, templates: list) -> None:
    """Lay out `{index:03}.ppm` / `{index:03}.rgmp` pairs plus one
    `pose.json` listing every template pose in index order."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    ordered = sorted(templates, key=lambda t: t.index)
    if [t.index for t in ordered] != list(range(len(ordered))):
        raise ValueError("template indices must be 0..n-1 without gaps")
    for t in ordered:
        stem = f"{t.index:03d}"
        write_ppm(root / f"{stem}.ppm", t.image)
        write_geometry_map(root / f"{stem}.rgmp", t.geometry)
    write_json(root / "pose.json",
               {"poses": [t.pose.matrix().tolist() for t in ordered]})


def read_template_set(dirpath) -> list:
    """Load a template directory back into Template objects.

    Feature pyramids are rebuilt on load; template index i pairs
    `pose.json`'s i-th pose with `{i:03}.ppm` / `{i:03}.rgmp`.
    """
    root = Path(dirpath)
    pose_file = root / "pose.json"
    if not pose_file.exists():
        raise ValueError(f"no template set under {root}")
    poses = read_json(pose_file)["poses"]
    entries = []
    for idx, mat in enumerate(poses):
        stem = f"{idx:03d}"
        rgb = read_ppm(root / f"{stem}.ppm")
        image = ImageBuffer(rgb.astype(np.float32) / 255.0)
        geom = read_geometry_map(root / f"{stem}.rgmp")
        entries.append(Template(image, geom,
                                Pose.from_matrix(np.asarray(mat)), idx))
    if not entries:
        raise ValueError(f"empty template set under {root}")
    return entries


def write_estimates(path, entries: list) -> None:
    """Estimate interchange file: JSON list of {object, pose 4x4}.

    A failed entry carries pose None.
    """
    payload = [{"object": e["object"],
                "pose": None if e["pose"] is None else e["pose"]}
               for e in entries]
    write_json(path, payload)


def read_estimates(path) -> list:
    return read_json(path)


def _threshold_rows(record, thresholds):
    for i, tau in enumerate(thresholds.vsd_taus):
        for j, cut in enumerate(thresholds.vsd_cutoffs):
            yield "vsd", f"{tau:.2f}/{cut:.2f}", record.passes["vsd"][i, j]
    for j, cut in enumerate(thresholds.mssd_cutoffs):
        yield "mssd", f"{cut:.2f}", record.passes["mssd"][j]
    for j, cut in enumerate(thresholds.mspd_cutoffs):
        yield "mspd", f"{cut:.1f}", record.passes["mspd"][j]


def write_results_csv(path, records: list, thresholds) -> None:
    """One row per record and grid cell: object,metric,threshold,pass.

    VSD thresholds are "tau/cutoff" pairs (fractions of diameter and of
    the error range); MSSD cutoffs are diameter fractions and MSPD
    cutoffs pixels at the 640-wide reference.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object", "metric", "threshold", "pass"])
        for record in records:
            for metric, label, flag in _threshold_rows(record, thresholds):
                writer.writerow([record.object_id, metric, label,
                                 int(flag)])


def write_summary_json(path, summary, extra: dict | None = None) -> None:
    """JSON summary {ar, vsd_recall, mssd_recall, mspd_recall} (+extras)."""
    payload = summary.as_dict()
    if extra:
        payload.update(extra)
    write_json(path, payload)

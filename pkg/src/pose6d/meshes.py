"""Triangle meshes: procedural object generators and ASCII PLY I/O.

Meshes are origin-centered and carry an explicit list of discrete
rotational symmetries (always including the identity) consumed by the
pose-error metrics.  A ``.sym.json`` sidecar stores the symmetries next
to the PLY file as flattened 4x4 row-major matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, identity_pose, rotation_z, seeded_rng


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh with precomputed diameter.

    Attributes:
        vertices: (nv, 3) float64 positions, model frame.
        triangles: (nt, 3) int32 vertex indices.
        symmetries: discrete rotational symmetries of the object; the
            identity is always present.
        diameter: largest pairwise vertex distance.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    symmetries: tuple[Pose, ...] = field(default=None)  # type: ignore[assignment]
    diameter: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int32)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 3:
            raise ValueError("vertices must be (nv >= 3, 3)")
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 1:
            raise ValueError("triangles must be (nt >= 1, 3)")
        if t.min() < 0 or t.max() >= v.shape[0]:
            raise ValueError("triangle indices out of range")
        syms = self.symmetries
        if syms is None:
            syms = (identity_pose(),)
        if not any(_is_identity(s) for s in syms):
            syms = (identity_pose(),) + tuple(syms)
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "symmetries", tuple(syms))
        object.__setattr__(self, "diameter", _max_pairwise_distance(v))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (lower, upper) in the model frame."""
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _is_identity(p: Pose) -> bool:
    return (np.allclose(p.rotation, np.eye(3), atol=1e-9)
            and np.allclose(p.translation, 0.0, atol=1e-9))


def _max_pairwise_distance(v: np.ndarray) -> float:
    # Quadratic scan in blocks; vertex counts here stay in the hundreds.
    best = 0.0
    step = 512
    for i in range(0, len(v), step):
        block = v[i:i + step]
        d2 = np.sum((block[:, None, :] - v[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two triangles."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def z_rotation_symmetries(order: int) -> tuple[Pose, ...]:
    """The cyclic group of ``order`` rotations about the model z axis."""
    if order < 1:
        raise ValueError("symmetry order must be positive")
    return tuple(Pose(rotation_z(2.0 * np.pi * k / order), np.zeros(3))
                 for k in range(order))


def box_mesh(extents=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box centered at the origin; no symmetry beyond identity."""
    hx, hy, hz = (float(e) * 0.5 for e in extents)
    signs = [(-1, -1, -1), (-1, -1, 1), (-1, 1, -1), (-1, 1, 1),
             (1, -1, -1), (1, -1, 1), (1, 1, -1), (1, 1, 1)]
    verts = np.array([(sx * hx, sy * hy, sz * hz) for sx, sy, sz in signs])
    quads = [(4, 6, 7, 5), (0, 1, 3, 2), (2, 3, 7, 6),
             (0, 4, 5, 1), (1, 5, 7, 3), (0, 2, 6, 4)]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return TriangleMesh(verts, np.array(tris, dtype=np.int32))


def cylinder_mesh(radius: float = 0.5, height: float = 1.0,
                  segments: int = 16, symmetry_order: int = 8) -> TriangleMesh:
    """Capped cylinder along z with an n-fold rotational symmetry list.

    ``symmetry_order`` must divide ``segments`` so the declared symmetries
    are exact for the faceted geometry.
    """
    if segments < 3:
        raise ValueError("need at least 3 segments")
    if segments % symmetry_order != 0:
        raise ValueError("symmetry order must divide the segment count")
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.concatenate([ring, np.full((segments, 1), -height * 0.5)], axis=1)
    top = np.concatenate([ring, np.full((segments, 1), height * 0.5)], axis=1)
    verts = np.concatenate([bottom, top,
                            [[0.0, 0.0, -height * 0.5]],
                            [[0.0, 0.0, height * 0.5]]], axis=0)
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for k in range(segments):
        k1 = (k + 1) % segments
        tris.append((k, k1, segments + k1))
        tris.append((k, segments + k1, segments + k))
        tris.append((cb, k1, k))
        tris.append((ct, segments + k, segments + k1))
    return TriangleMesh(verts, np.array(tris, dtype=np.int32),
                        symmetries=z_rotation_symmetries(symmetry_order))


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
    (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
    (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
], dtype=np.float64)
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosphere_mesh(subdivisions: int = 2, radius: float = 0.5,
                   deform_seed: int | None = None,
                   deform_amplitude: float = 0.12) -> TriangleMesh:
    """Unit-sphere subdivision, optionally deformed by smooth radial lobes.

    Subdivision 0 is the icosahedron (12 vertices, 20 triangles); each
    level quadruples the triangle count.  Deformation perturbs the radius
    with a few low-frequency cosine lobes and recenters the bounding box,
    which breaks all rotational symmetry.
    """
    verts = [tuple(v / np.linalg.norm(v)) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = np.asarray(verts[a]) + np.asarray(verts[b])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces

    v = np.asarray(verts, dtype=np.float64)
    if deform_seed is not None:
        rng = seeded_rng(deform_seed, 0x5EED)
        scale = np.ones(len(v))
        for _ in range(4):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            amp = rng.uniform(0.3, 1.0) * deform_amplitude
            freq = rng.uniform(2.0, 5.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            scale += amp * np.cos(freq * (v @ d) + phase)
        v = v * scale[:, None]
    v = v * float(radius)
    lo, hi = v.min(axis=0), v.max(axis=0)
    v = v - (lo + hi) * 0.5
    return TriangleMesh(v, np.array(faces, dtype=np.int32))


def composite_mesh(seed: int = 0) -> TriangleMesh:
    """A box with a protruding cylinder; two closed components, no symmetry."""
    rng = seeded_rng(seed, 0xC04B)
    box = box_mesh((rng.uniform(0.7, 1.0), rng.uniform(0.5, 0.8),
                    rng.uniform(0.3, 0.5)))
    cyl = cylinder_mesh(radius=rng.uniform(0.14, 0.2),
                        height=rng.uniform(0.6, 0.9),
                        segments=12, symmetry_order=1)
    off = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.1, 0.1), 0.35])
    verts = np.concatenate([box.vertices, cyl.vertices + off], axis=0)
    tris = np.concatenate(
        [box.triangles, cyl.triangles + len(box.vertices)], axis=0)
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    verts = verts - (lo + hi) * 0.5
    return TriangleMesh(verts, tris)


def generate_procedural_mesh(kind: str, seed: int = 0, **params) -> TriangleMesh:
    """Build one of the procedural object kinds by name.

    :param kind: one of ``box``, ``cylinder``, ``icosphere``, ``composite``.
    :param seed: controls the randomized kinds; ignored by ``box`` and
        ``cylinder`` unless they draw dimensions.
    :param params: forwarded to the kind's generator.
    """
    if kind == "box":
        rng = seeded_rng(seed, 0xB0C5)
        extents = params.pop("extents", tuple(rng.uniform(0.4, 1.1, size=3)))
        return box_mesh(extents, **params)
    if kind == "cylinder":
        return cylinder_mesh(**params)
    if kind == "icosphere":
        params.setdefault("deform_seed", seed)
        return icosphere_mesh(**params)
    if kind == "composite":
        return composite_mesh(seed, **params)
    raise ValueError(f"unknown mesh kind: {kind!r}")


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Write an ASCII PLY plus a ``.sym.json`` symmetry sidecar."""
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for x, y, z in mesh.vertices:
        # repr of python floats round-trips exactly and is byte-stable
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    path.write_text("\n".join(lines) + "\n")
    syms = [s.matrix().reshape(-1).tolist() for s in mesh.symmetries]
    sidecar = path.with_suffix(".sym.json")
    sidecar.write_text(json.dumps({"symmetries": syms}, indent=1) + "\n")


def load_mesh(path) -> TriangleMesh:
    """Read a mesh written by :func:`save_mesh`.

    Only the ASCII PLY subset produced by this package is supported:
    float vertex positions and integer triangle lists.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path} is not a PLY file")
    n_vert = n_face = 0
    body_at = 0
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            n_vert = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            n_face = int(tok[2])
        elif tok[:1] == ["end_header"]:
            body_at = i + 1
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    verts = np.array([[float(x) for x in lines[body_at + i].split()[:3]]
                      for i in range(n_vert)])
    tris = []
    for i in range(n_face):
        tok = lines[body_at + n_vert + i].split()
        if tok[0] != "3":
            raise ValueError(f"{path}: only triangle faces are supported")
        tris.append([int(tok[1]), int(tok[2]), int(tok[3])])
    symmetries = None
    sidecar = path.with_suffix(".sym.json")
    if sidecar.exists():
        raw = json.loads(sidecar.read_text())["symmetries"]
        symmetries = tuple(
            Pose.from_matrix(np.asarray(m, dtype=np.float64).reshape(4, 4))
            for m in raw)
    return TriangleMesh(np.asarray(verts), np.asarray(tris, dtype=np.int32),
                        symmetries=symmetries)

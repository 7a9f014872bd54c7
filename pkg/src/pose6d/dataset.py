"""Procedural benchmark scenes.

Ten textured objects cycling through the mesh kinds, a handful of query
renders per object at varied distances and rolls, a pre-rendered
template set per object, and a manifest tying the files together.
Everything derives from the run seed, so a directory regenerates
bit-identically.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .coarse import template_radius
from .fileio import write_geometry_map, write_json, write_ppm
from .geometry import (CameraIntrinsics, Pose, look_at_pose,
                       sample_template_poses, seeded_rng)
from .meshes import TriangleMesh, generate_procedural_mesh, save_mesh
from .render import render

QUERY_CAM = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0,
                             width=640, height=480)
TEMPLATE_CAM = CameraIntrinsics(fx=800.0, fy=800.0, cx=128.0, cy=128.0,
                                width=256, height=256)

_KINDS = ("box", "cylinder", "icosphere", "composite")

# query distance range in object diameters; keeps the silhouette well
# inside the frame together with the lateral offset below
_DIST_RANGE = (4.4, 6.2)
_LATERAL = 0.4


def benchmark_mesh(index: int, seed: int = 0) -> tuple[str, TriangleMesh]:
    """Deterministic procedural object for one benchmark slot."""
    kind = _KINDS[index % len(_KINDS)]
    mesh_seed = 1000 * seed + index
    if kind == "cylinder":
        rng = seeded_rng(mesh_seed, 0xCE)
        mesh = generate_procedural_mesh(
            kind, radius=float(rng.uniform(0.3, 0.45)),
            height=float(rng.uniform(0.8, 1.2)),
            segments=16, symmetry_order=8)
    else:
        mesh = generate_procedural_mesh(kind, seed=mesh_seed)
    return kind, mesh


def sample_query_poses(mesh: TriangleMesh, n: int, seed: int,
                       cam: CameraIntrinsics = QUERY_CAM) -> list[Pose]:
    """Random viewpoints at benchmark distances with lateral offsets."""
    rng = seeded_rng(seed, 0xD5)
    poses = []
    for _ in range(n):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        dist = float(rng.uniform(*_DIST_RANGE)) * mesh.diameter
        roll = float(rng.uniform(0.0, 2.0 * np.pi))
        base = look_at_pose(direction, dist, roll)
        lateral = rng.uniform(-_LATERAL, _LATERAL, size=2) * mesh.diameter
        t = base.translation + np.array([lateral[0], lateral[1], 0.0])
        poses.append(Pose(base.rotation, t))
    return poses


def _write_raw_templates(root: Path, mesh: TriangleMesh,
                         cam: CameraIntrinsics, n: int, fill: float,
                         seed: int) -> None:
    # pose sampling must mirror build_template_set so a disk set and an
    # in-memory set built from the same config are the same set
    radius = template_radius(mesh, cam, fill)
    poses = sample_template_poses(n, radius, seed)
    root.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        img, geom = render(mesh, pose, cam, shading="textured")
        write_ppm(root / f"{i:03d}.ppm", img)
        write_geometry_map(root / f"{i:03d}.rgmp", geom)
    write_json(root / "pose.json",
               {"poses": [p.matrix().tolist() for p in poses]})


def _cam_dict(cam: CameraIntrinsics) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height}


def cam_from_dict(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                            width=d["width"], height=d["height"])


def generate_scenes(out_dir, n_objects: int = 10, n_queries: int = 20,
                    n_templates: int = 128, fill: float = 0.8,
                    seed: int = 0) -> dict:
    """Write the full benchmark directory and return its manifest.

    Layout: ``meshes/<id>.ply`` (+ symmetry sidecar),
    ``templates/<id>/``, ``queries/<id>_q<j>.ppm|.rgmp``, and
    ``manifest.json`` carrying GT poses and camera models.
    """
    root = Path(out_dir)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    (root / "queries").mkdir(exist_ok=True)
    objects = []
    for i in range(n_objects):
        kind, mesh = benchmark_mesh(i, seed)
        object_id = f"obj{i:02d}"
        template_seed = 1000 * seed + i
        save_mesh(mesh, root / "meshes" / f"{object_id}.ply")
        _write_raw_templates(root / "templates" / object_id, mesh,
                             TEMPLATE_CAM, n_templates, fill,
                             seed=template_seed)
        entries = []
        for j, pose in enumerate(sample_query_poses(
                mesh, n_queries, seed=1000 * seed + 37 * i + 11)):
            entry_id = f"{object_id}_q{j:02d}"
            img, geom = render(mesh, pose, QUERY_CAM, shading="textured")
            write_ppm(root / "queries" / f"{entry_id}.ppm", img)
            write_geometry_map(root / "queries" / f"{entry_id}.rgmp", geom)
            entries.append({"id": entry_id,
                            "image": f"queries/{entry_id}.ppm",
                            "geometry": f"queries/{entry_id}.rgmp",
                            "pose": pose.matrix().tolist()})
        objects.append({"id": object_id, "kind": kind,
                        "mesh": f"meshes/{object_id}.ply",
                        "diameter": mesh.diameter,
                        "templates": f"templates/{object_id}",
                        "template_seed": template_seed,
                        "entries": entries})
    manifest = {"seed": seed, "camera": _cam_dict(QUERY_CAM),
                "template_camera": _cam_dict(TEMPLATE_CAM),
                "objects": objects}
    write_json(root / "manifest.json", manifest)
    return manifest

"""Procedural mesh generators and PLY round-trip tests."""

import numpy as np
import pytest

from pose6d.geometry import identity_pose
from pose6d.meshes import (TriangleMesh, box_mesh, composite_mesh,
                           cylinder_mesh, generate_procedural_mesh,
                           icosphere_mesh, is_watertight, load_mesh,
                           save_mesh)


def test_box_diameter_exact() -> None:
    mesh = box_mesh((1.0, 2.0, 3.0))
    assert abs(mesh.diameter - np.sqrt(14.0)) < 1e-12
    assert len(mesh.vertices) == 8
    assert len(mesh.triangles) == 12


def test_box_is_watertight_and_centered() -> None:
    mesh = box_mesh((0.8, 0.5, 0.3))
    assert is_watertight(mesh)
    lo, hi = mesh.bounds()
    np.testing.assert_allclose(lo, -hi, atol=1e-12)


def test_icosahedron_counts() -> None:
    mesh = icosphere_mesh(subdivisions=0, radius=1.0)
    assert len(mesh.vertices) == 12
    assert len(mesh.triangles) == 20
    assert is_watertight(mesh)


def test_icosphere_subdivision_counts() -> None:
    mesh = icosphere_mesh(subdivisions=2, radius=0.5)
    assert len(mesh.triangles) == 320
    assert is_watertight(mesh)


def test_deformed_icosphere_watertight_and_seeded() -> None:
    a = icosphere_mesh(subdivisions=2, radius=0.5, deform_seed=3)
    b = icosphere_mesh(subdivisions=2, radius=0.5, deform_seed=4)
    c = icosphere_mesh(subdivisions=2, radius=0.5, deform_seed=3)
    assert is_watertight(a)
    assert np.max(np.abs(a.vertices - b.vertices)) > 1e-6
    assert np.array_equal(a.vertices, c.vertices)


def test_cylinder_symmetry_list_length() -> None:
    mesh = cylinder_mesh(radius=0.4, height=1.0, segments=16,
                         symmetry_order=8)
    assert len(mesh.symmetries) == 8
    assert is_watertight(mesh)
    # Symmetry rotations really map the vertex set onto itself.
    for sym in mesh.symmetries:
        rotated = mesh.vertices @ sym.rotation.T
        d2 = np.sum((rotated[:, None, :] - mesh.vertices[None]) ** 2, axis=2)
        assert d2.min(axis=1).max() < 1e-18


def test_cylinder_rejects_non_dividing_order() -> None:
    with pytest.raises(ValueError):
        cylinder_mesh(segments=16, symmetry_order=5)


def test_box_has_identity_only() -> None:
    mesh = box_mesh((1.0, 2.0, 3.0))
    assert len(mesh.symmetries) == 1


def test_identity_symmetry_always_present() -> None:
    mesh = TriangleMesh(box_mesh((1, 1, 1)).vertices,
                        box_mesh((1, 1, 1)).triangles, symmetries=())
    assert len(mesh.symmetries) == 1
    np.testing.assert_allclose(mesh.symmetries[0].matrix(), np.eye(4),
                               atol=1e-12)


def test_composite_centered() -> None:
    mesh = composite_mesh(seed=2)
    lo, hi = mesh.bounds()
    np.testing.assert_allclose(lo + hi, 0.0, atol=1e-9)


def test_generate_kinds() -> None:
    for kind in ("box", "cylinder", "icosphere", "composite"):
        mesh = generate_procedural_mesh(kind, seed=5)
        assert mesh.diameter > 0
        assert len(mesh.symmetries) >= 1


def test_ply_round_trip(tmp_path) -> None:
    mesh = cylinder_mesh(radius=0.4, height=1.0, segments=16,
                         symmetry_order=8)
    path = tmp_path / "object.ply"
    save_mesh(mesh, path)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    assert len(back.symmetries) == len(mesh.symmetries)
    for s1, s2 in zip(back.symmetries, mesh.symmetries):
        np.testing.assert_allclose(s1.matrix(), s2.matrix(), atol=1e-15)


def test_ply_rejects_wrong_magic(tmp_path) -> None:
    path = tmp_path / "junk.ply"
    path.write_text("obj\n")
    with pytest.raises(ValueError):
        load_mesh(path)

"""Round trips and byte-level determinism for the on-disk formats."""

import numpy as np
import pytest

from pose6d.coarse import Template
from pose6d.evaluation import MetricThresholds, RecallSummary, evaluate_record
from pose6d.fileio import (read_estimates, read_flow_field,
                           read_geometry_map, read_json, read_network,
                           read_ppm, read_template_set, write_estimates,
                           write_flow_field, write_geometry_map, write_json,
                           write_network, write_ppm, write_results_csv,
                           write_summary_json, write_template_set)
from pose6d.flow import FlowField
from pose6d.geometry import CameraIntrinsics, look_at_pose
from pose6d.meshes import box_mesh
from pose6d.network import init_geometry_net
from pose6d.render import ImageBuffer, render


def test_ppm_round_trip_is_exact_on_bytes(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(17, 23, 3), dtype=np.uint8)
    path = tmp_path / "img.ppm"
    write_ppm(path, rgb)
    again = read_ppm(path)
    assert np.array_equal(rgb, again)
    # float image survives one quantization, then round trips stably
    img = ImageBuffer(rng.random((8, 9, 3), dtype=np.float32))
    write_ppm(path, img)
    q1 = read_ppm(path)
    write_ppm(path, ImageBuffer(q1.astype(np.float32) / 255.0))
    assert np.array_equal(q1, read_ppm(path))


def test_ppm_header_comments_and_errors(tmp_path):
    path = tmp_path / "odd.ppm"
    payload = bytes(range(2 * 2 * 3))
    path.write_bytes(b"P6 # binary\n# size next\n2\t2\n255\n" + payload)
    img = read_ppm(path)
    assert img.shape == (2, 2, 3)
    assert img.reshape(-1).tolist() == list(payload)

    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P5\n2 2\n255\n" + payload)
    with pytest.raises(ValueError):
        read_ppm(bad)


def test_geometry_map_round_trip(tmp_path, cam256):
    mesh = box_mesh((1.0, 0.8, 0.6))
    _, geom = render(mesh, look_at_pose([0.3, 0.4, 0.87], 4.0), cam256)
    path = tmp_path / "map.rgmp"
    write_geometry_map(path, geom)
    again = read_geometry_map(path)
    assert np.array_equal(geom.coords, again.coords)
    assert np.array_equal(geom.depth, again.depth)
    assert np.array_equal(geom.mask, again.mask)
    assert path.read_bytes()[:4] == b"RGMP"

    with pytest.raises(ValueError):
        read_geometry_map(_corrupt(tmp_path, path))


def _corrupt(tmp_path, path):
    bad = tmp_path / "corrupt.bin"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    return bad


def test_flow_field_round_trip(tmp_path, rng):
    h, w = 12, 15
    valid = rng.random((h, w)) > 0.3
    flow = FlowField(rng.normal(size=(h, w)).astype(np.float32),
                     rng.normal(size=(h, w)).astype(np.float32), valid)
    path = tmp_path / "field.rflw"
    write_flow_field(path, flow)
    again = read_flow_field(path)
    assert np.array_equal(flow.du, again.du)
    assert np.array_equal(flow.dv, again.dv)
    assert np.array_equal(flow.valid, again.valid)


def test_network_round_trip_and_count_check(tmp_path):
    net = init_geometry_net(seed=3)
    path = tmp_path / "weights.rnet"
    write_network(path, net)
    again = read_network(path, n_freq=5)
    assert np.array_equal(again.params,
                          net.params.astype(np.float32).astype(np.float64))
    with pytest.raises(ValueError):
        read_network(path, n_freq=4)


def test_template_set_round_trip(tmp_path, cam256):
    mesh = box_mesh((1.0, 0.7, 0.5))
    templates = []
    for i in range(3):
        pose = look_at_pose([0.1 * (i + 1), 0.2, 0.97], 4.0, roll=0.1 * i)
        img, geom = render(mesh, pose, cam256, shading="textured")
        templates.append(Template(img, geom, pose, i))
    root = tmp_path / "templates"
    write_template_set(root, templates)
    assert sorted(p.name for p in root.iterdir()) == [
        "000.ppm", "000.rgmp", "001.ppm", "001.rgmp",
        "002.ppm", "002.rgmp", "pose.json"]
    loaded = read_template_set(root)
    assert [t.index for t in loaded] == [0, 1, 2]
    for orig, back in zip(templates, loaded):
        assert np.allclose(back.pose.matrix(), orig.pose.matrix())
        assert np.array_equal(back.geometry.mask, orig.geometry.mask)
        # image went through one u8 quantization
        assert np.abs(back.image.data -
                      orig.image.data).max() <= 0.5 / 255.0 + 1e-6


def test_template_set_requires_contiguous_indices(tmp_path, cam256):
    mesh = box_mesh()
    pose = look_at_pose([0.0, 0.0, 1.0], 4.0)
    img, geom = render(mesh, pose, cam256)
    with pytest.raises(ValueError):
        write_template_set(tmp_path / "t", [Template(img, geom, pose, 1)])
    with pytest.raises(ValueError):
        read_template_set(tmp_path / "nonexistent")


def test_estimates_round_trip_and_canonical_bytes(tmp_path):
    pose = look_at_pose([0.2, 0.3, 0.93], 5.0)
    entries = [{"object": "obj0", "pose": pose.matrix().tolist()},
               {"object": "obj1", "pose": None}]
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_estimates(p1, entries)
    write_estimates(p2, entries)
    assert p1.read_bytes() == p2.read_bytes()
    back = read_estimates(p1)
    assert back[1]["pose"] is None
    assert np.allclose(back[0]["pose"], pose.matrix())


def test_results_csv_layout(tmp_path, cam256):
    th = MetricThresholds(vsd_taus=(0.2, 0.4), vsd_cutoffs=(0.3,),
                          mssd_cutoffs=(0.1,), mspd_cutoffs=(5.0,))
    mesh = box_mesh()
    gt = look_at_pose([0.0, 0.3, 0.954], 4.0)
    rec = evaluate_record("box0", gt, gt, mesh, cam256, th)
    path = tmp_path / "results.csv"
    write_results_csv(path, [rec], th)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "object,metric,threshold,pass"
    assert lines[1] == "box0,vsd,0.20/0.30,1"
    assert lines[2] == "box0,vsd,0.40/0.30,1"
    assert lines[3] == "box0,mssd,0.10,1"
    assert lines[4] == "box0,mspd,5.0,1"
    assert len(lines) == 5


def test_summary_json_fields(tmp_path):
    summary = RecallSummary(0.5, 0.4, 0.5, 0.6)
    path = tmp_path / "summary.json"
    write_summary_json(path, summary, extra={"failures": 2})
    payload = read_json(path)
    assert payload == {"ar": 0.5, "vsd_recall": 0.4, "mssd_recall": 0.5,
                       "mspd_recall": 0.6, "failures": 2}


def test_json_writer_is_deterministic(tmp_path):
    a, b = tmp_path / "x.json", tmp_path / "y.json"
    write_json(a, {"zebra": 1, "apple": [1, 2, {"m": 3}]})
    write_json(b, {"apple": [1, 2, {"m": 3}], "zebra": 1})
    assert a.read_bytes() == b.read_bytes()

import json
import shutil

import numpy as np
import pytest

from marginreg.dataset_io import (
    CaseBundle,
    DataError,
    PlyParseError,
    load_case,
    load_cloud,
    load_mesh,
    load_poses,
    mesh_vertex_colors,
    read_report,
    save_case,
    save_cloud,
    save_mesh,
    save_poses,
    write_report,
)
from marginreg.evaluation import LooReport
from marginreg.geometry import FiducialSet, PointCloud, RigidTransform, TriMesh, random_rigid


def _rel_close(a, b):
    # 9 significant digits
    return np.all(np.abs(a - b) <= 5e-9 * np.maximum(np.abs(b), 1e-300))


def test_single_triangle_header(tmp_path):
    mesh = TriMesh("camera", np.eye(3), [[0, 1, 2]])
    save_mesh(mesh, tmp_path / "t.ply")
    text = (tmp_path / "t.ply").read_text()
    lines = text.splitlines()
    assert lines[:2] == ["ply", "format ascii 1.0"]
    assert "element vertex 3" in lines and "element face 1" in lines
    assert "property float x" in lines


def test_cloud_colors_header_and_round_trip(tmp_path, rng):
    colors = rng.integers(0, 256, (10, 3)) / 255.0
    normals = rng.normal(size=(10, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pc = PointCloud("camera", rng.normal(size=(10, 3)), colors, normals)
    save_cloud(pc, tmp_path / "c.ply")
    assert "property uchar red" in (tmp_path / "c.ply").read_text()
    back = load_cloud(tmp_path / "c.ply")
    assert back.frame == "camera"
    assert _rel_close(back.points, pc.points)
    assert np.array_equal(np.rint(back.colors * 255), np.rint(colors * 255))
    assert np.allclose(back.normals, normals, atol=1e-8)


def test_mesh_round_trip_random(tmp_path, rng):
    for trial in range(5):
        n = int(rng.integers(3, 200))
        v = rng.normal(scale=0.05, size=(n, 3))
        f = np.array([rng.choice(n, 3, replace=False) for _ in range(2 * n)])
        labels = rng.integers(0, 2, n)
        mesh = TriMesh("specimen-scan", v, f, labels)
        save_mesh(mesh, tmp_path / f"m{trial}.ply")
        back = load_mesh(tmp_path / f"m{trial}.ply")
        assert back.frame == "specimen-scan"
        assert _rel_close(back.vertices, v)
        assert np.array_equal(back.faces, f) and np.array_equal(back.labels, labels)


def test_save_is_idempotent_through_reload(tmp_path, rng):
    mesh = TriMesh("camera", rng.normal(size=(20, 3)), [[0, 1, 2], [2, 3, 4]])
    save_mesh(mesh, tmp_path / "a.ply")
    save_mesh(load_mesh(tmp_path / "a.ply"), tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_mesh_vertex_colors(tmp_path):
    mesh = TriMesh("camera", np.eye(3), [[0, 1, 2]])
    save_mesh(mesh, tmp_path / "t.ply", colors=[[1, 0, 0], [0.5, 0.5, 0.5], [0, 0, 1]])
    assert mesh_vertex_colors(tmp_path / "t.ply").tolist() == [[255, 0, 0], [128, 128, 128], [0, 0, 255]]


@pytest.mark.parametrize(
    "body, needle",
    [
        ("plx\n", "magic"),
        ("ply\nformat binary_little_endian 1.0\nend_header\n", "unsupported format"),
        ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n", "unexpected end"),
        ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 zero 0\n", "malformed vertex"),
        ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n", "end_header"),
    ],
)
def test_malformed_ply_reports_byte_offset(tmp_path, body, needle):
    p = tmp_path / "bad.ply"
    p.write_text(body)
    with pytest.raises(PlyParseError, match=needle) as info:
        load_cloud(p)
    assert "byte offset" in str(info.value)
    assert 0 <= info.value.offset <= len(body)


def test_byte_offset_points_at_bad_record(tmp_path):
    head = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    body = head + "0 0 0\n1 2\n"
    p = tmp_path / "bad.ply"
    p.write_text(body)
    with pytest.raises(PlyParseError) as info:
        load_cloud(p)
    assert info.value.offset == len(head) + len("0 0 0\n")


def test_case_round_trip(tmp_path, wedge_phantom):
    b = wedge_phantom.bundle
    save_case(b, tmp_path / "case")
    back = load_case(tmp_path / "case")
    assert back.fiducial_labels == ("F1", "F2", "F3", "F4")
    assert _rel_close(back.specimen_mesh.vertices, b.specimen_mesh.vertices)
    assert np.array_equal(back.specimen_mesh.labels, b.specimen_mesh.labels)
    assert _rel_close(back.cavity_cloud.points, b.cavity_cloud.points)
    assert back.cavity_cloud.colors is not None
    for s in ("fids_specimen", "fids_surface", "fids_cavity"):
        assert _rel_close(getattr(back, s).positions, getattr(b, s).positions)
    assert np.allclose(back.marker_pose.matrix(), b.marker_pose.matrix(), atol=1e-8)
    assert np.allclose(back.cavity_pose.matrix(), b.cavity_pose.matrix(), atol=1e-8)


def test_missing_input(tmp_path, wedge_phantom):
    save_case(wedge_phantom.bundle, tmp_path / "case")
    (tmp_path / "case" / "cavity.ply").unlink()
    with pytest.raises(DataError, match="missing input cavity.ply"):
        load_case(tmp_path / "case")


def test_fiducial_label_mismatch(tmp_path, wedge_phantom):
    save_case(wedge_phantom.bundle, tmp_path / "case")
    fj = tmp_path / "case" / "fiducials.json"
    data = json.loads(fj.read_text())
    data["specimen"]["fiducials"] = data["specimen"]["fiducials"][:3]
    fj.write_text(json.dumps(data))
    with pytest.raises(DataError, match="fiducial correspondence violation"):
        load_case(tmp_path / "case")


def test_case_without_poses(tmp_path, wedge_phantom):
    save_case(wedge_phantom.bundle, tmp_path / "case")
    (tmp_path / "case" / "poses.json").unlink()
    b = load_case(tmp_path / "case")
    assert b.marker_pose is None and b.cavity_pose is None


def test_bundle_frame_invariants(wedge_phantom):
    b = wedge_phantom.bundle
    with pytest.raises(DataError):
        CaseBundle("x", b.specimen_mesh.with_vertices(b.specimen_mesh.vertices, frame="camera"), b.surface_cloud,
                   b.cavity_cloud, b.fids_specimen, b.fids_surface, b.fids_cavity)


def test_poses_round_trip_with_reprojection(tmp_path, rng):
    m, c = random_rigid(rng), random_rigid(rng)
    save_poses(tmp_path / "p.json", m, c)
    m2, c2 = load_poses(tmp_path / "p.json")
    assert np.allclose(m2.matrix(), m.matrix(), atol=1e-8) and np.allclose(c2.matrix(), c.matrix(), atol=1e-8)
    data = json.loads((tmp_path / "p.json").read_text())
    assert np.array(data["marker_pose"]).shape == (4, 4)


def test_report_format(tmp_path):
    rows = [LooReport("c1", m, [("F1", 1.0), ("F2", 2.0), ("F3", 3.0), ("F4", 4.04)]) for m in ("rigid", "similarity", "deform-cavity", "deform-combined")]
    write_report(rows, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == 5
    assert lines[0] == "case,method,mean_tre_mm,std_tre_mm,n_folds"
    assert lines[1] == "c1,rigid,2.5,1.3,4"
    assert read_report(tmp_path / "r.csv")[0]["mean_tre_mm"] == 2.5


def test_report_rejects_empty(tmp_path):
    with pytest.raises(DataError, match="nothing to report"):
        write_report([], tmp_path / "r.csv")

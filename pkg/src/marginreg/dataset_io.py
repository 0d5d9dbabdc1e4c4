"""Reading and writing case data.

Meshes and clouds are ASCII PLY, fiducials and poses JSON, reports CSV.
Floats are written with 9 significant digits, so ``load(save(x))`` matches
``x`` to about 1e-9 relative and a second save is byte-identical to the first.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import FiducialSet, GeometryError, PointCloud, RigidTransform, TriMesh

FLOAT_FMT = "%.9g"
REPORT_HEADER = ("case", "method", "mean_tre_mm", "std_tre_mm", "n_folds")

CASE_FILES = ("specimen.ply", "surface.ply", "cavity.ply", "fiducials.json")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class PlyParseError(DataError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class CaseBundle:
    case_id: str
    specimen_mesh: TriMesh
    surface_cloud: PointCloud
    cavity_cloud: PointCloud
    fids_specimen: FiducialSet
    fids_surface: FiducialSet
    fids_cavity: FiducialSet
    marker_pose: Optional[RigidTransform] = None
    cavity_pose: Optional[RigidTransform] = None

    def __post_init__(self):
        if not (self.fids_specimen.corresponds(self.fids_surface) and self.fids_specimen.corresponds(self.fids_cavity)):
            raise DataError("fiducial correspondence violation")
        if self.specimen_mesh.frame != "specimen-scan":
            raise DataError(f"specimen mesh must be in frame specimen-scan, got {self.specimen_mesh.frame}")
        if self.surface_cloud.frame != "camera" or self.cavity_cloud.frame != "camera":
            raise DataError("surface and cavity clouds must be in frame camera")

    @property
    def fiducial_labels(self) -> tuple:
        return self.fids_specimen.labels


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": int, "uchar": int, "short": int, "ushort": int, "int": int, "uint": int,
    "int8": int, "uint8": int, "int16": int, "uint16": int, "int32": int, "uint32": int,
    "float": float, "double": float, "float32": float, "float64": float,
}


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def _ply_text(frame: str, vertex_props: list, columns: list, faces: Optional[np.ndarray]) -> str:
    n = len(columns[0]) if columns else 0
    lines = ["ply", "format ascii 1.0", f"comment frame {frame}", f"element vertex {n}"]
    lines += [f"property {t} {name}" for t, name in vertex_props]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    for i in range(n):
        lines.append(" ".join(col[i] for col in columns))
    if faces is not None:
        for a, b, c in faces:
            lines.append(f"3 {a} {b} {c}")
    return "\n".join(lines) + "\n"


def _vertex_columns(points, colors=None, normals=None, labels=None):
    props = [("float", "x"), ("float", "y"), ("float", "z")]
    cols = [[_fmt(v) for v in points[:, j]] for j in range(3)]
    if normals is not None:
        props += [("float", "nx"), ("float", "ny"), ("float", "nz")]
        cols += [[_fmt(v) for v in normals[:, j]] for j in range(3)]
    if colors is not None:
        rgb = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(int)
        props += [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]
        cols += [[str(v) for v in rgb[:, j]] for j in range(3)]
    if labels is not None:
        props.append(("int", "label"))
        cols.append([str(int(v)) for v in labels])
    return props, cols


def _write_text(path, text: str) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def save_mesh(mesh: TriMesh, path, colors=None) -> None:
    props, cols = _vertex_columns(mesh.vertices, colors=colors, labels=mesh.labels)
    _write_text(path, _ply_text(mesh.frame, props, cols, mesh.faces))


def save_cloud(cloud: PointCloud, path) -> None:
    props, cols = _vertex_columns(cloud.points, colors=cloud.colors, normals=cloud.normals)
    _write_text(path, _ply_text(cloud.frame, props, cols, None))


def read_ply(path) -> dict:
    """Parse an ASCII PLY file into ``{"frame", "vertex": {prop: array}, "face": array|None}``."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc

    offset = 0
    lines = raw.split(b"\n")
    starts = []
    for line in lines:
        starts.append(offset)
        offset += len(line) + 1

    def fail(msg, lineno):
        raise PlyParseError(msg, starts[min(lineno, len(starts) - 1)], path)

    if not lines or lines[0].strip() != b"ply":
        fail("missing 'ply' magic", 0)
    frame = "camera"
    elements = []  # (name, count, [(name, type, is_list, count_type)])
    i = 1
    header_done = False
    while i < len(lines):
        tok = lines[i].decode("ascii", errors="replace").split()
        i += 1
        if not tok:
            continue
        kw = tok[0]
        if kw == "format":
            if tok[1:] != ["ascii", "1.0"]:
                fail(f"unsupported format {' '.join(tok[1:])}", i - 1)
        elif kw == "comment":
            if len(tok) >= 3 and tok[1] == "frame":
                frame = tok[2]
        elif kw == "obj_info":
            pass
        elif kw == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                fail("malformed element line", i - 1)
            elements.append((tok[1], int(tok[2]), []))
        elif kw == "property":
            if not elements:
                fail("property before element", i - 1)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    fail("malformed list property", i - 1)
                elements[-1][2].append((tok[4], tok[3], True))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    fail("malformed property line", i - 1)
                elements[-1][2].append((tok[2], tok[1], False))
        elif kw == "end_header":
            header_done = True
            break
        else:
            fail(f"unknown header keyword {kw!r}", i - 1)
    if not header_done:
        fail("missing end_header", len(lines) - 1)

    out = {"frame": frame, "vertex": {}, "face": None}
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            while i < len(lines) and not lines[i].strip():
                i += 1
            if i >= len(lines):
                fail(f"unexpected end of file in element {name}", len(lines) - 1)
            tok = lines[i].split()
            try:
                if any(p[2] for p in props):
                    # only the face list layout is supported for list elements
                    n = int(tok[0])
                    vals = [int(v) for v in tok[1:1 + n]]
                    if len(vals) != n or len(tok) != 1 + n:
                        raise ValueError
                    rows.append(vals)
                else:
                    if len(tok) != len(props):
                        raise ValueError
                    rows.append([_PLY_TYPES[t](v) if _PLY_TYPES[t] is float else int(v) for (_, t, _l), v in zip(props, tok)])
            except ValueError:
                fail(f"malformed {name} record", i)
            i += 1
        if name == "vertex":
            arr = np.array(rows, dtype=np.float64).reshape(count, len(props))
            if not np.all(np.isfinite(arr)):
                fail("non-finite vertex value", i - 1)
            out["vertex"] = {p[0]: arr[:, j] for j, p in enumerate(props)}
        elif name == "face":
            if any(len(r) != 3 for r in rows):
                fail("only triangular faces are supported", i - 1)
            out["face"] = np.array(rows, dtype=np.int64).reshape(count, 3)
    while i < len(lines):
        if lines[i].strip():
            fail("trailing data after last element", i)
        i += 1
    return out


def _xyz(ply: dict, path) -> np.ndarray:
    v = ply["vertex"]
    if not all(k in v for k in "xyz"):
        raise DataError(f"{path}: vertex element lacks x/y/z")
    return np.column_stack([v["x"], v["y"], v["z"]]) if len(v["x"]) else np.zeros((0, 3))


def load_mesh(path) -> TriMesh:
    ply = read_ply(path)
    if ply["face"] is None:
        raise DataError(f"{path}: no face element")
    labels = ply["vertex"].get("label")
    try:
        return TriMesh(ply["frame"], _xyz(ply, path), ply["face"], None if labels is None else labels.astype(np.int64))
    except GeometryError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_cloud(path) -> PointCloud:
    ply = read_ply(path)
    v = ply["vertex"]
    colors = normals = None
    if all(k in v for k in ("red", "green", "blue")):
        colors = np.column_stack([v["red"], v["green"], v["blue"]]) / 255.0
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.column_stack([v["nx"], v["ny"], v["nz"]])
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    try:
        return PointCloud(ply["frame"], _xyz(ply, path), colors, normals)
    except GeometryError as exc:
        raise DataError(f"{path}: {exc}") from exc


def mesh_vertex_colors(path) -> Optional[np.ndarray]:
    """uchar RGB vertex colours of a PLY file, if present."""
    v = read_ply(path)["vertex"]
    if not all(k in v for k in ("red", "green", "blue")):
        return None
    return np.column_stack([v["red"], v["green"], v["blue"]]).astype(int)


# ---------------------------------------------------------------- JSON

def fiducials_to_dict(fids: FiducialSet) -> dict:
    return {
        "frame": fids.frame,
        "fiducials": [
            {"label": l, "position_m": [float(_fmt(c)) for c in p]} for l, p in zip(fids.labels, fids.positions)
        ],
    }


def fiducials_from_dict(data: dict) -> FiducialSet:
    try:
        entries = data["fiducials"]
        labels = [e["label"] for e in entries]
        pos = np.array([e["position_m"] for e in entries], dtype=np.float64).reshape(len(entries), 3)
        return FiducialSet(data["frame"], tuple(labels), pos)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed fiducial set: {exc}") from exc


def _dump_json(obj, path) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_poses(path, marker_pose: Optional[RigidTransform], cavity_pose: Optional[RigidTransform]) -> None:
    data = {}
    if marker_pose is not None:
        data["marker_pose"] = [[float(_fmt(v)) for v in row] for row in marker_pose.matrix()]
    if cavity_pose is not None:
        data["cavity_pose"] = [[float(_fmt(v)) for v in row] for row in cavity_pose.matrix()]
    _dump_json(data, path)


def load_poses(path) -> tuple[Optional[RigidTransform], Optional[RigidTransform]]:
    with open(path) as fh:
        data = json.load(fh)
    out = []
    for key in ("marker_pose", "cavity_pose"):
        m = data.get(key)
        try:
            out.append(None if m is None else RigidTransform.from_matrix(m))
        except GeometryError as exc:
            raise DataError(f"{path}: {key}: {exc}") from exc
    return out[0], out[1]


# ---------------------------------------------------------------- cases

def load_case(directory) -> CaseBundle:
    d = Path(directory)
    for name in CASE_FILES:
        if not (d / name).is_file():
            raise DataError(f"missing input {name}")
    specimen = load_mesh(d / "specimen.ply")
    surface = load_cloud(d / "surface.ply")
    cavity = load_cloud(d / "cavity.ply")
    try:
        with open(d / "fiducials.json") as fh:
            fj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"fiducials.json: {exc}") from exc
    try:
        sets = {k: fiducials_from_dict(fj[k]) for k in ("specimen", "surface", "cavity")}
    except KeyError as exc:
        raise DataError(f"fiducials.json lacks set {exc}") from exc
    marker = cav = None
    if (d / "poses.json").is_file():
        marker, cav = load_poses(d / "poses.json")
    return CaseBundle(
        case_id=d.name,
        specimen_mesh=specimen,
        surface_cloud=surface,
        cavity_cloud=cavity,
        fids_specimen=sets["specimen"],
        fids_surface=sets["surface"],
        fids_cavity=sets["cavity"],
        marker_pose=marker,
        cavity_pose=cav,
    )


def save_case(bundle: CaseBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_mesh(bundle.specimen_mesh, d / "specimen.ply")
    save_cloud(bundle.surface_cloud, d / "surface.ply")
    save_cloud(bundle.cavity_cloud, d / "cavity.ply")
    _dump_json(
        {
            "specimen": fiducials_to_dict(bundle.fids_specimen),
            "surface": fiducials_to_dict(bundle.fids_surface),
            "cavity": fiducials_to_dict(bundle.fids_cavity),
        },
        d / "fiducials.json",
    )
    if bundle.marker_pose is not None or bundle.cavity_pose is not None:
        save_poses(d / "poses.json", bundle.marker_pose, bundle.cavity_pose)


# ---------------------------------------------------------------- reports

def write_report(rows: Iterable, path) -> None:
    """Write TRE summary rows as CSV.

    Rows are ``LooReport``-like objects (``case_id``, ``method``,
    ``mean_tre_mm``, ``std_tre_mm``, ``per_fold``) or plain mappings keyed by
    the header names.
    """
    rows = list(rows)
    if not rows:
        raise DataError("nothing to report")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in rows:
                w.writerow(_report_fields(r))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _fmt_stat(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.1f}"


def _report_fields(r) -> list:
    if isinstance(r, dict):
        return [r["case"], r["method"], _fmt_stat(r["mean_tre_mm"]), _fmt_stat(r["std_tre_mm"]), int(r["n_folds"])]
    return [r.case_id, r.method, _fmt_stat(r.mean_tre_mm), _fmt_stat(r.std_tre_mm), r.n_folds]


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise DataError(f"{path}: unexpected report header {reader.fieldnames}")
        return [
            {
                "case": r["case"],
                "method": r["method"],
                "mean_tre_mm": float(r["mean_tre_mm"]),
                "std_tre_mm": float(r["std_tre_mm"]),
                "n_folds": int(r["n_folds"]),
            }
            for r in reader
        ]

"""Marker-frame pose algebra and overlay export."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import CaseBundle, DataError, save_mesh
from .geometry import RigidTransform, TriMesh, compose, invert

MARGIN_RGB = (1.0, 0.0, 0.0)
TISSUE_RGB = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class MarkerRegistration:
    T_camera_marker: RigidTransform
    T_camera_cavity: RigidTransform

    @property
    def T_marker_cavity(self) -> RigidTransform:
        return compose(invert(self.T_camera_marker), self.T_camera_cavity)


def marker_registration(bundle: CaseBundle) -> MarkerRegistration:
    if bundle.marker_pose is None or bundle.cavity_pose is None:
        raise DataError("no marker/cavity pose in bundle")
    return MarkerRegistration(bundle.marker_pose, bundle.cavity_pose)


def compose_marker_frame(bundle: CaseBundle, mesh: TriMesh) -> TriMesh:
    """Express a deformed mesh in the marker frame.

    A mesh in the cavity frame is mapped by T_marker_cavity. A mesh still in
    camera coordinates (as returned by registration) is first brought into
    the cavity frame with the inverse cavity pose.
    """
    reg = marker_registration(bundle)
    v = mesh.vertices
    if mesh.frame == "camera":
        v = invert(reg.T_camera_cavity).apply(v)
    elif mesh.frame != "cavity":
        raise DataError(f"cannot place a mesh in frame {mesh.frame} on the marker")
    return mesh.with_vertices(reg.T_marker_cavity.apply(v), frame="marker")


def overlay_colors(mesh: TriMesh) -> np.ndarray:
    colors = np.tile(np.array(TISSUE_RGB), (len(mesh.vertices), 1))
    if mesh.labels is not None:
        colors[np.asarray(mesh.labels) == 1] = MARGIN_RGB
    return colors


def export_overlay(mesh: TriMesh, path) -> Path:
    """Write a colored PLY plus ``<stem>.meta.json``; returns the sidecar path."""
    path = Path(path)
    save_mesh(mesh, path, colors=overlay_colors(mesh))
    labels = np.zeros(len(mesh.vertices), dtype=int) if mesh.labels is None else np.asarray(mesh.labels)
    meta = {
        "frame": mesh.frame,
        "units": "m",
        "n_vertices": int(len(mesh.vertices)),
        "n_faces": int(len(mesh.faces)),
        "n_margin_vertices": int(np.sum(labels == 1)),
        "colors": {"margin": [255, 0, 0], "tissue": [128, 128, 128]},
    }
    meta_path = path.with_suffix(".meta.json")
    with open(meta_path, "w", newline="\n") as fh:
        fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta_path

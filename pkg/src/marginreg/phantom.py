"""Synthetic specimen/cavity cases with a known ground-truth deformation.

The in-situ specimen is a solid over a rectangular footprint: its flat top is
the pre-resection external surface, its floor and walls form the cavity. The
observed (scanned) specimen is obtained by inverting the ground-truth map

    phi*(x) = x_hat + u*(x_hat),   x_hat = s* (x - c) + c

so that registering the observed specimen back must reproduce the in-situ
shape. Fiducials sit on the rim of the top face.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset_io import CaseBundle, load_mesh, save_case, save_mesh
from .geometry import (
    FiducialSet,
    PointCloud,
    RigidTransform,
    TriMesh,
    random_rotation,
    rotation_about_axis,
)
from .kelvinlet import ElasticConstants, KelvinletField, displacement_at

SHAPES = ("thin-slab", "thick-wedge")
WARPS = ("kelvinlet", "bend")

TOP, BOTTOM, WALL = 0, 1, 2


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    shape: str = "thick-wedge"
    length_m: Optional[float] = None
    width_m: Optional[float] = None
    thickness_min_m: Optional[float] = None
    thickness_max_m: Optional[float] = None
    true_scale: float = 0.85
    peak_warp_m: float = 0.005
    n_warp_points: int = 3
    warp: str = "kelvinlet"
    cloud_noise_sigma_m: float = 0.0005
    cloud_density_per_m2: float = 5.0e5
    grid_spacing_m: float = 0.0025
    capture_motion: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise PhantomError(f"unknown shape {self.shape!r}")
        if self.warp not in WARPS:
            raise PhantomError(f"unknown warp {self.warp!r}")
        defaults = {
            "thin-slab": (0.060, 0.040, 0.006, 0.006),
            "thick-wedge": (0.050, 0.040, 0.008, 0.025),
        }[self.shape]
        for name, val in zip(("length_m", "width_m", "thickness_min_m", "thickness_max_m"), defaults):
            if getattr(self, name) is None:
                object.__setattr__(self, name, val)
        if min(self.length_m, self.width_m, self.thickness_min_m, self.thickness_max_m) <= 0:
            raise PhantomError("dimensions must be positive")
        if self.thickness_max_m < self.thickness_min_m:
            raise PhantomError("thickness_max_m must be >= thickness_min_m")
        if not 0.5 <= self.true_scale <= 1.0:
            raise PhantomError("true_scale must lie in [0.5, 1.0]")
        if self.cloud_noise_sigma_m < 0 or self.peak_warp_m < 0:
            raise PhantomError("noise and warp magnitude must be >= 0")
        if self.cloud_density_per_m2 <= 0 or self.grid_spacing_m <= 0:
            raise PhantomError("density and grid spacing must be positive")
        if self.n_warp_points < 1:
            raise PhantomError("n_warp_points must be >= 1")


@dataclass(eq=False)
class Phantom:
    spec: PhantomSpec
    bundle: CaseBundle
    insitu_mesh: TriMesh
    true_field: KelvinletField
    scan_pose: RigidTransform
    surface_motion: RigidTransform
    vertex_region: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------- geometry

def _grid_index(nx, ny):
    return np.arange(nx * ny).reshape(ny, nx)


def _grid_faces(idx, flip=False):
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    if flip:
        return np.concatenate([np.column_stack([a, c, b]), np.column_stack([a, d, c])])
    return np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])


def _ring(nx, ny):
    """Boundary (i, j) grid coordinates walked counter-clockwise."""
    pts = [(i, 0) for i in range(nx - 1)]
    pts += [(nx - 1, j) for j in range(ny - 1)]
    pts += [(i, ny - 1) for i in range(nx - 1, 0, -1)]
    pts += [(0, j) for j in range(ny - 1, 0, -1)]
    return pts


def solid_mesh(spec: PhantomSpec):
    """Closed triangle mesh of the specimen solid in its own frame (top face at z = 0).

    Returns vertices, faces, per-face region and the top-grid index array.
    """
    L, W, h = spec.length_m, spec.width_m, spec.grid_spacing_m
    nx = 2 * max(1, int(round(L / h / 2))) + 1
    ny = 2 * max(1, int(round(W / h / 2))) + 1
    xs = np.linspace(-L / 2, L / 2, nx)
    ys = np.linspace(-W / 2, W / 2, ny)
    X, Y = np.meshgrid(xs, ys)

    def thickness(x):
        t = (x + L / 2) / L
        return spec.thickness_min_m + (spec.thickness_max_m - spec.thickness_min_m) * t

    top = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    bottom = np.column_stack([X.ravel(), Y.ravel(), -thickness(X.ravel())])
    n_top = len(top)
    idx_top = _grid_index(nx, ny)
    idx_bot = idx_top + n_top
    faces = [_grid_faces(idx_top), _grid_faces(idx_bot, flip=True)]
    regions = [np.full(len(faces[0]), TOP), np.full(len(faces[1]), BOTTOM)]

    ring = _ring(nx, ny)
    layers = max(1, int(np.ceil(spec.thickness_max_m / h)))
    wall_pts = []
    base = 2 * n_top
    # layer 0 = top rim, layer `layers` = bottom rim; interior layers are new vertices
    ring_ids = [[idx_top[j, i] for i, j in ring]]
    for l in range(1, layers):
        frac = l / layers
        ids = []
        for i, j in ring:
            x, y = xs[i], ys[j]
            wall_pts.append((x, y, -frac * thickness(x)))
            ids.append(base + len(wall_pts) - 1)
        ring_ids.append(ids)
    ring_ids.append([idx_bot[j, i] for i, j in ring])
    wf = []
    m = len(ring)
    for l in range(layers):
        up, dn = ring_ids[l], ring_ids[l + 1]
        for q in range(m):
            a, b = up[q], up[(q + 1) % m]
            c, d = dn[(q + 1) % m], dn[q]
            wf.append((a, d, c))
            wf.append((a, c, b))
    faces.append(np.array(wf, dtype=np.int64))
    regions.append(np.full(len(wf), WALL))
    verts = np.vstack([top, bottom, np.array(wall_pts).reshape(-1, 3)])
    return verts, np.vstack(faces), np.concatenate(regions), idx_top


def _sample_surface(verts, faces, density, rng):
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    n = max(1, int(round(density * area.sum())))
    pick = rng.choice(len(faces), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[pick]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


# ---------------------------------------------------------------- ground truth

def _true_field(spec: PhantomSpec, insitu: np.ndarray, scale_center: np.ndarray, rng) -> KelvinletField:
    lo, hi = insitu.min(axis=0), insitu.max(axis=0)
    n = spec.n_warp_points
    centers = lo + rng.random((n, 3)) * (hi - lo)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    fld = KelvinletField(ElasticConstants(), 0.01, centers, dirs, spec.true_scale, scale_center)
    peak = np.max(np.linalg.norm(displacement_at(fld, insitu), axis=1)) if spec.peak_warp_m > 0 else 1.0
    forces = dirs * (spec.peak_warp_m / peak)
    return fld.with_params(forces=forces)


def _bend_displacement(spec: PhantomSpec, frame_pose: RigidTransform):
    """Out-of-model warp: quadratic bend along the specimen's long axis."""
    R, d = frame_pose.rotation, frame_pose.translation
    half = spec.length_m / 2

    def u(xhat):
        local = (np.asarray(xhat) - d) @ R
        amp = spec.peak_warp_m * (local[..., 0] / half) ** 2
        return amp[..., None] * R[:, 2]

    return u


def apply_ground_truth(disp, scale: float, center, x) -> np.ndarray:
    xhat = scale * (np.asarray(x) - center) + center
    return xhat + disp(xhat)


def invert_ground_truth(disp, scale: float, center, y, max_iter: int = 100, tol: float = 1e-9):
    """Solve phi*(x) = y for x by fixed-point iteration on the elastic part."""
    y = np.asarray(y, dtype=np.float64)
    xhat = y.copy()
    for _ in range(max_iter):
        nxt = y - disp(xhat)
        if np.max(np.abs(nxt - xhat)) < tol:
            xhat = nxt
            break
        xhat = nxt
    else:
        raise PhantomError("phantom deformation too extreme")
    return (xhat - center) / scale + center, xhat


def build_phantom(spec: PhantomSpec) -> Phantom:
    rng = np.random.default_rng(spec.rng_seed)
    local, faces, regions, idx_top = solid_mesh(spec)

    # place the in-situ specimen in front of the camera
    place = RigidTransform(rotation_about_axis([1.0, 0.3, 0.0], 0.35), [0.02, -0.01, 0.40])
    insitu = place.apply(local)

    ny, nx = idx_top.shape
    fid_ids = np.array([idx_top[ny // 2, 0], idx_top[0, nx // 2], idx_top[ny // 2, nx - 1], idx_top[ny - 1, nx // 2]])
    labels = ("F1", "F2", "F3", "F4")

    vregion = np.full(len(insitu), WALL)
    vregion[idx_top.ravel()] = TOP
    vregion[idx_top.ravel() + idx_top.size] = BOTTOM
    # rim vertices of the top grid also belong to the walls; keep TOP for them

    if spec.warp == "kelvinlet":
        fld = _true_field(spec, insitu, np.zeros(3), rng)
        disp = lambda xh: displacement_at(fld, xh)
    else:
        fld = KelvinletField(ElasticConstants(), 0.01, np.zeros((1, 3)), np.zeros((1, 3)), spec.true_scale)
        disp = _bend_displacement(spec, place)

    _, xhat_fid = invert_ground_truth(disp, spec.true_scale, np.zeros(3), insitu[fid_ids])
    center = xhat_fid.mean(axis=0)
    fld = KelvinletField(fld.constants, fld.radial_scale_m, fld.centers, fld.forces, spec.true_scale, center)
    observed, _ = invert_ground_truth(disp, spec.true_scale, center, insitu)

    # margin annotation: floor vertices near one end of the specimen
    floor = np.where(vregion == BOTTOM)[0]
    anchor = place.apply(np.array([spec.length_m / 4, 0.0, 0.0]))
    near = floor[np.linalg.norm(insitu[floor, :2] - anchor[:2], axis=1) < 0.008]
    margin = np.zeros(len(insitu), dtype=np.int64)
    margin[near] = 1

    scan_pose = RigidTransform(random_rotation(rng), rng.uniform(-0.1, 0.1, 3))
    specimen = TriMesh("specimen-scan", scan_pose.apply(observed), faces, margin)

    cav_faces = faces[regions != TOP]
    top_faces = faces[regions == TOP]
    cav_pts = _sample_surface(insitu, cav_faces, spec.cloud_density_per_m2, rng)
    srf_pts = _sample_surface(insitu, top_faces, spec.cloud_density_per_m2, rng)
    cav_pts = cav_pts + rng.normal(scale=spec.cloud_noise_sigma_m, size=cav_pts.shape) if spec.cloud_noise_sigma_m > 0 else cav_pts
    srf_pts = srf_pts + rng.normal(scale=spec.cloud_noise_sigma_m, size=srf_pts.shape) if spec.cloud_noise_sigma_m > 0 else srf_pts

    if spec.capture_motion:
        motion = RigidTransform(rotation_about_axis(rng.normal(size=3), np.deg2rad(4.0)), rng.uniform(-0.005, 0.005, 3))
    else:
        motion = RigidTransform.identity()

    colors_c = np.tile([0.8, 0.3, 0.3], (len(cav_pts), 1))
    colors_s = np.tile([0.9, 0.7, 0.6], (len(srf_pts), 1))
    cavity = PointCloud("camera", cav_pts, colors_c)
    surface = PointCloud("camera", motion.apply(srf_pts), colors_s)

    fid_insitu = insitu[fid_ids]
    centroid = fid_insitu.mean(axis=0)
    marker_pose = RigidTransform(rotation_about_axis(rng.normal(size=3), rng.uniform(0, np.pi)), centroid + rng.uniform(-0.08, 0.08, 3))
    cavity_pose = RigidTransform(place.rotation, centroid)

    bundle = CaseBundle(
        case_id=f"{spec.shape}-seed{spec.rng_seed}",
        specimen_mesh=specimen,
        surface_cloud=surface,
        cavity_cloud=cavity,
        fids_specimen=FiducialSet("specimen-scan", labels, specimen.vertices[fid_ids]),
        fids_surface=FiducialSet("camera", labels, motion.apply(fid_insitu)),
        fids_cavity=FiducialSet("camera", labels, fid_insitu),
        marker_pose=marker_pose,
        cavity_pose=cavity_pose,
    )
    return Phantom(spec, bundle, TriMesh("camera", insitu, faces, margin), fld, scan_pose, motion, vregion)


def _manifest(ph: Phantom) -> dict:
    f = ph.true_field
    return {
        "phantom_spec": asdict(ph.spec),
        "ground_truth": {
            "warp": ph.spec.warp,
            "true_scale": ph.spec.true_scale,
            "scale_center_m": f.scale_center.tolist(),
            "kelvinlet_centers_m": f.centers.tolist(),
            "kelvinlet_forces_N": f.forces.tolist(),
            "radial_scale_m": f.radial_scale_m,
            "young_modulus_Pa": f.constants.young_modulus_Pa,
            "poisson_ratio": f.constants.poisson_ratio,
            "scan_pose": ph.scan_pose.matrix().tolist(),
            "surface_capture_motion": ph.surface_motion.matrix().tolist(),
            "insitu_mesh": "insitu.ply",
        },
    }


def generate_case(spec: PhantomSpec, directory) -> CaseBundle:
    """Build a phantom and write it as a case directory plus ``manifest.json`` and ``insitu.ply``."""
    ph = build_phantom(spec)
    d = Path(directory)
    save_case(ph.bundle, d)
    save_mesh(ph.insitu_mesh, d / "insitu.ply")
    with open(d / "manifest.json", "w", newline="\n") as fh:
        fh.write(json.dumps(_manifest(ph), indent=2, sort_keys=True) + "\n")
    return ph.bundle


def load_insitu(directory) -> TriMesh:
    return load_mesh(Path(directory) / "insitu.ply")


@dataclass(frozen=True)
class DenseError:
    per_vertex_mm: np.ndarray
    mean_mm: float
    median_mm: float
    max_mm: float


def ground_truth_tre(insitu: TriMesh, candidate: TriMesh) -> DenseError:
    """Per-vertex distance between a registered mesh and the known in-situ mesh."""
    if candidate.vertices.shape != insitu.vertices.shape or not np.array_equal(candidate.faces, insitu.faces):
        raise PhantomError("candidate mesh topology differs from phantom specimen mesh")
    e = np.linalg.norm(candidate.vertices - insitu.vertices, axis=1) * 1000.0
    return DenseError(e, float(e.mean()), float(np.median(e)), float(e.max()))

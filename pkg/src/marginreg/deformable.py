"""Kelvinlet-based deformable registration of a specimen mesh onto target clouds.

The specimen is first aligned rigidly with the fiducials, then a regularized
Kelvinlet field (k point forces plus a global scale) is fitted by
Gauss-Newton/Levenberg-Marquardt inside an ICP-style correspondence loop.

Objective, for forces F and scale s = exp(t):

    E = w_fid * sum_i |phi(p_i) - q_i|^2
      + w_surf / m * sum_j min(|y_j(F, t) - z_j|^2, gate^2)
      + lambda * R(F)

z_j are (up to m) target cloud points and y_j is their closest point on the
deformed specimen surface, held as a (face, barycentric) pair fixed during
the inner solve. Correspondences run from the target cloud onto the mesh:
the cloud covers only part of the specimen, so unmatched specimen regions
exert no pull. Truncation at the gate and the previous face being kept as a
candidate make correspondence updates monotone, so the recorded objective
never increases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .dataset_io import CaseBundle
from .geometry import (
    MeshProximity,
    PointCloud,
    RigidTransform,
    SimilarityTransform,
    TriMesh,
    farthest_point_sampling,
)
from .kelvinlet import (
    ElasticConstants,
    KelvinletField,
    deform_point,
    displacement_derivative_along,
    kernel_matrices,
    kernel_matrix_gradients,
)
from .rigid import fit_rigid, fit_similarity

log = logging.getLogger(__name__)

FROM_CAVITY = "from-cavity"
FROM_SURFACE = "from-surface"
MAX_HALVINGS = 20
INITIAL_DAMPING = 1e-3
MIN_DAMPING = 1e-9


class DivergenceError(RuntimeError):
    def __init__(self, msg: str = "diverged"):
        super().__init__(msg)


class InsufficientFiducialsError(ValueError):
    def __init__(self, msg: str = "insufficient fiducials"):
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class TargetCloud:
    cloud: PointCloud
    provenance: np.ndarray

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("empty target")
        if len(self.provenance) != len(self.cloud):
            raise ValueError("provenance length does not match point count")


@dataclass(eq=False)
class RegistrationResult:
    mode: str
    rigid_init: RigidTransform
    transform: Optional[SimilarityTransform | RigidTransform]
    field: Optional[KelvinletField]
    deformed_mesh: TriMesh
    objective_trace: list = field(default_factory=list)
    fiducial_residuals_mm: dict = field(default_factory=dict)
    converged: bool = True
    iterations_used: int = 0

    def map_points(self, x) -> np.ndarray:
        """Map specimen-scan coordinates into the target (cavity capture) coordinates."""
        x = np.asarray(x, dtype=np.float64)
        if self.field is None:
            return self.transform.apply(x)
        return deform_point(self.field, self.rigid_init.apply(x))


def build_target(bundle: CaseBundle, mode: str) -> TargetCloud:
    cav = bundle.cavity_cloud.points
    if mode == "deform-cavity":
        prov = np.full(len(cav), FROM_CAVITY)
        return TargetCloud(PointCloud("camera", cav), prov)
    if mode != "deform-combined":
        raise ValueError(f"no target cloud for mode {mode!r}")
    align = fit_rigid(bundle.fids_surface.positions, bundle.fids_cavity.positions)
    srf = align.apply(bundle.surface_cloud.points)
    pts = np.vstack([cav, srf])
    prov = np.array([FROM_CAVITY] * len(cav) + [FROM_SURFACE] * len(srf))
    return TargetCloud(PointCloud("camera", pts), prov)


def rigid_initialize(bundle: CaseBundle, fiducial_subset: Sequence[str]) -> RigidTransform:
    labels = [l for l in fiducial_subset if l in bundle.fids_specimen.labels and l in bundle.fids_cavity.labels]
    if len(labels) < 3 or len(set(labels)) < 3:
        raise InsufficientFiducialsError()
    return fit_rigid(bundle.fids_specimen.subset(labels).positions, bundle.fids_cavity.subset(labels).positions)


def deform_mesh(field: Optional[KelvinletField], rigid_init: RigidTransform, mesh: TriMesh, frame: str = "camera") -> TriMesh:
    v = rigid_init.apply(mesh.vertices)
    if field is not None:
        v = deform_point(field, v)
    return mesh.with_vertices(v, frame=frame)


def _fiducial_residuals(bundle: CaseBundle, mapper) -> dict:
    p = mapper(bundle.fids_specimen.positions)
    e = np.linalg.norm(p - bundle.fids_cavity.positions, axis=1) * 1000.0
    return {l: float(v) for l, v in zip(bundle.fids_specimen.labels, e)}


def control_points(vertices: np.ndarray, k: int, seed: int) -> np.ndarray:
    return vertices[farthest_point_sampling(vertices, k, seed)]


def quadrature_lattice(vertices: np.ndarray, spacing: float, max_points: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred lattice over the bounding box of ``vertices`` with equal cell volumes."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    extent = np.maximum(hi - lo, 1e-12)
    n = np.maximum(1, np.ceil(extent / spacing)).astype(int)
    while np.prod(n) > max_points:
        n = np.maximum(1, n - 1)
    axes = [lo[i] + (np.arange(n[i]) + 0.5) * extent[i] / n[i] for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts, np.full(len(pts), float(np.prod(extent)) / len(pts))


class _Problem:
    """Residuals and Jacobians of the deformable objective for fixed correspondences."""

    def __init__(self, base: KelvinletField, fid_src, fid_tgt, verts, targets, gate, lam, quad_pts, quad_w, w_fid, w_surf):
        self.base = base
        self.fid_src = fid_src
        self.fid_tgt = fid_tgt
        self.verts = verts
        self.targets = targets
        self.gate2 = gate * gate
        self.lam = lam
        self.w_fid = w_fid
        self.w_surf = w_surf / max(len(targets), 1)
        self.quad_w = quad_w / quad_w.sum() if quad_w.sum() > 0 else quad_w
        self.tri = None  # (m, 3) vertex ids of each corresponding face
        self.bary = None
        self._used = None
        self._local = None
        self.k = base.k
        # quadrature points are fixed in the scaled space, so strain does not depend on s
        self._quad_D = kernel_matrix_gradients(quad_pts, base.centers, base.constants, base.radial_scale_m)
        c = base.constants
        self._mu = c.shear_modulus_Pa
        self._lame = c.lame_lambda_Pa

    def set_correspondences(self, faces: np.ndarray, tri: np.ndarray, bary: np.ndarray) -> None:
        self.faces = faces
        self.tri = tri
        self.bary = bary
        self._used, inv = np.unique(tri, return_inverse=True)
        self._local = inv.reshape(tri.shape)

    def field(self, x: np.ndarray) -> KelvinletField:
        return self.base.with_params(forces=x[:-1].reshape(-1, 3), global_scale=float(np.exp(x[-1])))

    def _psi(self, F):
        G = np.einsum("njpqm,jm->npq", self._quad_D, F)
        e = 0.5 * (G + np.swapaxes(G, -1, -2))
        tr = np.trace(e, axis1=-2, axis2=-1)
        psi = self._mu * np.sum(e * e, axis=(-2, -1)) + 0.5 * self._lame * tr * tr
        return psi, e, tr

    def objective(self, x: np.ndarray) -> float:
        fld = self.field(x)
        fid = np.sum((deform_point(fld, self.fid_src) - self.fid_tgt) ** 2)
        surf = 0.0
        if len(self.targets):
            phi = deform_point(fld, self.verts[self._used])
            y = np.einsum("mi,mic->mc", self.bary, phi[self._local])
            d2 = np.sum((y - self.targets) ** 2, axis=1)
            surf = np.sum(np.minimum(d2, self.gate2))
        reg = 0.0
        if self.lam > 0:
            psi, _, _ = self._psi(x[:-1].reshape(-1, 3))
            reg = np.sum(self.quad_w * psi * psi)
        return float(self.w_fid * fid + self.w_surf * surf + self.lam * reg)

    def _point_jacobian(self, fld: KelvinletField, pts: np.ndarray):
        xhat = fld.scaled(pts)
        K = kernel_matrices(xhat, fld.centers, fld.constants, fld.radial_scale_m)
        dx = xhat - fld.scale_center
        J = np.empty((len(pts), 3, 3 * self.k + 1))
        J[:, :, :-1] = K.transpose(0, 2, 1, 3).reshape(len(pts), 3, 3 * self.k)
        u = J[:, :, :-1] @ fld.forces.reshape(-1)
        # d phi / d log s = (I + du/dx) (x_hat - c)
        J[:, :, -1] = dx + displacement_derivative_along(fld, xhat, dx)
        return xhat + u, J

    def linearize(self, x: np.ndarray):
        """Stacked weighted residual vector and Jacobian (gated residuals dropped)."""
        fld = self.field(x)
        res, jac = [], []
        phi, J = self._point_jacobian(fld, self.fid_src)
        sw = np.sqrt(self.w_fid)
        res.append(sw * (phi - self.fid_tgt).reshape(-1))
        jac.append(sw * J.reshape(-1, J.shape[-1]))
        if len(self.targets):
            phi, J = self._point_jacobian(fld, self.verts[self._used])
            b, loc = self.bary, self._local
            y = b[:, 0:1] * phi[loc[:, 0]] + b[:, 1:2] * phi[loc[:, 1]] + b[:, 2:3] * phi[loc[:, 2]]
            Jy = b[:, 0, None, None] * J[loc[:, 0]]
            Jy += b[:, 1, None, None] * J[loc[:, 1]]
            Jy += b[:, 2, None, None] * J[loc[:, 2]]
            r = y - self.targets
            active = np.sum(r * r, axis=1) <= self.gate2
            sw = np.sqrt(self.w_surf)
            res.append(sw * r[active].reshape(-1))
            jac.append(sw * Jy[active].reshape(-1, Jy.shape[-1]))
        if self.lam > 0:
            F = x[:-1].reshape(-1, 3)
            psi, e, tr = self._psi(F)
            sigma = 2.0 * self._mu * e + self._lame * tr[:, None, None] * np.eye(3)
            dpsi = np.einsum("npq,njpqm->njm", sigma, self._quad_D).reshape(len(psi), -1)
            sw = np.sqrt(self.lam * self.quad_w)
            res.append(sw * psi)
            Jr = np.zeros((len(psi), 3 * self.k + 1))
            Jr[:, :-1] = sw[:, None] * dpsi
            jac.append(Jr)
        return np.concatenate(res), np.vstack(jac)


def _lm_inner(problem: _Problem, x: np.ndarray, e_cur: float, damping: float, max_iter: int, tol: float):
    for _ in range(max_iter):
        r, J = problem.linearize(x)
        JtJ = J.T @ J
        g = J.T @ r
        scale = max(float(np.mean(np.diag(JtJ))), 1e-300)
        accepted = False
        while not accepted and damping < 1e12:
            try:
                step = np.linalg.solve(JtJ + damping * scale * np.eye(len(x)), -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            alpha = 1.0
            for _h in range(MAX_HALVINGS + 1):
                trial = x + alpha * step
                e_new = problem.objective(trial)
                if not np.isfinite(e_new):
                    raise DivergenceError()
                if e_new < e_cur:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                damping = max(damping / 10.0, MIN_DAMPING)
            else:
                damping *= 10.0
                break
        if not accepted:
            break
        decrease = e_cur - e_new
        x, e_cur = trial, e_new
        if decrease < tol:
            break
    return x, e_cur, damping


def register(bundle: CaseBundle, config: PipelineConfig, fiducial_subset: Optional[Sequence[str]] = None) -> RegistrationResult:
    """Register the specimen mesh of ``bundle`` to its cavity capture using ``config.mode``."""
    labels = list(bundle.fiducial_labels if fiducial_subset is None else fiducial_subset)
    rigid = rigid_initialize(bundle, labels)
    mesh = bundle.specimen_mesh
    mode = config.mode

    if mode in ("rigid", "similarity"):
        if mode == "rigid":
            t = rigid
        else:
            t = fit_similarity(bundle.fids_specimen.subset(labels).positions, bundle.fids_cavity.subset(labels).positions)
        return RegistrationResult(
            mode=mode,
            rigid_init=rigid,
            transform=t,
            field=None,
            deformed_mesh=mesh.with_vertices(t.apply(mesh.vertices), frame="camera"),
            fiducial_residuals_mm=_fiducial_residuals(bundle, t.apply),
            converged=True,
            iterations_used=0,
        )

    target = build_target(bundle, mode)

    verts = rigid.apply(mesh.vertices)
    fid_src = rigid.apply(bundle.fids_specimen.subset(labels).positions)
    fid_tgt = bundle.fids_cavity.subset(labels).positions
    centers = control_points(verts, config.k_control_points, config.rng_seed)
    tpts = target.cloud.points
    targets = tpts[np.sort(farthest_point_sampling(tpts, config.max_surface_samples, config.rng_seed))]
    proximity = MeshProximity(mesh.faces)

    # lattice built in the specimen frame so the result is covariant with the target frame
    quad_pts, quad_w = quadrature_lattice(mesh.vertices, config.radial_scale_m)
    quad_pts = rigid.apply(quad_pts)
    base = KelvinletField(
        constants=ElasticConstants(config.young_modulus_Pa, config.poisson_ratio),
        radial_scale_m=config.radial_scale_m,
        centers=centers,
        forces=np.zeros_like(centers),
        global_scale=1.0,
        scale_center=fid_src.mean(axis=0),
    )
    problem = _Problem(
        base,
        fid_src,
        fid_tgt,
        verts,
        targets,
        gate=config.gate_distance_m,
        lam=config.strain_reg_weight_per_Pa2,
        quad_pts=quad_pts,
        quad_w=quad_w,
        w_fid=config.fiducial_weight,
        w_surf=config.surface_weight,
    )

    x = np.zeros(3 * len(centers) + 1)
    if config.scale_init == "similarity":
        x[-1] = np.log(fit_similarity(fid_src, fid_tgt).scale)
    trace = []
    damping = INITIAL_DAMPING
    converged = False
    it = 0
    e_prev = None
    hint = None
    for it in range(1, config.max_outer_iterations + 1):
        current = deform_point(problem.field(x), verts)
        hint, bary, _, _ = proximity.query(current, targets, hint)
        problem.set_correspondences(hint, mesh.faces[hint], bary)
        e_cur = problem.objective(x)
        if not np.isfinite(e_cur):
            raise DivergenceError()
        x, e_cur, damping = _lm_inner(problem, x, e_cur, damping, config.max_inner_iterations, config.tolerance_m2)
        trace.append(e_cur)
        log.debug("outer %d: objective %.6e", it, e_cur)
        if e_prev is not None and e_prev - e_cur < config.tolerance_m2:
            converged = True
            break
        e_prev = e_cur

    fld = problem.field(x)
    result = RegistrationResult(
        mode=mode,
        rigid_init=rigid,
        transform=None,
        field=fld,
        deformed_mesh=deform_mesh(fld, rigid, mesh),
        objective_trace=trace,
        converged=converged,
        iterations_used=it,
    )
    result.fiducial_residuals_mm = _fiducial_residuals(bundle, result.map_points)
    return result

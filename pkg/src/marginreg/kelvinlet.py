"""Regularized Kelvinlet displacement fields.

The displacement produced at offset ``r`` by a regularized point force ``f``
is

    u(r) = [(a - b)/r_e + a*eps^2/(2*r_e^3)] f + (b/r_e^3) (r . f) r,
    r_e  = sqrt(|r|^2 + eps^2),  a = 1/(4 pi mu),  b = a/(4(1 - nu)).

A field superposes k such kernels and is preceded by an isotropic scaling
about ``scale_center``. Every function accepts a single point or an
``(n, 3)`` array and returns results with a matching leading shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class ElasticConstants:
    young_modulus_Pa: float = 2100.0
    poisson_ratio: float = 0.45

    def __post_init__(self):
        if not self.young_modulus_Pa > 0:
            raise ValueError("Young's modulus must be positive")
        if not 0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson's ratio must lie in (0, 0.5)")

    @property
    def shear_modulus_Pa(self) -> float:
        return self.young_modulus_Pa / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lame_lambda_Pa(self) -> float:
        E, nu = self.young_modulus_Pa, self.poisson_ratio
        return E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def a(self) -> float:
        return 1.0 / (4.0 * math.pi * self.shear_modulus_Pa)

    @property
    def b(self) -> float:
        return self.a / (4.0 * (1.0 - self.poisson_ratio))


@dataclass(frozen=True, eq=False)
class KelvinletField:
    constants: ElasticConstants
    radial_scale_m: float
    centers: np.ndarray
    forces: np.ndarray
    global_scale: float = 1.0
    scale_center: np.ndarray = None

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.forces, dtype=np.float64).reshape(-1, 3)
        if len(c) < 1 or len(c) != len(f):
            raise ValueError("centers and forces must have equal nonzero length")
        if not self.radial_scale_m > 0:
            raise ValueError("radial scale must be positive")
        if not self.global_scale > 0:
            raise ValueError("global scale must be positive")
        sc = np.zeros(3) if self.scale_center is None else np.array(self.scale_center, dtype=np.float64).reshape(3)
        for arr in (c, f, sc):
            arr.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "forces", f)
        object.__setattr__(self, "scale_center", sc)
        object.__setattr__(self, "global_scale", float(self.global_scale))

    @property
    def k(self) -> int:
        return len(self.centers)

    def with_params(self, forces=None, global_scale=None) -> "KelvinletField":
        return replace(
            self,
            forces=self.forces if forces is None else forces,
            global_scale=self.global_scale if global_scale is None else global_scale,
        )

    def scaled(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.global_scale * (x - self.scale_center) + self.scale_center


def _coefficients(r2, eps, a, b):
    """A, B of K = A I + B r r^T and their derivatives with respect to r_e, divided by r_e."""
    re2 = r2 + eps * eps
    re = np.sqrt(re2)
    re3 = re2 * re
    A = (a - b) / re + a * eps * eps / (2.0 * re3)
    B = b / re3
    # dA/dr_e / r_e and dB/dr_e / r_e, so that dA/dr_k = dA_r * r_k
    dA_r = -(a - b) / re3 - 1.5 * a * eps * eps / (re3 * re2)
    dB_r = -3.0 * b / (re3 * re2)
    return A, B, dA_r, dB_r


def kernel_displacement(r, f, constants: ElasticConstants, eps: float) -> np.ndarray:
    """Displacement at offset ``r`` from a regularized point force ``f``."""
    r = np.asarray(r, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    A, B, _, _ = _coefficients(np.sum(r * r, axis=-1), eps, constants.a, constants.b)
    rf = np.sum(r * f, axis=-1)
    return A[..., None] * f + (B * rf)[..., None] * r


def kernel_matrices(x, centers, constants: ElasticConstants, eps: float) -> np.ndarray:
    """Kernel matrices K[i, j] (shape (n, k, 3, 3)) with u(x_i) = sum_j K[i, j] @ f_j."""
    R = np.asarray(x, dtype=np.float64).reshape(-1, 1, 3) - np.asarray(centers).reshape(1, -1, 3)
    A, B, _, _ = _coefficients(np.sum(R * R, axis=-1), eps, constants.a, constants.b)
    K = B[..., None, None] * (R[..., :, None] * R[..., None, :])
    K[..., 0, 0] += A
    K[..., 1, 1] += A
    K[..., 2, 2] += A
    return K


def kernel_matrix_gradients(x, centers, constants: ElasticConstants, eps: float) -> np.ndarray:
    """D[i, j, p, q, m] = d K[i, j][p, m] / d x_q, shape (n, k, 3, 3, 3)."""
    R = np.asarray(x, dtype=np.float64).reshape(-1, 1, 3) - np.asarray(centers).reshape(1, -1, 3)
    A, B, dA_r, dB_r = _coefficients(np.sum(R * R, axis=-1), eps, constants.a, constants.b)
    I = np.eye(3)
    # A'(r_q) delta_pm
    D = dA_r[..., None, None, None] * R[..., None, :, None] * I[None, None, :, None, :]
    # B' r_q r_p r_m
    D = D + dB_r[..., None, None, None] * R[..., :, None, None] * R[..., None, :, None] * R[..., None, None, :]
    # B (delta_pq r_m + r_p delta_qm)
    D = D + B[..., None, None, None] * (
        I[None, None, :, :, None] * R[..., None, None, :] + R[..., :, None, None] * I[None, None, None, :, :]
    )
    return D


def displacement_at(field: KelvinletField, xhat) -> np.ndarray:
    """Elastic displacement evaluated directly at already-scaled locations."""
    xhat = np.asarray(xhat, dtype=np.float64)
    R = xhat.reshape(-1, 1, 3) - field.centers[None]
    A, B, _, _ = _coefficients(np.sum(R * R, axis=-1), field.radial_scale_m, field.constants.a, field.constants.b)
    rf = np.einsum("nkc,kc->nk", R, field.forces)
    u = A @ field.forces + np.einsum("nk,nkc->nc", B * rf, R)
    return u.reshape(xhat.shape)


def displacement_gradient_at(field: KelvinletField, xhat) -> np.ndarray:
    """du/dx (shape (..., 3, 3)) at already-scaled locations, excluding the scale factor."""
    xhat = np.asarray(xhat, dtype=np.float64)
    D = kernel_matrix_gradients(xhat.reshape(-1, 3), field.centers, field.constants, field.radial_scale_m)
    G = np.einsum("nkpqm,km->npq", D, field.forces)
    return G.reshape(xhat.shape[:-1] + (3, 3))


def displacement_derivative_along(field: KelvinletField, xhat, v) -> np.ndarray:
    """(du/dx) v at already-scaled locations, without forming the full gradient."""
    xhat = np.asarray(xhat, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    R = xhat[:, None, :] - field.centers[None]
    F = field.forces
    A, B, dA_r, dB_r = _coefficients(np.sum(R * R, axis=-1), field.radial_scale_m, field.constants.a, field.constants.b)
    rv = np.einsum("nkc,nc->nk", R, v)
    rf = np.einsum("nkc,kc->nk", R, F)
    vf = v @ F.T
    out = (dA_r * rv) @ F
    out += np.einsum("nk,nkc->nc", dB_r * rv * rf + B * vf, R)
    out += np.sum(B * rf, axis=1)[:, None] * v
    return out


def field_displacement(field: KelvinletField, x) -> np.ndarray:
    """Superposed elastic displacement u(x) over all control points."""
    return displacement_at(field, x)


def deform_point(field: KelvinletField, x) -> np.ndarray:
    """Scale about ``scale_center``, then add the elastic displacement at the scaled location."""
    xhat = field.scaled(x)
    return xhat + displacement_at(field, xhat)


def field_jacobian(field: KelvinletField, x) -> np.ndarray:
    """Spatial Jacobian of :func:`deform_point`: s * (I + du/dx at the scaled location)."""
    xhat = field.scaled(x)
    G = displacement_gradient_at(field, xhat)
    return field.global_scale * (np.eye(3) + G)


def strain_energy_density(constants: ElasticConstants, grad_u) -> np.ndarray:
    """Linear-elastic energy density mu*(e:e) + lambda/2*tr(e)^2 for displacement gradients."""
    G = np.asarray(grad_u, dtype=np.float64)
    e = 0.5 * (G + np.swapaxes(G, -1, -2))
    tr = np.trace(e, axis1=-2, axis2=-1)
    return constants.shear_modulus_Pa * np.sum(e * e, axis=(-2, -1)) + 0.5 * constants.lame_lambda_Pa * tr * tr


def strain_energy(field: KelvinletField, quadrature_points, weights) -> float:
    """Weighted mean of the squared strain-energy density (Pa^2).

    Only the elastic displacement contributes; the global scale is rigid-like
    and carries no strain energy here. Weights are normalised by their sum so
    the result does not depend on the specimen volume.
    """
    q = np.asarray(quadrature_points, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(q) != len(w):
        raise ValueError("quadrature points and weights differ in length")
    if len(q) == 0 or w.sum() <= 0:
        return 0.0
    psi = strain_energy_density(field.constants, displacement_gradient_at(field, q))
    return float(np.sum(w * psi * psi) / np.sum(w))


def unregularized_kelvin(r, f, constants: ElasticConstants) -> np.ndarray:
    """Singular Kelvin solution ((a-b)/r) f + (b/r^3)(r.f) r; far-field reference."""
    r = np.asarray(r, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    n = np.linalg.norm(r)
    return (constants.a - constants.b) / n * f + constants.b / n ** 3 * np.dot(r, f) * r

"""Closed-form point-pair registration (Kabsch / Umeyama) and fiducial error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, SimilarityTransform, Transform


class DegenerateFiducialsError(ValueError):
    def __init__(self, msg: str = "degenerate fiducial configuration"):
        super().__init__(msg)


def _check_pairs(source, target) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("source and target must have the same number of points")
    if len(src) < 3:
        raise DegenerateFiducialsError("degenerate fiducial configuration: need at least 3 pairs")
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateFiducialsError()
    return src, tgt


def _kabsch(src: np.ndarray, tgt: np.ndarray):
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    xs = src - mu_s
    xt = tgt - mu_t
    H = xt.T @ xs / len(src)  # target-by-source cross-covariance
    U, S, Vt = np.linalg.svd(H)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    return R, S, d, mu_s, mu_t, xs


def fit_rigid(source, target) -> RigidTransform:
    """Least-squares rotation and translation taking ``source`` onto ``target``."""
    src, tgt = _check_pairs(source, target)
    R, _, _, mu_s, mu_t, _ = _kabsch(src, tgt)
    return RigidTransform(R, mu_t - R @ mu_s)


def fit_similarity(source, target) -> SimilarityTransform:
    """Least-squares isotropic scale, rotation and translation (Umeyama 1991)."""
    src, tgt = _check_pairs(source, target)
    R, S, d, mu_s, mu_t, xs = _kabsch(src, tgt)
    var_s = np.mean(np.sum(xs ** 2, axis=1))
    s = float(np.sum(S * d) / var_s)
    if not s > 0:
        raise DegenerateFiducialsError()
    return SimilarityTransform(s, R, mu_t - s * (R @ mu_s))


@dataclass(frozen=True)
class FiducialErrors:
    errors_mm: np.ndarray
    mean_mm: float
    std_mm: float


def fiducial_errors(t: Transform, source, target) -> FiducialErrors:
    """Per-pair distances after applying ``t``, in millimetres, with mean and sample std."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    e = np.linalg.norm(t.apply(src) - tgt, axis=1) * 1000.0
    std = float(np.std(e, ddof=1)) if len(e) > 1 else float("nan")
    return FiducialErrors(e, float(np.mean(e)), std)

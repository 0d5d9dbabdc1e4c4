"""Leave-one-out TRE evaluation, paired t-tests and the published reference tables."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import betainc

from .config import MODES, PipelineConfig
from .dataset_io import CaseBundle
from .deformable import register

log = logging.getLogger(__name__)


@dataclass
class LooReport:
    case_id: str
    method: str
    per_fold: list  # (held-out label, TRE in mm or nan when the fold failed)
    failures: dict = field(default_factory=dict)

    @property
    def tres(self) -> np.ndarray:
        return np.array([t for _, t in self.per_fold if math.isfinite(t)])

    @property
    def n_folds(self) -> int:
        return len(self.tres)

    @property
    def mean_tre_mm(self) -> float:
        t = self.tres
        return float(np.mean(t)) if len(t) else float("nan")

    @property
    def std_tre_mm(self) -> float:
        t = self.tres
        return float(np.std(t, ddof=1)) if len(t) > 1 else float("nan")

    def to_dict(self) -> dict:
        return {
            "case": self.case_id,
            "method": self.method,
            "mean_tre_mm": self.mean_tre_mm,
            "std_tre_mm": self.std_tre_mm,
            "n_folds": self.n_folds,
            "per_fold": [{"held_out": l, "tre_mm": t} for l, t in self.per_fold],
            "failures": dict(self.failures),
        }


def thread_count() -> int:
    """Worker count from MARGINREG_THREADS (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("MARGINREG_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _fold(bundle: CaseBundle, config: PipelineConfig, method: str, held_out: str):
    subset = [l for l in bundle.fiducial_labels if l != held_out]
    try:
        res = register(bundle, config.with_mode(method), subset)
    except Exception as exc:  # a failed fold is recorded, not fatal
        log.warning("%s/%s fold %s failed: %s", bundle.case_id, method, held_out, exc)
        return float("nan"), str(exc)
    return res.fiducial_residuals_mm[held_out], None


def run_loo(bundle: CaseBundle, config: PipelineConfig, methods: Sequence[str], threads: Optional[int] = None) -> list[LooReport]:
    """Hold out each fiducial in turn, register on the rest, measure TRE at the held-out one."""
    if not methods:
        raise ValueError("no methods given")
    for m in methods:
        if m not in MODES:
            raise ValueError(f"unknown method {m!r}")
    labels = bundle.fiducial_labels
    if len(labels) < 4:
        raise ValueError("leave-one-out needs at least 4 fiducials")
    jobs = [(m, l) for m in methods for l in labels]
    n = threads or thread_count()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(lambda j: _fold(bundle, config, *j), jobs))
    else:
        results = [_fold(bundle, config, *j) for j in jobs]
    reports = []
    for m in methods:
        rows = [(l, r) for (jm, l), r in zip(jobs, results) if jm == m]
        reports.append(
            LooReport(
                case_id=bundle.case_id,
                method=m,
                per_fold=[(l, float(t)) for l, (t, _) in rows],
                failures={l: err for l, (_, err) in rows if err is not None},
            )
        )
    return reports


# ---------------------------------------------------------------- statistics

@dataclass(frozen=True)
class PairedTTestResult:
    method_a: str
    method_b: str
    n: int
    t_statistic: float
    p_value: float
    zero_variance: bool = False

    @property
    def significant(self) -> bool:
        return self.p_value <= 0.05


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided Student-t tail probability via the regularized incomplete beta function."""
    if math.isinf(t):
        return 0.0
    return float(min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t * t)))))


def paired_ttest(a: Sequence[float], b: Sequence[float], method_a: str = "a", method_b: str = "b") -> PairedTTestResult:
    """Two-sided paired t-test of ``a`` against ``b`` with n-1 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTTestResult(method_a, method_b, n, 0.0, 1.0, zero_variance=True)
        return PairedTTestResult(method_a, method_b, n, math.copysign(math.inf, mean), 0.0, zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    return PairedTTestResult(method_a, method_b, n, t, t_two_sided_p(t, n - 1))


def pairwise_ttests(reports: Iterable[LooReport], per_fold: bool = False) -> list[PairedTTestResult]:
    """Paired t-tests between every pair of methods.

    By default the samples are per-case mean TREs; with ``per_fold`` the
    individual fold TREs are paired instead.
    """
    by_method: dict = {}
    for r in reports:
        by_method.setdefault(r.method, {})[r.case_id] = r
    methods = list(by_method)
    out = []
    for ma, mb in combinations(methods, 2):
        cases = [c for c in by_method[ma] if c in by_method[mb]]
        xa, xb = [], []
        for c in cases:
            ra, rb = by_method[ma][c], by_method[mb][c]
            if per_fold:
                fa, fb = dict(ra.per_fold), dict(rb.per_fold)
                for l in fa:
                    if l in fb and math.isfinite(fa[l]) and math.isfinite(fb[l]):
                        xa.append(fa[l])
                        xb.append(fb[l])
            elif math.isfinite(ra.mean_tre_mm) and math.isfinite(rb.mean_tre_mm):
                xa.append(ra.mean_tre_mm)
                xb.append(rb.mean_tre_mm)
        if len(xa) >= 2:
            out.append(paired_ttest(xa, xb, ma, mb))
    return out


# ---------------------------------------------------------------- reference data

def load_reference_tables() -> dict:
    """Published TRE tables: ``{"table1": {row: {col: (mean, std)}}, "table2": {row: {col: value}}}``."""
    text = resources.files("marginreg").joinpath("data/reference_tables.csv").read_text()
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    out = {"table1": {}, "table2": {}}
    for r in csv.DictReader(io.StringIO("\n".join(lines))):
        val = float(r["value"])
        if r["table"] == "table1":
            out["table1"].setdefault(r["row"], {})[r["column"]] = (val, float(r["std"]))
        else:
            out["table2"].setdefault(r["row"], {})[r["column"]] = val
    return out


@dataclass(frozen=True)
class ReferenceSummary:
    mean_verbal_mm: float
    mean_ar_mm: float
    mean_relocation_improvement_pct: float
    max_tongue_improvement_pct: float
    max_tongue_case: str
    method_means_mm: dict
    ttests: tuple

    def lines(self) -> list[str]:
        out = [
            f"mean verbal relocation error: {self.mean_verbal_mm:.1f} mm",
            f"mean AR relocation error: {self.mean_ar_mm:.1f} mm",
            f"mean per-case relocation improvement: {self.mean_relocation_improvement_pct:.1f}%",
            f"max tongue TRE improvement (proposed vs prior): {self.max_tongue_improvement_pct:.0f}% "
            f"({self.max_tongue_case}, {self.max_tongue_improvement_pct:.1f}%)",
        ]
        for m, v in self.method_means_mm.items():
            out.append(f"table1 mean TRE {m}: {v:.2f} mm")
        for t in self.ttests:
            out.append(
                f"paired t-test {t.method_a} vs {t.method_b}: t={t.t_statistic:.3f} p={t.p_value:.4f}"
                + (" *" if t.significant else "")
            )
        return out


def summarize_reference_tables() -> ReferenceSummary:
    """Recompute the headline numbers from the embedded tables.

    Relocation improvement is the mean of per-case relative improvements,
    not the ratio of the means.
    """
    tabs = load_reference_tables()
    t2 = tabs["table2"]
    verbal = np.array([v["verbal"] for v in t2.values()])
    ar = np.array([v["ar"] for v in t2.values()])
    improvement = float(np.mean(1.0 - ar / verbal) * 100.0)

    t1 = tabs["table1"]
    tongue = {c: (1.0 - v["proposed"][0] / v["prior"][0]) * 100.0 for c, v in t1.items() if c.startswith("Tongue")}
    best = max(tongue, key=tongue.get)
    methods = ("rigid", "similarity", "prior", "proposed")
    means = {m: float(np.mean([v[m][0] for v in t1.values()])) for m in methods}
    tests = tuple(
        paired_ttest([v[ma][0] for v in t1.values()], [v[mb][0] for v in t1.values()], ma, mb)
        for ma, mb in combinations(methods, 2)
    )
    return ReferenceSummary(
        mean_verbal_mm=float(verbal.mean()),
        mean_ar_mm=float(ar.mean()),
        mean_relocation_improvement_pct=improvement,
        max_tongue_improvement_pct=tongue[best],
        max_tongue_case=best,
        method_means_mm=means,
        ttests=tests,
    )

"""Command-line entry point: phantom, register, evaluate, stats, overlay."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .config import MODES, ConfigError, PipelineConfig
from .dataset_io import DataError, load_case, load_mesh, read_report, save_mesh, write_report
from .deformable import DivergenceError, InsufficientFiducialsError, register
from .evaluation import pairwise_ttests, run_loo, summarize_reference_tables
from .geometry import GeometryError
from .overlay import compose_marker_frame, export_overlay
from .phantom import SHAPES, WARPS, PhantomError, PhantomSpec, generate_case
from .rigid import DegenerateFiducialsError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_DEFAULTS = PipelineConfig()

# flag name -> PipelineConfig field
_CONFIG_FLAGS = {
    "k": "k_control_points",
    "epsilon_m": "radial_scale_m",
    "lambda_reg": "strain_reg_weight_per_Pa2",
    "poisson": "poisson_ratio",
    "young_pa": "young_modulus_Pa",
    "outer_iterations": "max_outer_iterations",
    "inner_iterations": "max_inner_iterations",
    "tolerance": "tolerance_m2",
    "gate_m": "gate_distance_m",
    "max_samples": "max_surface_samples",
    "scale_init": "scale_init",
    "seed": "rng_seed",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("registration parameters")
    g.add_argument("--config", type=Path, help="JSON file with PipelineConfig fields; flags override it")
    g.add_argument("--k", type=int, default=_DEFAULTS.k_control_points, help="number of Kelvinlet control points")
    g.add_argument("--epsilon-m", type=float, default=_DEFAULTS.radial_scale_m, help="Kelvinlet radial scale (m)")
    g.add_argument("--lambda-reg", type=float, default=_DEFAULTS.strain_reg_weight_per_Pa2,
                   help="strain-energy regularization weight (1/Pa^2)")
    g.add_argument("--poisson", type=float, default=_DEFAULTS.poisson_ratio, help="Poisson's ratio")
    g.add_argument("--young-pa", type=float, default=_DEFAULTS.young_modulus_Pa, help="Young's modulus (Pa)")
    g.add_argument("--outer-iterations", type=int, default=_DEFAULTS.max_outer_iterations, help="correspondence updates")
    g.add_argument("--inner-iterations", type=int, default=_DEFAULTS.max_inner_iterations, help="solver steps per update")
    g.add_argument("--tolerance", type=float, default=_DEFAULTS.tolerance_m2, help="objective decrease tolerance (m^2)")
    g.add_argument("--gate-m", type=float, default=_DEFAULTS.gate_distance_m, help="correspondence gate distance (m)")
    g.add_argument("--max-samples", type=int, default=_DEFAULTS.max_surface_samples, help="target points used per fit")
    g.add_argument("--scale-init", choices=("unit", "similarity"), default=_DEFAULTS.scale_init,
                   help="starting value of the global scale")
    g.add_argument("--seed", type=int, default=_DEFAULTS.rng_seed, help="seed for control-point sampling")


def _resolve_config(args, argv: list, mode: str | None = None) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    given = {a.split("=")[0] for a in argv if a.startswith("--")}
    changes = {}
    for flag, name in _CONFIG_FLAGS.items():
        # explicit flags win; otherwise a config file value is kept
        if "--" + flag.replace("_", "-") in given or not args.config:
            changes[name] = getattr(args, flag)
    if mode is not None:
        changes["mode"] = mode
    return replace(cfg, **changes)


def _print_resolved(obj: dict) -> None:
    print("resolved config: " + json.dumps(obj, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="marginreg", description="Specimen-to-cavity margin relocation.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="generate a synthetic case", formatter_class=fmt)
    ph.add_argument("--shape", choices=SHAPES, default="thick-wedge")
    ph.add_argument("--shrink", type=float, default=0.85, help="true isotropic scale of the excised specimen")
    ph.add_argument("--noise-mm", type=float, default=0.5, help="cloud noise sigma (mm)")
    ph.add_argument("--warp-mm", type=float, default=5.0, help="peak elastic warp (mm)")
    ph.add_argument("--warp", choices=WARPS, default="kelvinlet")
    ph.add_argument("--no-capture-motion", action="store_true", help="keep surface and cavity captures aligned")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", type=Path, required=True)

    rg = sub.add_parser("register", help="register one case", formatter_class=fmt)
    rg.add_argument("--case", type=Path, required=True)
    rg.add_argument("--mode", choices=MODES, default=_DEFAULTS.mode)
    rg.add_argument("--out", type=Path, required=True)
    _add_config_flags(rg)

    ev = sub.add_parser("evaluate", help="leave-one-out TRE over cases", formatter_class=fmt)
    ev.add_argument("--case", type=Path, nargs="+", required=True)
    ev.add_argument("--methods", default=",".join(MODES), help="comma-separated modes")
    ev.add_argument("--out", type=Path, required=True, help="report CSV")
    ev.add_argument("--json", type=Path, help="also write per-fold results as JSON")
    ev.add_argument("--per-fold", action="store_true", help="pair t-tests by fold instead of by case")
    _add_config_flags(ev)

    st = sub.add_parser("stats", help="summary statistics", formatter_class=fmt)
    g = st.add_mutually_exclusive_group(required=True)
    g.add_argument("--reference-tables", action="store_true", help="recompute the published headline numbers")
    g.add_argument("--report", type=Path, help="report CSV written by evaluate")

    ov = sub.add_parser("overlay", help="export the deformed mesh in the marker frame", formatter_class=fmt)
    ov.add_argument("--case", type=Path, required=True)
    ov.add_argument("--deformed", type=Path, required=True)
    ov.add_argument("--out", type=Path, required=True)
    return p


def _cmd_phantom(args, argv) -> int:
    try:
        spec = PhantomSpec(
            shape=args.shape,
            true_scale=args.shrink,
            cloud_noise_sigma_m=args.noise_mm / 1000.0,
            peak_warp_m=args.warp_mm / 1000.0,
            warp=args.warp,
            capture_motion=not args.no_capture_motion,
            rng_seed=args.seed,
        )
    except PhantomError as exc:
        raise UsageError(str(exc)) from exc
    _print_resolved(asdict(spec))
    generate_case(spec, args.out)
    print(f"wrote phantom case to {args.out}")
    return EXIT_OK


def _cmd_register(args, argv) -> int:
    cfg = _resolve_config(args, argv, args.mode)
    _print_resolved(cfg.to_dict())
    bundle = load_case(args.case)
    res = register(bundle, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_mesh(res.deformed_mesh, args.out / "deformed.ply")
    with open(args.out / "residuals.json", "w", newline="\n") as fh:
        body = {"mode": cfg.mode, "fiducial_residuals_mm": res.fiducial_residuals_mm,
                "converged": res.converged, "iterations_used": res.iterations_used}
        fh.write(json.dumps(body, indent=2, sort_keys=True) + "\n")
    with open(args.out / "objective_trace.csv", "w", newline="\n") as fh:
        fh.write("iteration,objective\n")
        for i, e in enumerate(res.objective_trace, 1):
            fh.write(f"{i},{e:.12e}\n")
    for label, r in res.fiducial_residuals_mm.items():
        print(f"{label}: {r:.3f} mm")
    return EXIT_OK


def _cmd_evaluate(args, argv) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in MODES]
    if not methods or bad:
        raise UsageError(f"unknown method(s): {', '.join(bad) or '(none)'}")
    cfg = _resolve_config(args, argv)
    _print_resolved({**cfg.to_dict(), "methods": methods})
    reports = []
    for case in args.case:
        reports.extend(run_loo(load_case(case), cfg, methods))
    write_report(reports, args.out)
    if args.json:
        with open(args.json, "w", newline="\n") as fh:
            fh.write(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    for r in reports:
        print(f"{r.case_id} {r.method}: {r.mean_tre_mm:.2f} +/- {r.std_tre_mm:.2f} mm ({r.n_folds} folds)")
    for t in pairwise_ttests(reports, per_fold=args.per_fold):
        print(f"paired t-test {t.method_a} vs {t.method_b}: t={t.t_statistic:.3f} p={t.p_value:.4f}"
              + (" *" if t.significant else ""))
    return EXIT_OK


def _cmd_stats(args, argv) -> int:
    if args.reference_tables:
        _print_resolved({"source": "embedded reference tables"})
        for line in summarize_reference_tables().lines():
            print(line)
        return EXIT_OK
    _print_resolved({"source": str(args.report)})
    rows = read_report(args.report)
    reports = [SimpleNamespace(case_id=r["case"], method=r["method"], mean_tre_mm=r["mean_tre_mm"]) for r in rows]
    by_method: dict = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r["mean_tre_mm"])
    for m, v in by_method.items():
        print(f"{m}: mean TRE {np.mean(v):.2f} mm over {len(v)} case(s)")
    for t in pairwise_ttests(reports):
        print(f"paired t-test {t.method_a} vs {t.method_b}: t={t.t_statistic:.3f} p={t.p_value:.4f}"
              + (" *" if t.significant else ""))
    return EXIT_OK


def _cmd_overlay(args, argv) -> int:
    _print_resolved({"case": str(args.case), "deformed": str(args.deformed), "out": str(args.out)})
    bundle = load_case(args.case)
    mesh = compose_marker_frame(bundle, load_mesh(args.deformed))
    meta = export_overlay(mesh, args.out)
    print(f"wrote {args.out} and {meta}")
    return EXIT_OK


_COMMANDS = {
    "phantom": _cmd_phantom,
    "register": _cmd_register,
    "evaluate": _cmd_evaluate,
    "stats": _cmd_stats,
    "overlay": _cmd_overlay,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"marginreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"marginreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GeometryError, DegenerateFiducialsError, InsufficientFiducialsError, OSError, ValueError) as exc:
        print(f"marginreg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())


def main_entry() -> None:
    sys.exit(main())

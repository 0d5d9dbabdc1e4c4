import csv
import json
import subprocess
import sys

import pytest

from marginreg.cli import main


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "c1"
    assert main(["phantom", "--shape", "thick-wedge", "--shrink", "0.85", "--seed", "7", "--out", str(d)]) == 0
    return d


def test_phantom_creates_case(case_dir):
    for n in ("specimen.ply", "surface.ply", "cavity.ply", "fiducials.json", "poses.json", "manifest.json"):
        assert (case_dir / n).is_file()


def test_phantom_bad_shrink(tmp_path, capsys):
    assert main(["phantom", "--shrink", "1.5", "--out", str(tmp_path / "x")]) == 1


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert main(["phantom", "--bogus", "--out", str(tmp_path)]) == 1
    assert main(["frobnicate"]) == 1


def test_phantom_same_seed_byte_identical(tmp_path, case_dir):
    out = tmp_path / "again"
    assert main(["phantom", "--shape", "thick-wedge", "--shrink", "0.85", "--seed", "7", "--out", str(out)]) == 0
    for p in case_dir.iterdir():
        assert (out / p.name).read_bytes() == p.read_bytes()


def test_register_writes_outputs_and_resolved_config(tmp_path, case_dir, capsys):
    out = tmp_path / "r"
    assert main(["register", "--case", str(case_dir), "--out", str(out)]) == 0
    err = capsys.readouterr().err
    assert "resolved config" in err and '"k_control_points": 45' in err
    res = json.loads((out / "residuals.json").read_text())
    assert set(res["fiducial_residuals_mm"]) == {"F1", "F2", "F3", "F4"}
    rows = list(csv.DictReader((out / "objective_trace.csv").open()))
    trace = [float(r["objective"]) for r in rows]
    assert len(trace) >= 1 and all(b <= a for a, b in zip(trace, trace[1:]))
    assert (out / "deformed.ply").is_file()


def test_register_rigid_on_identity_phantom(tmp_path, capsys):
    case = tmp_path / "id"
    assert main(["phantom", "--shrink", "1.0", "--noise-mm", "0", "--warp-mm", "0", "--no-capture-motion", "--out", str(case)]) == 0
    assert main(["register", "--case", str(case), "--mode", "rigid", "--out", str(tmp_path / "r")]) == 0
    res = json.loads((tmp_path / "r" / "residuals.json").read_text())
    assert max(res["fiducial_residuals_mm"].values()) < 1e-5


def test_register_config_file_and_override(tmp_path, case_dir, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k_control_points": 10, "strain_reg_weight_per_Pa2": 1e-9}))
    assert main(["register", "--case", str(case_dir), "--config", str(cfg), "--k", "12", "--out", str(tmp_path / "r")]) == 0
    err = capsys.readouterr().err
    assert '"k_control_points": 12' in err and '"strain_reg_weight_per_Pa2": 1e-09' in err


def test_register_missing_cavity(tmp_path, case_dir):
    bad = tmp_path / "bad"
    bad.mkdir()
    for p in case_dir.iterdir():
        if p.name != "cavity.ply":
            (bad / p.name).write_bytes(p.read_bytes())
    assert main(["register", "--case", str(bad), "--out", str(tmp_path / "r")]) == 2


def test_register_divergence_exit_code(tmp_path, case_dir, monkeypatch):
    import marginreg.cli as cli
    from marginreg.deformable import DivergenceError

    def boom(*a, **k):
        raise DivergenceError()

    monkeypatch.setattr(cli, "register", boom)
    assert main(["register", "--case", str(case_dir), "--out", str(tmp_path / "r")]) == 3


def test_evaluate_three_cases(tmp_path, capsys):
    cases = []
    for seed in (1, 2, 3):
        d = tmp_path / f"c{seed}"
        assert main(["phantom", "--seed", str(seed), "--out", str(d)]) == 0
        cases.append(str(d))
    report = tmp_path / "report.csv"
    js = tmp_path / "report.json"
    assert main(["evaluate", "--case", *cases, "--out", str(report), "--json", str(js)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "case,method,mean_tre_mm,std_tre_mm,n_folds" and len(lines) == 13
    data = json.loads(js.read_text())
    assert len(data) == 12
    rows = list(csv.DictReader(report.open()))
    for r, d in zip(rows, data):
        assert r["mean_tre_mm"] == f"{d['mean_tre_mm']:.1f}"
    assert main(["stats", "--report", str(report)]) == 0
    assert "paired t-test" in capsys.readouterr().out


def test_stats_reference_tables(capsys):
    assert main(["stats", "--reference-tables"]) == 0
    out = capsys.readouterr().out
    for needle in ("9.8 mm", "4.8 mm", "46.3%", "33%"):
        assert needle in out


def test_overlay(tmp_path, case_dir):
    out = tmp_path / "r"
    assert main(["register", "--case", str(case_dir), "--mode", "similarity", "--out", str(out)]) == 0
    assert main(["overlay", "--case", str(case_dir), "--deformed", str(out / "deformed.ply"), "--out", str(tmp_path / "overlay.ply")]) == 0
    assert (tmp_path / "overlay.meta.json").is_file()
    nopose = tmp_path / "nopose"
    nopose.mkdir()
    for p in case_dir.iterdir():
        if p.name != "poses.json":
            (nopose / p.name).write_bytes(p.read_bytes())
    assert main(["overlay", "--case", str(nopose), "--deformed", str(out / "deformed.ply"), "--out", str(tmp_path / "o2.ply")]) == 2


def test_help_documents_published_defaults():
    out = subprocess.run([sys.executable, "-m", "marginreg.cli", "register", "--help"], capture_output=True, text=True).stdout
    out = " ".join(out.split())
    for needle in ("(default: 45)", "(default: 0.01)", "(default: 1e-11)", "(default: 0.45)", "(default: 2100.0)"):
        assert needle in out

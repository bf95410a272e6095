import json

import pandas as pd
import pytest

from robanom.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


def _run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert _run("simulate", "--d", 20, "--n", 120, "--tau", 60, "--delta", 4, "--seed", 1,
                "--out", d / "panel.csv", "--truth", d / "truth.csv") == EXIT_OK
    assert _run("fit", "--panel", d / "panel.csv", "--subsets", 50, "--out-residuals", d / "res.csv",
                "--out-coeffs", d / "coef.csv") == EXIT_OK
    return d


def test_usage_errors(capsys):
    assert _run() == EXIT_USAGE
    assert _run("frobnicate") == EXIT_USAGE
    assert _run("simulate") == EXIT_USAGE
    assert _run("pipeline") == EXIT_USAGE
    assert _run("--version") == EXIT_OK


def test_data_errors(tmp_path):
    assert _run("fit", "--panel", tmp_path / "missing.csv", "--out-residuals", tmp_path / "r.csv") == EXIT_DATA
    (tmp_path / "bad.csv").write_text("series_id,2020-01-01,2020-01-03\na,1,2\n")
    assert _run("fit", "--panel", tmp_path / "bad.csv", "--out-residuals", tmp_path / "r.csv") == EXIT_DATA


def test_numerical_failure(sim, tmp_path):
    # an h-subset smaller than the design width fails every series
    assert _run("fit", "--panel", sim / "panel.csv", "--h-frac", 0.01, "--out-residuals", tmp_path / "r.csv") == EXIT_NUMERIC


def test_empty_series_is_data_error(tmp_path):
    cols = ",".join(str(pd.Timestamp("2020-01-01") + pd.Timedelta(days=k))[:10] for k in range(40))
    (tmp_path / "nan.csv").write_text(f"series_id,{cols}\na," + ",".join(["nan"] * 40) + "\n")
    assert _run("fit", "--panel", tmp_path / "nan.csv", "--out-residuals", tmp_path / "r.csv") == EXIT_DATA


def test_detect_flags_injected_outliers(sim):
    out = sim / "report.csv"
    assert _run("detect", "--residuals", sim / "res.csv", "--method", "com", "--out", out) == EXIT_OK
    rep = pd.read_csv(out)
    truth = pd.read_csv(sim / "truth.csv")
    assert len(rep) >= 1
    dates = pd.read_csv(sim / "panel.csv").date
    injected = {(s, dates[t]) for s, t in zip(truth.series_id.astype(str), truth.tau)}
    assert set(zip(rep.series_id.astype(str), rep.date)) & injected


def test_scatter_then_detect_with_sigma(sim):
    assert _run("scatter", "--method", "ogk", "--residuals", sim / "res.csv", "--out-sigma", sim / "sig.csv",
                "--diag", sim / "diag.json") == EXIT_OK
    assert json.loads((sim / "diag.json").read_text())["method"]
    assert _run("detect", "--residuals", sim / "res.csv", "--sigma", sim / "sig.csv", "--level", "both",
                "--out", sim / "both.csv") == EXIT_OK


def test_forecast_classify_cluster(sim):
    assert _run("forecast-detect", "--residuals", sim / "res.csv", "--subsets", 50, "--out", sim / "f.csv") == EXIT_OK
    assert _run("classify", "--report", sim / "f.csv", "--residuals", sim / "res.csv", "--panel", sim / "panel.csv",
                "--subsets", 50, "--out", sim / "cls.csv") == EXIT_OK
    cls = pd.read_csv(sim / "cls.csv")
    assert {"typology", "sign", "delta_hat"} <= set(cls.columns)
    assert _run("cluster", "--residuals", sim / "res.csv", "--coeffs", sim / "coef.csv", "--k", 3, "--restarts", 5,
                "--out", sim / "lab.csv", "--report", sim / "ov.csv", "--flags", sim / "cls.csv",
                "--elbow", sim / "elbow.csv", "--k-max", 4) == EXIT_OK
    assert pd.read_csv(sim / "lab.csv").cluster.between(1, 3).all()
    assert pd.read_csv(sim / "elbow.csv").wss.is_monotonic_decreasing


def test_realtime_roundtrip(sim):
    assert _run("realtime", "--init-panel", sim / "panel.csv", "--train", 100, "--subsets", 50,
                "--state-out", sim / "s.bin", "--out", sim / "rt.csv") == EXIT_OK
    assert pd.read_csv(sim / "rt.csv").columns.tolist() == ["series_id", "date", "score", "kappa"]
    assert _run("realtime", "--state-in", sim / "s.bin", "--observations", sim / "panel.csv",
                "--state-out", sim / "s2.bin") == EXIT_OK


def test_bench_profile(tmp_path):
    assert _run("bench", "--profile", "table1", "--reps", 1, "--d", 20, "--n", 120, "--methods", "COM,COMreg",
                "--out", tmp_path / "m.csv") == EXIT_OK
    m = pd.read_csv(tmp_path / "m.csv")
    assert set(m.method) == {"COM", "COMreg"} and set(m.delta) == {1.0, 1.5}


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[simulate]\nd = 7\nn = 90\nout = {tmp_path / 'p.csv'}\n")
    assert _run("--config", cfg, "simulate", "--seed", 2) == EXIT_OK
    assert pd.read_csv(tmp_path / "p.csv").shape == (90, 8)  # date column plus 7 series
    cfg.write_text("[simulate]\nbogus = 1\n")
    assert _run("--config", cfg, "simulate", "--out", tmp_path / "q.csv") == EXIT_USAGE


def _pipeline_ini(tmp_path):
    cfg = tmp_path / "pipe.ini"
    cfg.write_text(
        "[pipeline]\nseed = 5\n"
        "[simulate]\nd = 50\nn = 120\ntau = 60\ndelta = 4\n"
        "[fit]\nsubsets = 50\n"
        "[detect]\nmethod = com\n"
        "[cluster]\nk = 3\nrestarts = 5\n"
    )
    return cfg


def test_pipeline_smoke_cache_and_determinism(tmp_path):
    cfg = _pipeline_ini(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("pipeline", "--config", cfg, "--out-dir", a) == EXIT_OK
    man = json.loads((a / "manifest.json").read_text())
    assert all(s["status"] == "ok" and not s["skipped"] for s in man["stages"].values())
    assert len(pd.read_csv(a / "report.csv")) >= 1
    assert _run("pipeline", "--config", cfg, "--out-dir", a) == EXIT_OK
    again = json.loads((a / "manifest.json").read_text())
    assert all(s["skipped"] for s in again["stages"].values())
    assert _run("pipeline", "--config", cfg, "--out-dir", b) == EXIT_OK
    for name in ("panel.csv", "residuals.csv", "report.csv", "labels.csv", "overlap.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

"""Command-line front end: ``robanom <subcommand> ...``.

Every subcommand reads defaults from the matching ``[section]`` of an INI
file given with ``--config``; explicit flags win.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .bench import ALL_METHODS, McConfig, replicate, roc_curve, run_monte_carlo
from .clustering import FEATURE_NAMES, elbow_curve, extract_features, kmeans, overlap_report, standardize_columns
from .dgp import DgpParams, OutlierSpec, inject_outliers, simulate_dgp, write_truth
from .distance import OutlierReport, cellwise_scores, flag, flag_and_merge, parse_threshold
from .forecast import TrainingDivergence, forecast_scores, load_state, realtime_init, realtime_step, save_state
from .panel import Panel, PanelError, first_difference, load_panel, write_panel
from .scatter import DegenerateScaleError, estimate
from .trend import FitError, TrendCycleSpec, fit_panel
from .typology import TypologyConfig, annotate_report

logger = logging.getLogger("robanom")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Shared file formats


def _spec(v: int, c: int | None, periods: str | None) -> TrendCycleSpec:
    if periods:
        per = [float(p) for p in periods.split(",") if p.strip()]
        if c is not None and c != len(per):
            raise UsageError(f"--c {c} disagrees with {len(per)} periods")
    else:
        c = 2 if c is None else c
        if c > 2:
            raise UsageError("--c above 2 needs --periods")
        per = [7.0, 30.0][:c]
    return TrendCycleSpec(v, tuple(2 * math.pi / p for p in per))


def coefficient_names(spec: TrendCycleSpec) -> list[str]:
    names = [f"trend_{j}" for j in range(spec.trend_order + 1)]
    for lam in spec.frequencies:
        p = f"{2 * math.pi / lam:g}"
        names += [f"cos_{p}", f"sin_{p}"]
    return names


def write_coefficients(ids, coefs: np.ndarray, spec: TrendCycleSpec, path) -> None:
    frame = pd.DataFrame(coefs, columns=coefficient_names(spec))
    frame.insert(0, "series_id", list(ids))
    frame.to_csv(path, index=False, float_format="%.17g")


def read_coefficients(path) -> tuple[pd.DataFrame, TrendCycleSpec]:
    frame = pd.read_csv(path, dtype={"series_id": str}, float_precision="round_trip")
    cols = list(frame.columns[1:])
    order = sum(c.startswith("trend_") for c in cols) - 1
    periods = [float(c[4:]) for c in cols if c.startswith("cos_")]
    if order < 0 or 2 * len(periods) + order + 1 != len(cols):
        raise DataError(f"{path}: unrecognized coefficient columns")
    return frame.set_index("series_id"), TrendCycleSpec(order, tuple(2 * math.pi / p for p in periods))


def write_sigma(ids, sigma: np.ndarray, path, full: bool | None = None) -> None:
    ids = list(ids)
    if full is None:
        full = len(ids) <= 2000
    if full:
        pd.DataFrame(sigma, index=ids, columns=ids).rename_axis("series_id").to_csv(path, float_format="%.17g")
    else:
        pd.DataFrame({"series_id": ids, "variance": np.diag(sigma)}).to_csv(path, index=False, float_format="%.17g")


def read_variances(path, ids) -> np.ndarray:
    frame = pd.read_csv(path, dtype={"series_id": str}, float_precision="round_trip").set_index("series_id")
    if list(frame.columns) == ["variance"]:
        var = frame["variance"]
    else:
        var = pd.Series(np.diag(frame.to_numpy(dtype=float)), index=frame.index)
    missing = set(ids) - set(var.index)
    if missing:
        raise DataError(f"{path}: no variance for {sorted(missing)[:5]}")
    return var.loc[list(ids)].to_numpy(dtype=float)


def _load(path, layout="raw") -> Panel:
    p = load_panel(path)
    return p.with_values(p.values, layout) if layout != "raw" else p


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(a) -> None:
    kind = {"ao": "AO", "lso": "LSO", "decay": "decaying"}[a.kind]
    omega = tuple(float(w) for w in a.omega.split(",")) if kind == "decaying" else ()
    clean = simulate_dgp(DgpParams(slope_scale=a.slope_scale), a.d, a.n, a.seed)
    Y, truth = inject_outliers(clean, [OutlierSpec(kind, a.tau, a.delta, omega)], a.fraction)
    write_panel(Y, a.out)
    if a.truth:
        write_truth(truth, Y.series_ids, a.truth)
    logger.info("simulated %d x %d panel, %d outliers", Y.d, Y.n, len(truth))


def cmd_fit(a) -> None:
    panel = _load(a.panel)
    spec = _spec(a.v, a.c, a.periods)
    pf = fit_panel(panel, spec, a.h_frac, a.subsets, a.seed, a.csteps, a.threads)
    if len(pf.failures) == panel.d:
        raise FitError("every series failed the trimmed fit")
    write_panel(pf.residuals, a.out_residuals)
    if a.out_coeffs:
        write_coefficients(panel.series_ids, pf.coefficient_matrix(), spec, a.out_coeffs)


def cmd_scatter(a) -> None:
    R = _load(a.residuals, "residual")
    est = estimate(R.values.T, a.method)
    write_sigma(R.series_ids, est.sigma, a.out_sigma, True if a.full else None)
    if a.diag:
        diag = {"method": est.method, "scales": est.scales.tolist()}
        for k, v in est.diagnostics.items():
            diag[k] = v.tolist() if isinstance(v, np.ndarray) else v
        Path(a.diag).write_text(json.dumps(diag, indent=1, default=float))


def _panel_scores(R: Panel, method: str, sigma_path: str | None):
    if sigma_path:
        return cellwise_scores(R, read_variances(sigma_path, R.series_ids))
    est = estimate(R.values.T, method)
    center = method.lower() == "feau"
    return cellwise_scores(R, np.diag(est.sigma), location=est.location if center else None)


def cmd_detect(a) -> None:
    R = _load(a.residuals, "residual")
    rule = parse_threshold(a.threshold)
    pieces = {}
    if a.level in ("raw", "both"):
        sc = _panel_scores(R, a.method, a.sigma)
        pieces["raw"] = (sc, rule(sc).kappa)
    if a.level in ("differenced", "both"):
        sc = _panel_scores(first_difference(R), a.method, None)
        pieces["differenced"] = (sc, rule(sc).kappa)
    method = a.method.upper()
    if a.level == "both":
        report = flag_and_merge(pieces["raw"], pieces["differenced"], method)
    else:
        report = flag(*pieces[a.level], method=method)
    report.to_csv(a.out)
    logger.info("%d flags", len(report))


def cmd_forecast_detect(a) -> None:
    R = _load(a.residuals, "residual")
    kw = {}
    if a.model == "nhar":
        kw = dict(epochs=a.epochs, trim=a.trim, width=a.width, train_sample=a.train_sample)
    scores, _ = forecast_scores(R, a.model, seed=a.seed, n_subsets=a.subsets, **kw)
    kappa = parse_threshold(a.threshold)(scores).kappa
    report = flag(scores, kappa, {"har": "RobHAR", "ar1": "RobAR1", "nhar": "RobNHAR"}[a.model])
    report.to_csv(a.out)
    logger.info("%d flags", len(report))


def cmd_classify(a) -> None:
    report = OutlierReport.read_csv(a.report)
    R = _load(a.residuals, "residual")
    raw = _load(a.panel) if a.panel else None
    spec = _spec(a.v, a.c, a.periods) if raw is not None else None
    cfg = TypologyConfig(a.window, a.multiplier, a.min_side)
    annotate_report(report, R, raw, spec, cfg, a.subsets, a.seed).to_csv(a.out)


def cmd_cluster(a) -> None:
    R = _load(a.residuals, "residual")
    coefs, spec = read_coefficients(a.coeffs)
    missing = set(R.series_ids) - set(coefs.index)
    if missing:
        raise DataError(f"no coefficients for {sorted(missing)[:5]}")
    C = coefs.loc[list(R.series_ids)].to_numpy(dtype=float)
    F = np.vstack([extract_features(R.values[i], C[i], spec) for i in range(R.d)])
    Z = standardize_columns(F)
    model = kmeans(Z, a.k, a.restarts, a.seed)
    pd.DataFrame({"series_id": R.series_ids, "cluster": model.labels + 1}).to_csv(a.out, index=False)
    if a.features:
        pd.DataFrame(F, index=list(R.series_ids), columns=FEATURE_NAMES).rename_axis("series_id").to_csv(
            a.features, float_format="%.17g")
    if a.report:
        flags = OutlierReport.read_csv(a.flags) if a.flags else OutlierReport([])
        overlap_report(model, flags, R.series_ids, Z).to_csv(a.report, index=False, float_format="%.17g")
    if a.elbow:
        wss, _ = elbow_curve(Z, a.k_max, a.restarts, a.seed)
        pd.DataFrame({"k": np.arange(1, wss.size + 1), "wss": wss}).to_csv(a.elbow, index=False, float_format="%.17g")


PROFILES = {
    "table1": dict(kind="AO", deltas=(1.0, 1.5)),
    "table2": dict(kind="LSO", deltas=(1.0, 1.5)),
    "roc": dict(kind="AO", deltas=(1.5,)),
}


def cmd_bench(a) -> None:
    reps = 500 if a.full else a.reps
    methods = tuple(a.methods.split(",")) if a.methods else ALL_METHODS
    prof = PROFILES[a.profile]
    cfg = McConfig(d=a.d, n=a.n, replications=reps, methods=methods, seed=a.seed, n_jobs=a.threads,
                   thresholds=tuple(a.thresholds.split(";")), **prof)
    if a.profile == "roc":
        rows = []
        for rep, s in enumerate(np.random.SeedSequence([a.seed, 0]).spawn(reps)):
            scores, truth, level = replicate(cfg, prof["deltas"][0], s)
            for m, sc in scores.items():
                roc = roc_curve(sc, truth, level)
                rows.append(pd.DataFrame({"method": m, "rep": rep, "k": roc.k, "fpr": roc.fpr, "tpr": roc.tpr}))
        pd.concat(rows).to_csv(a.out, index=False, float_format="%.17g")
        return
    table = run_monte_carlo(cfg)
    table.to_csv(a.out)
    if table.failures:
        logger.warning("%d replications failed", table.failures)


def cmd_realtime(a) -> None:
    if a.init_panel:
        Y = _load(a.init_panel)
        T = a.train or Y.n
        state, _ = realtime_init(Y, T, _spec(a.v, a.c, a.periods), a.model, a.k, a.seed, a.subsets)
        if a.state_out is None:
            raise UsageError("--init-panel needs --state-out")
        save_state(state, a.state_out)
        if T >= Y.n:
            return
        obs = Y.window(T, Y.n)
    else:
        if not (a.state_in and a.observations):
            raise UsageError("give --state-in and --observations, or --init-panel")
        state = load_state(a.state_in)
        obs = _load(a.observations)
    pos = {s: i for i, s in enumerate(obs.series_ids)}
    missing = [s for s in state.series_ids if s not in pos]
    if missing:
        raise DataError(f"observations lack series {missing[:5]}")
    order = [pos[s] for s in state.series_ids]
    rows = []
    for t in range(obs.n):
        flags, z, state = realtime_step(state, obs.values[order, t])
        for i in np.nonzero(flags)[0]:
            rows.append((state.series_ids[i], str(obs.dates[t]), float(z[i]), state.kappa))
    if a.state_out:
        save_state(state, a.state_out)
    if a.out:
        pd.DataFrame(rows, columns=["series_id", "date", "score", "kappa"]).to_csv(a.out, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# Pipeline


STAGES = ("simulate", "fit", "detect", "forecast-detect", "classify", "cluster")


def _derived_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGES.index(stage)]).generate_state(1)[0])


def run_pipeline(cfg: configparser.ConfigParser, out_dir: Path, seed: int, threads: int = 1) -> dict:
    """Run every configured stage in order, skipping stages whose inputs and
    settings hash the same as in the previous manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    old = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"stages": {}}
    manifest = {"version": __version__, "seed": seed, "stages": {}, "artifacts": {}}

    def section(name):
        return dict(cfg[name]) if cfg.has_section(name) else {}

    def get(sec, key, default, cast=str):
        return cast(sec.get(key, default))

    paths = {
        "panel": out_dir / "panel.csv", "truth": out_dir / "truth.csv", "residuals": out_dir / "residuals.csv",
        "coeffs": out_dir / "coeffs.csv", "report": out_dir / "report.csv", "forecast": out_dir / "forecast_report.csv",
        "classified": out_dir / "classified.csv", "labels": out_dir / "labels.csv", "overlap": out_dir / "overlap.csv",
    }
    if cfg.has_option("pipeline", "panel"):
        paths["panel"] = Path(cfg["pipeline"]["panel"])

    def stage(name, inputs, outputs, params, fn):
        s = _derived_seed(seed, name)
        key = hashlib.sha256(json.dumps(
            {"params": params, "seed": s, "inputs": {str(p): file_hash(p) for p in inputs}}, sort_keys=True
        ).encode()).hexdigest()
        prev = old["stages"].get(name, {})
        fresh = prev.get("key") == key and prev.get("status") == "ok" and all(
            Path(p).exists() and file_hash(p) == prev.get("outputs", {}).get(str(p)) for p in outputs)
        entry = {"seed": s, "key": key, "params": params}
        if fresh:
            entry.update(status="ok", skipped=True, outputs=prev["outputs"])
        else:
            t0 = time.time()
            try:
                fn(s)
            except Exception as exc:
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                manifest["stages"][name] = entry
                manifest_path.write_text(json.dumps(manifest, indent=1))
                raise
            entry.update(status="ok", skipped=False, seconds=round(time.time() - t0, 3),
                         outputs={str(p): file_hash(p) for p in outputs})
        manifest["stages"][name] = entry
        manifest["artifacts"].update(entry["outputs"])

    if cfg.has_section("simulate") and not cfg.has_option("pipeline", "panel"):
        sec = section("simulate")
        params = {k: sec[k] for k in sorted(sec)}

        def sim(s):
            ns = argparse.Namespace(d=get(sec, "d", 50, int), n=get(sec, "n", 400, int), fraction=get(sec, "fraction", 0.4, float),
                                    kind=get(sec, "kind", "ao"), delta=get(sec, "delta", 1.5, float), tau=get(sec, "tau", 80, int),
                                    omega=get(sec, "omega", "0.7"), slope_scale=get(sec, "slope_scale", 0.0, float), seed=s,
                                    out=paths["panel"], truth=paths["truth"])
            cmd_simulate(ns)
        stage("simulate", [], [paths["panel"], paths["truth"]], params, sim)

    sec = section("fit")
    fit_params = {k: sec[k] for k in sorted(sec)}
    spec_args = (get(sec, "v", 2, int), int(sec["c"]) if "c" in sec else None, sec.get("periods"))

    def fit(s):
        cmd_fit(argparse.Namespace(panel=paths["panel"], v=spec_args[0], c=spec_args[1], periods=spec_args[2],
                                   h_frac=get(sec, "h_frac", 0.75, float), subsets=get(sec, "subsets", 500, int), seed=s,
                                   csteps=get(sec, "csteps", 1, int), threads=threads,
                                   out_residuals=paths["residuals"], out_coeffs=paths["coeffs"]))
    stage("fit", [paths["panel"]], [paths["residuals"], paths["coeffs"]], fit_params, fit)

    reports = []
    if cfg.has_section("detect"):
        sec = section("detect")

        def det(s):
            cmd_detect(argparse.Namespace(residuals=paths["residuals"], method=get(sec, "method", "com"),
                                          threshold=get(sec, "threshold", "quantile:0.9975"), sigma=None,
                                          level=get(sec, "level", "raw"), out=paths["report"]))
        stage("detect", [paths["residuals"]], [paths["report"]], {k: sec[k] for k in sorted(sec)}, det)
        reports.append(paths["report"])
    if cfg.has_section("forecast-detect"):
        sec = section("forecast-detect")

        def fdet(s):
            cmd_forecast_detect(argparse.Namespace(
                residuals=paths["residuals"], model=get(sec, "model", "har"), threshold=get(sec, "threshold", "quantile:0.9975"),
                seed=s, subsets=get(sec, "subsets", 500, int), epochs=get(sec, "epochs", 100, int),
                trim=get(sec, "trim", 0.75, float), width=get(sec, "width", 10, int),
                train_sample=int(sec["train_sample"]) if "train_sample" in sec else None, out=paths["forecast"]))
        stage("forecast-detect", [paths["residuals"]], [paths["forecast"]], {k: sec[k] for k in sorted(sec)}, fdet)
        reports.append(paths["forecast"])
    if cfg.has_section("classify") and reports:
        sec = section("classify")

        def cls(s):
            merged = OutlierReport([e for p in reports for e in OutlierReport.read_csv(p).events])
            tmp = out_dir / "flags_all.csv"
            merged.to_csv(tmp)
            cmd_classify(argparse.Namespace(
                report=tmp, residuals=paths["residuals"], panel=paths["panel"], v=spec_args[0], c=spec_args[1],
                periods=spec_args[2], window=get(sec, "window", 30, int), multiplier=get(sec, "multiplier", 2.0, float),
                min_side=get(sec, "min_side", 5, int), subsets=get(sec, "subsets", 500, int), seed=s, out=paths["classified"]))
        stage("classify", [paths["residuals"], paths["panel"], *reports], [paths["classified"]],
              {k: sec[k] for k in sorted(sec)}, cls)
    if cfg.has_section("cluster"):
        sec = section("cluster")
        flags = paths["classified"] if paths["classified"].exists() else (reports[0] if reports else None)

        def clu(s):
            cmd_cluster(argparse.Namespace(
                residuals=paths["residuals"], coeffs=paths["coeffs"], k=get(sec, "k", 5, int),
                restarts=get(sec, "restarts", 50, int), seed=s, out=paths["labels"], report=paths["overlap"],
                flags=flags, elbow=None, features=None, k_max=10))
        stage("cluster", [paths["residuals"], paths["coeffs"]] + ([flags] if flags else []),
              [paths["labels"], paths["overlap"]], {k: sec[k] for k in sorted(sec)}, clu)

    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest


def cmd_pipeline(a) -> None:
    if not a.config:
        raise UsageError("pipeline needs --config")
    cfg = _read_config(a.config)
    seed = a.seed if a.seed is not None else cfg.getint("pipeline", "seed", fallback=0)
    out = Path(a.out_dir or cfg.get("pipeline", "out_dir", fallback="run"))
    manifest = run_pipeline(cfg, out, seed, a.threads)
    skipped = [k for k, v in manifest["stages"].items() if v.get("skipped")]
    logger.info("pipeline done: %d stages, %d skipped", len(manifest["stages"]), len(skipped))


# ---------------------------------------------------------------------------
# Parser


def _read_config(path) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    if not Path(path).exists():
        raise UsageError(f"config file {path} not found")
    cfg.read(path)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robanom", description="Robust anomaly detection for panels of daily series.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="INI file; section names match subcommands")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    def design_flags(sp):
        sp.add_argument("--v", type=int, default=2, help="polynomial trend order")
        sp.add_argument("--c", type=int, default=None, help="number of cycle frequencies (default 2: weekly, monthly)")
        sp.add_argument("--periods", default=None, help="comma-separated cycle periods in days")

    s = add("simulate", cmd_simulate, "simulate a contaminated panel")
    s.add_argument("--d", type=int, default=600)
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--fraction", type=float, default=0.4)
    s.add_argument("--kind", choices=["ao", "lso", "decay"], default="ao")
    s.add_argument("--delta", type=float, default=1.5)
    s.add_argument("--tau", type=int, default=80)
    s.add_argument("--omega", default="0.7", help="decay coefficients, comma-separated")
    s.add_argument("--slope-scale", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--truth")

    s = add("fit", cmd_fit, "trimmed trend/cycle fit per series")
    s.add_argument("--panel", required=True)
    design_flags(s)
    s.add_argument("--h-frac", type=float, default=0.75)
    s.add_argument("--subsets", type=int, default=500)
    s.add_argument("--csteps", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-residuals", required=True)
    s.add_argument("--out-coeffs")

    s = add("scatter", cmd_scatter, "robust scatter of a residual panel")
    s.add_argument("--method", choices=["ogk", "mrcd", "com", "feau"], default="com")
    s.add_argument("--residuals", required=True)
    s.add_argument("--out-sigma", required=True)
    s.add_argument("--diag")
    s.add_argument("--full", action="store_true", help="write the dense matrix even when d > 2000")

    s = add("detect", cmd_detect, "distance-based cellwise detection")
    s.add_argument("--method", choices=["ogk", "mrcd", "com", "feau"], default="com")
    s.add_argument("--threshold", default="quantile:0.9975")
    s.add_argument("--residuals", required=True)
    s.add_argument("--sigma", help="scatter CSV from the scatter subcommand")
    s.add_argument("--level", choices=["raw", "differenced", "both"], default="raw")
    s.add_argument("--out", required=True)

    s = add("forecast-detect", cmd_forecast_detect, "forecast-error detection")
    s.add_argument("--residuals", required=True)
    s.add_argument("--model", choices=["har", "ar1", "nhar"], default="har")
    s.add_argument("--train-sample", type=int, default=None)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--trim", type=float, default=0.75)
    s.add_argument("--width", type=int, default=10)
    s.add_argument("--subsets", type=int, default=500)
    s.add_argument("--threshold", default="quantile:0.9975")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("classify", cmd_classify, "AO/LSO typology and sign of flagged cells")
    s.add_argument("--report", required=True)
    s.add_argument("--residuals", required=True)
    s.add_argument("--panel", help="raw panel; enables sign inference")
    design_flags(s)
    s.add_argument("--window", type=int, default=30)
    s.add_argument("--multiplier", type=float, default=2.0)
    s.add_argument("--min-side", type=int, default=5)
    s.add_argument("--subsets", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("cluster", cmd_cluster, "feature k-means of residual series")
    s.add_argument("--residuals", required=True)
    s.add_argument("--coeffs", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--restarts", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--flags", help="outlier report used for the overlap table")
    s.add_argument("--elbow")
    s.add_argument("--k-max", type=int, default=10)
    s.add_argument("--features")

    s = add("bench", cmd_bench, "Monte Carlo experiments")
    s.add_argument("--profile", choices=sorted(PROFILES), default="table1")
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--full", action="store_true", help="500 replications")
    s.add_argument("--methods", default=None, help="comma-separated subset of " + ",".join(ALL_METHODS))
    s.add_argument("--thresholds", default="quantile:0.9975", help="semicolon-separated threshold rules")
    s.add_argument("--d", type=int, default=600)
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("realtime", cmd_realtime, "score new observations with a frozen model")
    s.add_argument("--state-in")
    s.add_argument("--observations")
    s.add_argument("--state-out")
    s.add_argument("--out")
    s.add_argument("--init-panel", help="fit a fresh state on this panel instead of loading one")
    s.add_argument("--train", type=int, default=None, help="columns used for fitting; the rest are replayed")
    s.add_argument("--model", choices=["har", "nhar"], default="har")
    s.add_argument("--k", type=float, default=0.9975, help="quantile level of the frozen threshold")
    s.add_argument("--subsets", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    design_flags(s)

    s = add("pipeline", cmd_pipeline, "run configured stages with caching")
    s.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [pipeline] and per-stage sections")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int, default=None)
    return p


def _prescan(parser: argparse.ArgumentParser, argv: list[str]) -> tuple[str | None, str | None, argparse._SubParsersAction]:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    config = command = None
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            config = argv[k + 1]
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif tok in sub.choices and command is None:
            command = tok
            break
    return config, command, sub


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    config, command, sub = _prescan(parser, argv)
    if config and command and command != "pipeline":
        cfg = _read_config(config)
        if cfg.has_section(command):
            sp = sub.choices[command]
            known = {a.dest: a for a in sp._actions}
            defaults = {}
            for key, val in cfg[command].items():
                dest = key.replace("-", "_")
                if dest not in known:
                    raise UsageError(f"unknown key {key!r} in [{command}]")
                act = known[dest]
                if isinstance(act, argparse._StoreTrueAction):
                    defaults[dest] = cfg.getboolean(command, key)
                else:
                    defaults[dest] = act.type(val) if act.type else val
                act.required = False
            sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"robanom: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"robanom: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PanelError, DataError, FileNotFoundError, KeyError) as exc:
        print(f"robanom: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, DegenerateScaleError, TrainingDivergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"robanom: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"robanom: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

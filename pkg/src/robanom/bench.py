"""Monte Carlo harness: simulate, contaminate, detect, count against the truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .dgp import DgpParams, GroundTruth, OutlierSpec, inject_outliers, simulate_dgp
from .distance import ScoreMatrix, cellwise_scores, parse_threshold
from .forecast import forecast_scores
from .panel import Panel, first_difference
from .scatter import com_scatter, feau_estimate, mrcd_scatter, ogk_scatter
from .trend import MONTHLY, TrendCycleSpec, fit_panel

logger = logging.getLogger(__name__)

REG_METHODS = ("OGKreg", "MRCDreg", "COMreg", "RobAR1")
RAW_METHODS = ("OGK", "MRCD", "COM", "FEAU")
ALL_METHODS = RAW_METHODS + REG_METHODS

# the simulated seasonal is a 30-day spline; five harmonics absorb its peak
MC_DESIGN = TrendCycleSpec.harmonics(MONTHLY, 5)


@dataclass(frozen=True)
class McConfig:
    d: int = 600
    n: int = 400
    replications: int = 20
    fraction: float = 0.40
    tau: int = 80
    deltas: tuple[float, ...] = (1.5,)
    kind: str = "AO"
    methods: tuple[str, ...] = ALL_METHODS
    thresholds: tuple[str, ...] = ("quantile:0.9975",)
    seed: int = 0
    dgp: DgpParams = field(default_factory=DgpParams)
    design: TrendCycleSpec = MC_DESIGN
    n_subsets: int = 500
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("AO", "LSO"):
            raise ValueError("kind must be AO or LSO")
        bad = set(self.methods) - set(ALL_METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if not 0 <= self.tau < self.n:
            raise ValueError("tau out of range")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")


@dataclass
class MetricsTable:
    """Replication-averaged ``percOut`` and ``numFalsPos`` per (delta, method, threshold)."""

    frame: pd.DataFrame
    failures: int = 0

    def get(self, method: str, threshold: str = "quantile:0.9975", delta: float | None = None) -> pd.Series:
        f = self.frame[(self.frame.method == method) & (self.frame.threshold == threshold)]
        if delta is not None:
            f = f[np.isclose(f.delta, delta)]
        if len(f) != 1:
            raise KeyError((method, threshold, delta))
        return f.iloc[0]

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# Truth windows and counting


def truth_mask(truth: GroundTruth, shape: tuple[int, int], level: str, window: int = 0) -> tuple[np.ndarray, list[np.ndarray]]:
    """Cells counted as hits per injected outlier, and their union.

    On the differenced level the outlier at raw time ``tau`` sits at
    differenced index ``tau - 1``.
    """
    d, m = shape
    union = np.zeros(shape, dtype=bool)
    windows = []
    for e in truth:
        centre = e.tau - 1 if level == "differenced" else e.tau
        lo, hi = max(centre - window, 0), min(centre + window, m - 1)
        w = np.zeros(shape, dtype=bool)
        if lo <= hi:
            w[e.series, lo : hi + 1] = True
        windows.append(w)
        union |= w
    return union, windows


def count_flags(flags: np.ndarray, truth: GroundTruth, level: str, window: int) -> tuple[float, int]:
    """``(percOut, numFalsPos)``; ``percOut`` is NaN when nothing was injected."""
    if not truth:
        return float("nan"), int(flags.sum())
    union = np.zeros(flags.shape, dtype=bool)
    hits = 0
    for e in truth:
        centre = e.tau - 1 if level == "differenced" else e.tau
        lo, hi = max(centre - window, 0), min(centre + window, flags.shape[1] - 1)
        if lo > hi:
            continue
        union[e.series, lo : hi + 1] = True
        hits += bool(flags[e.series, lo : hi + 1].any())
    return hits / len(truth), int((flags & ~union).sum())


# ---------------------------------------------------------------------------
# Scores for every method on one contaminated panel


def _scatter_scores(R: Panel, methods: Sequence[str], center: bool) -> dict[str, ScoreMatrix]:
    out: dict[str, ScoreMatrix] = {}
    X = R.values.T
    ogk = None
    if "OGK" in methods or "MRCD" in methods:
        ogk = ogk_scatter(X)
        if "OGK" in methods:
            out["OGK"] = cellwise_scores(R, np.diag(ogk.sigma), location=ogk.location if center else None)
    if "MRCD" in methods:
        # the sixth start is OGK of the tau-standardized data; reuse it
        B = ogk.scales
        sigma_z = ogk.sigma / np.outer(B, B)
        est = mrcd_scatter(X, ogk_sigma_z=sigma_z)
        out["MRCD"] = cellwise_scores(R, np.diag(est.sigma), location=est.location if center else None)
    if "COM" in methods:
        est = com_scatter(X)
        out["COM"] = cellwise_scores(R, np.diag(est.sigma), location=est.location if center else None)
    if "FEAU" in methods:
        f = feau_estimate(R.values)
        sd = f.series_scale()
        out["FEAU"] = cellwise_scores(R, sd * sd, location=f.series_location())
    return out


def _seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def method_scores(Y: Panel, cfg: McConfig, seed) -> dict[str, ScoreMatrix]:
    """Scores for ``cfg.methods`` on panel ``Y``.

    AO: reg methods score trimmed-fit residuals of ``Y``; raw methods score
    ``Y`` centred at the estimator's location.  LSO: both work on first
    differences, except RobAR1 which uses differenced residuals of ``Y``.
    """
    fit_seed, ar_seed = _seq(seed).spawn(2)
    methods = cfg.methods
    reg = [m[:-3] for m in methods if m.endswith("reg")]
    raw = [m for m in methods if m in RAW_METHODS]
    out: dict[str, ScoreMatrix] = {}
    base = first_difference(Y) if cfg.kind == "LSO" else Y
    resid: dict[str, Panel] = {}

    def residuals(panel: Panel, key: str) -> Panel:
        if key not in resid:
            resid[key] = fit_panel(panel, cfg.design, n_subsets=cfg.n_subsets, seed=fit_seed).residuals
        return resid[key]

    if reg:
        for k, v in _scatter_scores(residuals(base, "base"), reg, center=False).items():
            out[k + "reg"] = v
    if raw:
        out.update(_scatter_scores(base, raw, center=True))
    if "RobAR1" in methods:
        R = first_difference(residuals(Y, "levels")) if cfg.kind == "LSO" else residuals(base, "base")
        out["RobAR1"], _ = forecast_scores(R, "ar1", seed=ar_seed, n_subsets=cfg.n_subsets)
    return out


def replicate(cfg: McConfig, delta: float, rep_seed) -> tuple[dict[str, ScoreMatrix], GroundTruth, str]:
    sim_seed, det_seed = _seq(rep_seed).spawn(2)
    clean = simulate_dgp(cfg.dgp, cfg.d, cfg.n, sim_seed)
    Y, truth = inject_outliers(clean, [OutlierSpec(cfg.kind, cfg.tau, delta)], cfg.fraction)
    level = "differenced" if cfg.kind == "LSO" else "raw"
    return method_scores(Y, cfg, det_seed), truth, level


def _rep_rows(cfg: McConfig, delta: float, rep: int, rep_seed) -> list[dict]:
    scores, truth, level = replicate(cfg, delta, rep_seed)
    window = 1 if cfg.kind == "LSO" else 0
    rows = []
    for method, sc in scores.items():
        for th in cfg.thresholds:
            kappa = parse_threshold(th)(sc).kappa
            flags = np.nan_to_num(sc.z, nan=-np.inf) > kappa
            perc, fp = count_flags(flags, truth if delta != 0 else [], level, window)
            rows.append(dict(delta=delta, method=method, threshold=th, rep=rep, percOut=perc, numFalsPos=fp, kappa=kappa))
    return rows


def rep_seeds(cfg: McConfig, delta_index: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence([cfg.seed, delta_index]).spawn(cfg.replications)


def run_monte_carlo(cfg: McConfig, return_reps: bool = False):
    """Average ``percOut``/``numFalsPos`` over replications.

    A replication that raises is logged and left out; the count is kept in
    :attr:`MetricsTable.failures`.
    """
    jobs = []
    for di, delta in enumerate(cfg.deltas):
        for rep, s in enumerate(rep_seeds(cfg, di)):
            jobs.append((delta, rep, s))

    def run(job):
        delta, rep, s = job
        try:
            return _rep_rows(cfg, delta, rep, s)
        except Exception as exc:  # noqa: BLE001 - any failure drops the replication
            logger.warning("replication %d (delta=%g) failed: %s", rep, delta, exc)
            return None

    if cfg.n_jobs == 1:
        results = [run(j) for j in jobs]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=cfg.n_jobs)(delayed(run)(j) for j in jobs)
    failures = sum(r is None for r in results)
    reps = pd.DataFrame([row for r in results if r for row in r])
    if reps.empty:
        raise RuntimeError("every replication failed")
    agg = (
        reps.groupby(["delta", "method", "threshold"], sort=False)
        .agg(percOut=("percOut", "mean"), numFalsPos=("numFalsPos", "mean"), kappa=("kappa", "mean"), reps=("rep", "count"))
        .reset_index()
    )
    table = MetricsTable(agg, failures)
    return (table, reps) if return_reps else table


# ---------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class RocCurve:
    k: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def auc(self) -> float:
        x = np.concatenate(([0.0], self.fpr, [1.0]))
        y = np.concatenate(([0.0], self.tpr, [1.0]))
        order = np.lexsort((y, x))
        return float(np.trapezoid(y[order], x[order]))


def roc_curve(scores: ScoreMatrix | np.ndarray, truth: GroundTruth, level: str = "raw", window: int = 0,
              grid: np.ndarray | None = None) -> RocCurve:
    """``(FPR, TPR)`` at ``kappa = Q(k)`` for ``k`` on ``grid`` (default 0.001 .. 0.999).

    TPR counts outliers with a flag in their window; FPR divides flags
    outside every window by the number of such cells.
    """
    z = scores.z if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=float)
    if grid is None:
        grid = np.linspace(0.001, 0.999, 999)
    grid = np.sort(np.asarray(grid, dtype=float))
    z = np.nan_to_num(z, nan=-np.inf)
    union, windows = truth_mask(truth, z.shape, level, window)
    clean = z[~union]
    n_clean = int(np.isfinite(clean).sum())
    # outlier detected once kappa drops below its best score in the window
    best = np.array([z[w].max() for w in windows])
    finite = z[np.isfinite(z)]
    kappas = np.quantile(finite, grid)
    clean_sorted = np.sort(clean[np.isfinite(clean)])
    best_sorted = np.sort(best)
    fp = clean_sorted.size - np.searchsorted(clean_sorted, kappas, side="right")
    tp = best_sorted.size - np.searchsorted(best_sorted, kappas, side="right")
    fpr = fp / max(n_clean, 1)
    tpr = tp / max(len(truth), 1)
    # fp and tp both fall as k rises, so descending k orders both upward
    order = np.arange(len(grid))[::-1]
    return RocCurve(np.asarray(grid)[order], fpr[order], tpr[order])

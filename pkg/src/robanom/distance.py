"""Mahalanobis and cellwise scoring, data-driven thresholds and flag merging.

Score matrices use the panel orientation: ``scores[i, t]`` is series ``i``
at time ``t``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
import pandas as pd

from .panel import Panel
from .scatter import ScatterEstimate

logger = logging.getLogger(__name__)

Level = Literal["raw", "differenced", "both"]


def mahalanobis(r: np.ndarray, sigma: np.ndarray | ScatterEstimate) -> float:
    """``sqrt(r' Sigma^{-1} r)``; a pseudo-inverse is used when ``Sigma`` is singular."""
    S = sigma.sigma if isinstance(sigma, ScatterEstimate) else np.asarray(sigma, dtype=float)
    r = np.asarray(r, dtype=float)
    if S.shape != (r.size, r.size):
        raise ValueError(f"residual length {r.size} does not match scatter {S.shape}")
    return float(np.sqrt(max(float(r @ _inverse(S) @ r), 0.0)))


def _inverse(S: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(S)
        Linv = np.linalg.inv(L)
        return Linv.T @ Linv
    except np.linalg.LinAlgError:
        rank = np.linalg.matrix_rank(S)
        logger.info("scatter is singular (rank %d of %d); using pseudo-inverse", rank, S.shape[0])
        return np.linalg.pinv(S, hermitian=True)


def mahalanobis_rows(R: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Distance of every column of ``R`` (``d x n``) from the origin."""
    P = _inverse(np.asarray(sigma, dtype=float))
    q = np.einsum("it,ij,jt->t", R, P, R)
    return np.sqrt(np.maximum(q, 0.0))


@dataclass(frozen=True)
class ScoreMatrix:
    """Cellwise scores of one panel.

    ``raw`` holds ``r^2 / sigma_ii``; ``z`` is its z-score over all finite cells.
    """

    z: np.ndarray
    raw: np.ndarray
    series_ids: tuple[str, ...]
    dates: np.ndarray
    level: Literal["raw", "differenced"] = "raw"
    distances: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.z.shape[0]

    def finite(self) -> np.ndarray:
        return self.z[np.isfinite(self.z)]


def zscore_pooled(c: np.ndarray) -> np.ndarray:
    finite = np.isfinite(c)
    vals = c[finite]
    if vals.size == 0:
        return np.full(c.shape, np.nan)
    sd = vals.std()
    if not sd > 0:
        return np.where(finite, 0.0, np.nan)
    return (c - vals.mean()) / sd


def cellwise_scores(
    R: Panel | np.ndarray,
    variances: np.ndarray,
    level: Literal["raw", "differenced"] | None = None,
    location: np.ndarray | None = None,
    sigma: np.ndarray | None = None,
) -> ScoreMatrix:
    """``c = (r - location)^2 / sigma_ii`` per cell and its pooled z-score.

    With ``sigma`` given, per-time Mahalanobis distances are stored as well.
    """
    if isinstance(R, Panel):
        vals, ids, dates = R.values, R.series_ids, R.dates
        level = level or ("differenced" if R.layout == "differenced" else "raw")
    else:
        vals = np.asarray(R, dtype=float)
        ids = tuple(f"s{i}" for i in range(vals.shape[0]))
        dates = np.arange(vals.shape[1])
        level = level or "raw"
    variances = np.asarray(variances, dtype=float)
    if variances.shape != (vals.shape[0],):
        raise ValueError(f"{variances.size} variances for {vals.shape[0]} series")
    if np.any(~(variances > 0)):
        raise ValueError("variances must be positive")
    r = vals if location is None else vals - np.asarray(location, dtype=float)[:, None]
    c = r * r / variances[:, None]
    dist = None
    if sigma is not None:
        dist = mahalanobis_rows(np.nan_to_num(r), sigma)
    return ScoreMatrix(zscore_pooled(c), c, tuple(ids), np.asarray(dates), level, dist)


def scores_from_estimate(R: Panel, est: ScatterEstimate, center: bool = False) -> ScoreMatrix:
    """Cellwise scores with variances from ``est``; ``center`` subtracts its location."""
    loc = est.location if center else None
    return cellwise_scores(R, np.diag(est.sigma), location=loc)


# ---------------------------------------------------------------------------
# Thresholds


@dataclass(frozen=True)
class ThresholdSpec:
    method: Literal["quantile", "linear-logtail", "pareto-logtail"]
    kappa: float
    fallback: bool = False
    diagnostics: dict = field(default_factory=dict)


def _finite(scores) -> np.ndarray:
    s = scores.finite() if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=float).ravel()
    return s[np.isfinite(s)]


def threshold_quantile(scores, k: float) -> ThresholdSpec:
    if not 0.0 <= k <= 1.0:
        raise ValueError("k must lie in [0, 1]")
    s = _finite(scores)
    if s.size == 0:
        raise ValueError("no finite scores")
    return ThresholdSpec("quantile", float(np.quantile(s, k)), diagnostics={"k": k})


def threshold_linear_logtail(
    scores,
    tail_frac: float = 0.05,
    rmse_mult: float = 2.0,
    fallback_k: float = 0.9975,
    min_bins: int = 5,
    persist: int = 2,
) -> ThresholdSpec:
    """Break point of a straight-line fit to the log-histogram of the upper tail.

    The upper ``tail_frac`` of the scores is binned with Freedman-Diaconis
    widths and ``log(count + 1)`` is regressed on the bin centre.  The line is
    grown bin by bin from the left; the first bin that starts a run of
    ``persist`` bins lying more than ``rmse_mult`` fit RMSEs above the
    extrapolated line gives ``kappa``.  The RMSE is floored at the Poisson
    spread of each bin so sampling noise in single bins does not trigger.
    Because the run is only noticed a few bins after the slope changes, the
    break is then relocated by a continuous two-segment fit.
    """
    s = _finite(scores)
    if s.size < 200:
        raise ValueError("linear log-tail threshold needs at least 200 finite scores")
    if np.ptp(s) == 0:
        raise ValueError("degenerate (all-equal) scores")
    q0 = float(np.quantile(s, 1 - tail_frac))
    tail = s[s >= q0]
    edges = np.histogram_bin_edges(tail, bins="fd")
    counts, edges = np.histogram(tail, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    x, y = centers[keep], np.log(counts[keep] + 1.0)
    diag = {"bins": int(counts.size), "q_tail": q0}
    for j in range(min_bins, x.size - persist + 1):
        slope, intercept = np.polyfit(x[:j], y[:j], 1)
        rmse = math.sqrt(float(np.mean((y[:j] - intercept - slope * x[:j]) ** 2)))
        ahead = slice(j, j + persist)
        pred = np.maximum(intercept + slope * x[ahead], 0.0)  # log(count + 1) is never negative
        # log(count + 1) of a Poisson count has spread about 1/sqrt(count + 1)
        noise = 1.0 / np.sqrt(np.maximum(np.exp(pred), 1.0))
        if np.all(y[ahead] - pred > rmse_mult * np.maximum(rmse, noise)):
            k = _kink(x[: j + persist], y[: j + persist], min_bins)
            diag.update(slope=float(slope), intercept=float(intercept), rmse=rmse, detected_bin=j, break_bin=k)
            return ThresholdSpec("linear-logtail", float(x[k]), False, diag)
    fb = threshold_quantile(s, fallback_k)
    return ThresholdSpec("linear-logtail", fb.kappa, True, diag)


def _kink(x: np.ndarray, y: np.ndarray, start: int) -> int:
    # detection lags the break; relocate it by a continuous broken-stick fit
    best, best_sse = len(x) - 1, np.inf
    for c in range(start, len(x)):
        A = np.column_stack([np.ones_like(x), x, np.maximum(x - x[c], 0.0)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        sse = float(np.sum((y - A @ coef) ** 2))
        if sse < best_sse - 1e-12:
            best, best_sse = c, sse
    return best


def threshold_pareto_logtail(
    scores,
    tail_frac: float = 0.05,
    survival_ratio: float = 0.25,
    fallback_k: float = 0.9975,
    min_tail: int = 20,
) -> ThresholdSpec:
    """Pareto fit above ``z_m = Q(1 - tail_frac)`` and the first point where the
    empirical survival drops below ``survival_ratio`` times the fitted one."""
    s = _finite(scores)
    if s.size < 200:
        raise ValueError("Pareto log-tail threshold needs at least 200 finite scores")
    zm = float(np.quantile(s, 1 - tail_frac))
    if not zm > 0:
        raise ValueError("Pareto scale z_m must be positive")
    tail = np.sort(s[s >= zm])
    m = tail.size
    if m < min_tail:
        raise ValueError(f"only {m} tail points (need {min_tail})")
    logs = np.log(tail / zm).sum()
    if not logs > 0:
        raise ValueError("degenerate tail")
    rho = m / logs
    emp = (m - np.arange(m)) / m
    fitted = (zm / tail) ** rho
    below = np.where(emp < survival_ratio * fitted)[0]
    diag = {"z_m": zm, "rho": float(rho), "m": int(m)}
    if below.size:
        return ThresholdSpec("pareto-logtail", float(tail[below[0]]), False, diag)
    fb = threshold_quantile(s, fallback_k)
    return ThresholdSpec("pareto-logtail", fb.kappa, True, diag)


def parse_threshold(text: str):
    """``quantile:K``, ``linear`` or ``pareto`` to a callable ``scores -> ThresholdSpec``."""
    text = text.strip().lower()
    if text.startswith("quantile"):
        _, _, k = text.partition(":")
        kk = float(k) if k else 0.9975
        return lambda s: threshold_quantile(s, kk)
    if text == "linear":
        return threshold_linear_logtail
    if text == "pareto":
        return threshold_pareto_logtail
    raise ValueError(f"unknown threshold {text!r}")


# ---------------------------------------------------------------------------
# Flags and reports


@dataclass(frozen=True)
class Event:
    series_id: str
    date: np.datetime64
    score: float
    level: Level
    kappa: float
    method: str = ""
    typology: str = ""
    sign: str = ""
    delta_hat: float = float("nan")


@dataclass
class OutlierReport:
    events: list[Event]

    def __len__(self) -> int:
        return len(self.events)

    def cells(self) -> set[tuple[str, np.datetime64]]:
        return {(e.series_id, e.date) for e in self.events}

    def series(self) -> set[str]:
        return {e.series_id for e in self.events}

    def to_frame(self) -> pd.DataFrame:
        cols = ["series_id", "date", "score", "level", "kappa", "method", "typology", "sign", "delta_hat"]
        rows = [
            [e.series_id, str(np.datetime64(e.date, "D")), e.score, e.level, e.kappa, e.method, e.typology, e.sign, e.delta_hat]
            for e in self.events
        ]
        return pd.DataFrame(rows, columns=cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path) -> "OutlierReport":
        frame = pd.read_csv(path, dtype={"series_id": str}, keep_default_na=False, float_precision="round_trip")
        events = []
        for row in frame.itertuples(index=False):
            dh = float(row.delta_hat) if row.delta_hat != "" else float("nan")
            events.append(
                Event(row.series_id, np.datetime64(row.date, "D"), float(row.score), row.level, float(row.kappa),
                      str(row.method), str(row.typology), str(row.sign), dh)
            )
        return cls(events)


def flag_cells(scores: ScoreMatrix, kappa: float) -> np.ndarray:
    """Boolean ``d x n`` mask of cells with ``z > kappa``."""
    with np.errstate(invalid="ignore"):
        return np.nan_to_num(scores.z, nan=-np.inf) > kappa


def flag(scores: ScoreMatrix, kappa: float, method: str = "") -> OutlierReport:
    mask = flag_cells(scores, kappa)
    ii, tt = np.nonzero(mask)
    return OutlierReport(
        [Event(scores.series_ids[i], scores.dates[t], float(scores.z[i, t]), scores.level, float(kappa), method)
         for i, t in zip(ii, tt)]
    )


def flag_and_merge(
    raw: tuple[ScoreMatrix, float] | None,
    diff: tuple[ScoreMatrix, float] | None,
    method: str = "",
    window: int = 1,
) -> OutlierReport:
    """Union of raw-level and differenced-level flags.

    Differenced scores carry the date of the later of the two differenced
    days.  A differenced flag within ``window`` days of an unmatched raw flag
    on the same series merges into it with level ``both``.
    """
    raw_events = flag(*raw, method=method).events if raw is not None else []
    diff_events = flag(*diff, method=method).events if diff is not None else []
    by_series: dict[str, list[int]] = {}
    for k, e in enumerate(raw_events):
        by_series.setdefault(e.series_id, []).append(k)
    merged = list(raw_events)
    used: set[int] = set()
    extra = []
    for e in diff_events:
        best, gap = None, None
        for k in by_series.get(e.series_id, []):
            if k in used:
                continue
            g = abs(int((raw_events[k].date - e.date).astype(int)))
            if g <= window and (gap is None or g < gap):
                best, gap = k, g
        if best is None:
            extra.append(e)
        else:
            used.add(best)
            merged[best] = replace(raw_events[best], level="both")
    events = merged + extra
    events.sort(key=lambda e: (e.series_id, e.date))
    return OutlierReport(events)

"""AO / LSO typology of flagged cells and sign inference by dummy re-regression."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .distance import Event, OutlierReport
from .panel import Panel
from .scatter import MAD_NORMAL
from .trend import FitError, TrendCycleSpec, build_design, lte_fit

logger = logging.getLogger(__name__)

Typology = Literal["AO", "LSO", "unclassified"]


@dataclass(frozen=True)
class TypologyConfig:
    """Window statistics used to tell a spike from a step.

    ``sigma`` picks the residual scale: ``"mad"`` recomputes it robustly
    from the standardized residuals without the flagged point, ``"one"``
    takes the standardization at face value.
    """

    window: int = 30
    multiplier: float = 2.0
    min_side: int = 5
    sigma: Literal["mad", "one"] = "mad"
    lso_first: bool = True

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.multiplier <= 0:
            raise ValueError("multiplier must be > 0")
        if self.min_side < 1:
            raise ValueError("min_side must be >= 1")
        if self.sigma not in ("mad", "one"):
            raise ValueError("sigma must be 'mad' or 'one'")


def standardize(r: np.ndarray) -> np.ndarray:
    """Centre at the median and divide by the normalized MAD (by the sd if the MAD is 0)."""
    r = np.asarray(r, dtype=float)
    ok = r[np.isfinite(r)]
    med = float(np.median(ok))
    s = MAD_NORMAL * float(np.median(np.abs(ok - med)))
    if s <= 0:
        s = float(np.std(ok))
    return (r - med) / s if s > 0 else r - med


def residual_scale(rz: np.ndarray, tau: int) -> float:
    """Normalized MAD of ``rz`` with the flagged point left out."""
    keep = np.ones(rz.size, dtype=bool)
    keep[tau] = False
    x = rz[keep & np.isfinite(rz)]
    if x.size == 0:
        return 0.0
    return MAD_NORMAL * float(np.median(np.abs(x - np.median(x))))


def window_means(rz: np.ndarray, tau: int, window: int) -> tuple[float, float, int, int]:
    """``(S_b, S_a, n_before, n_after)`` over ``[tau-w, tau-1]`` and ``[tau+1, tau+w]``."""
    before = rz[max(tau - window, 0) : tau]
    after = rz[tau + 1 : tau + 1 + window]
    before = before[np.isfinite(before)]
    after = after[np.isfinite(after)]
    sb = float(before.mean()) if before.size else float("nan")
    sa = float(after.mean()) if after.size else float("nan")
    return sb, sa, before.size, after.size


def classify(rz: np.ndarray, tau: int, cfg: TypologyConfig = TypologyConfig(), sigma: float | None = None) -> Typology:
    """Label the flag at ``tau`` as a level shift, an additive outlier, or neither.

    LSO when the window means differ by more than ``multiplier * sigma``; AO
    when the flagged value is that far from both window means.  With fewer
    than ``min_side`` points on either side the flag stays unclassified.
    """
    rz = np.asarray(rz, dtype=float)
    if not 0 <= tau < rz.size:
        raise ValueError(f"tau={tau} outside a series of length {rz.size}")
    sb, sa, nb, na = window_means(rz, tau, cfg.window)
    if nb < cfg.min_side or na < cfg.min_side or not np.isfinite(rz[tau]):
        return "unclassified"
    if sigma is None:
        sigma = residual_scale(rz, tau) if cfg.sigma == "mad" else 1.0
    if not sigma > 0:
        sigma = 1.0
    bound = cfg.multiplier * sigma
    lso = abs(sb - sa) > bound
    ao = abs(rz[tau] - sa) > bound and abs(rz[tau] - sb) > bound
    if cfg.lso_first:
        return "LSO" if lso else ("AO" if ao else "unclassified")
    return "AO" if ao else ("LSO" if lso else "unclassified")


# ---------------------------------------------------------------------------
# Sign


class CollinearDummy(FitError):
    """The outlier dummy is constant or otherwise not identifiable."""


@dataclass(frozen=True)
class SignResult:
    sign: Literal["+", "-", "unknown"]
    delta_hat: float
    coefficients: np.ndarray
    residuals: np.ndarray


def _sign(x: float) -> Literal["+", "-", "unknown"]:
    if not np.isfinite(x) or x == 0:
        return "unknown"
    return "+" if x > 0 else "-"


def infer_sign(
    y: np.ndarray,
    design: np.ndarray | TrendCycleSpec,
    tau: int,
    kind: Literal["AO", "LSO"],
    h_frac: float = 0.75,
    n_subsets: int = 500,
    seed=0,
) -> SignResult:
    """Refit the trimmed trend regression with an outlier dummy.

    The LSO dummy is ``1{t >= tau}`` (``tau`` is the first shifted
    observation).  The AO dummy ``1{t = tau}`` fits its own point exactly,
    so that point always sits in the trimmed subset; the fit is therefore
    the trimmed fit of the other ``n - 1`` points with ``h - 1`` kept, and
    the dummy coefficient is the residual left at ``tau``.

    Returns the sign and size of the dummy coefficient and the residuals of
    the augmented fit.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    X = build_design(n, design) if isinstance(design, TrendCycleSpec) else np.asarray(design, dtype=float)
    if X.shape[0] != n:
        raise ValueError(f"design has {X.shape[0]} rows for {n} observations")
    if not 0 <= tau < n:
        raise CollinearDummy(f"tau={tau} outside the sample")
    h = int(math.floor(h_frac * n))
    if kind == "LSO":
        if tau == 0:
            raise CollinearDummy("a shift at the first observation is the intercept")
        dummy = (np.arange(n) >= tau).astype(float)
        fit = lte_fit(y, np.column_stack([X, dummy]), h, n_subsets, seed)
        delta = float(fit.coefficients[-1])
        return SignResult(_sign(delta), delta, fit.coefficients, fit.residuals)
    if kind == "AO":
        keep = np.arange(n) != tau
        fit = lte_fit(y[keep], X[keep], h - 1, n_subsets, seed)
        delta = float(y[tau] - X[tau] @ fit.coefficients)
        resid = y - X @ fit.coefficients
        resid[tau] = 0.0
        return SignResult(_sign(delta), delta, np.append(fit.coefficients, delta), resid)
    raise ValueError(f"kind must be AO or LSO, not {kind!r}")


# ---------------------------------------------------------------------------
# Reports


def annotate_report(
    report: OutlierReport,
    residuals: Panel,
    raw: Panel | None = None,
    spec: TrendCycleSpec | None = None,
    cfg: TypologyConfig = TypologyConfig(),
    n_subsets: int = 500,
    seed=0,
) -> OutlierReport:
    """Fill ``typology`` (and, given the raw panel and design, ``sign`` and
    ``delta_hat``) for every event in ``report``.

    Events on dates outside ``residuals`` stay unclassified.
    """
    row = {s: i for i, s in enumerate(residuals.series_ids)}
    col = {np.datetime64(d, "D"): j for j, d in enumerate(residuals.dates)}
    std_cache: dict[int, np.ndarray] = {}
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = seq.spawn(len(report.events))
    out: list[Event] = []
    for k, e in enumerate(report.events):
        i, j = row.get(e.series_id), col.get(np.datetime64(e.date, "D"))
        if i is None or j is None:
            out.append(replace(e, typology="unclassified", sign="unknown"))
            continue
        if i not in std_cache:
            std_cache[i] = standardize(residuals.values[i])
        typ = classify(std_cache[i], j, cfg)
        sign, delta = "unknown", float("nan")
        if raw is not None and spec is not None and typ in ("AO", "LSO"):
            try:
                res = infer_sign(raw.values[i], spec, j, typ, n_subsets=n_subsets, seed=np.random.default_rng(seeds[k]))
                sign, delta = res.sign, res.delta_hat
            except FitError as exc:
                logger.warning("sign inference failed for %s at %s: %s", e.series_id, e.date, exc)
        out.append(replace(e, typology=typ, sign=sign, delta_hat=delta))
    return OutlierReport(out)

"""Panel container, file ingestion, activity filters and differencing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

Layout = Literal["raw", "residual", "differenced"]


class PanelError(ValueError):
    """Raised for malformed panel input (bad file, spacing, shapes)."""


@dataclass(frozen=True)
class Panel:
    """A ``d x n`` block of equally spaced daily series.

    ``values[i, t]`` is series ``i`` on ``dates[t]``.  Dates are
    ``datetime64[D]`` (integer days since the epoch underneath).
    """

    values: np.ndarray
    series_ids: tuple[str, ...]
    dates: np.ndarray
    layout: Layout = "raw"

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise PanelError(f"values must be 2-D (d x n), got shape {values.shape}")
        ids = tuple(str(s) for s in self.series_ids)
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        if len(ids) != values.shape[0]:
            raise PanelError(f"{len(ids)} series ids for {values.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise PanelError("duplicate series ids")
        if dates.shape != (values.shape[1],):
            raise PanelError(f"{dates.shape[0]} dates for {values.shape[1]} columns")
        if dates.size > 1 and np.any(np.diff(dates).astype(int) != 1):
            raise PanelError("non-daily spacing")
        values.setflags(write=False)
        dates.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "series_ids", ids)
        object.__setattr__(self, "dates", dates)

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def select(self, rows: Sequence[int] | np.ndarray) -> "Panel":
        rows = np.asarray(rows, dtype=int)
        return Panel(
            self.values[rows],
            tuple(self.series_ids[r] for r in rows),
            self.dates,
            self.layout,
        )

    def window(self, start: int, stop: int) -> "Panel":
        """Columns ``start:stop`` as a new panel."""
        return Panel(self.values[:, start:stop], self.series_ids, self.dates[start:stop], self.layout)

    def with_values(self, values: np.ndarray, layout: Layout | None = None) -> "Panel":
        return Panel(values, self.series_ids, self.dates, layout or self.layout)

    def weekday(self) -> np.ndarray:
        """Monday=0 ... Sunday=6, computed from the day count."""
        days = self.dates.astype("int64")
        return (days + 3) % 7  # 1970-01-01 was a Thursday


def make_panel(
    values: np.ndarray,
    start: str = "2021-04-01",
    series_ids: Sequence[str] | None = None,
    layout: Layout = "raw",
) -> Panel:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    d, n = values.shape
    if series_ids is None:
        width = len(str(max(d - 1, 0)))
        series_ids = [f"s{i:0{width}d}" for i in range(d)]
    dates = np.datetime64(start, "D") + np.arange(n)
    return Panel(values, tuple(series_ids), dates, layout)


# ---------------------------------------------------------------------------
# I/O


def _read_table(path: Path) -> pd.DataFrame:
    suffix = path.suffix.lower()
    try:
        if suffix in (".parquet", ".pq"):
            return pd.read_parquet(path)
        return pd.read_csv(path, float_precision="round_trip", dtype={0: str})
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise PanelError(f"cannot parse {path}: {exc}") from exc


_LONG_ID = ("series_id", "id")


def _is_long(frame: pd.DataFrame) -> bool:
    cols = [c.lower() for c in frame.columns]
    return len(cols) == 3 and cols[0] == "date" and cols[1] in _LONG_ID and cols[2] == "value"


def load_panel(path: str | Path) -> Panel:
    """Read a wide (``date,<id1>,<id2>,...``) or long (``date,id,value``) file.

    Missing cells are carried forward; leading gaps take the first observed
    value.  Dates must be consecutive days once sorted.
    """
    path = Path(path)
    if not path.exists():
        raise PanelError(f"no such file: {path}")
    frame = _read_table(path)
    if frame.shape[1] < 2:
        raise PanelError("empty series set")
    frame = frame.rename(columns={frame.columns[0]: "date"})
    if _is_long(frame):
        frame.columns = ["date", "series_id", "value"]
        frame["series_id"] = frame["series_id"].astype(str)
        wide = frame.pivot(index="date", columns="series_id", values="value")
        ids = [str(c) for c in wide.columns]
        wide = wide.reset_index()
    else:
        ids = [str(c) for c in frame.columns[1:]]
        wide = frame
    if not ids:
        raise PanelError("empty series set")
    try:
        dates = pd.to_datetime(wide["date"], format="ISO8601").to_numpy().astype("datetime64[D]")
    except (ValueError, TypeError) as exc:
        raise PanelError(f"unparseable dates: {exc}") from exc
    order = np.argsort(dates, kind="stable")
    dates = dates[order]
    if dates.size > 1 and np.any(np.diff(dates).astype(int) != 1):
        raise PanelError("non-daily spacing")
    body = wide.drop(columns=["date"]).iloc[order]
    try:
        body = body.apply(pd.to_numeric)
    except ValueError as exc:
        raise PanelError(f"non-numeric value: {exc}") from exc
    body = body.ffill().bfill()
    values = body.to_numpy(dtype=float).T
    if np.isnan(values).any():
        bad = [ids[i] for i in np.where(np.isnan(values).all(axis=1))[0]]
        raise PanelError(f"series with no observations: {bad[:5]}")
    return Panel(values, tuple(ids), dates)


def write_panel(panel: Panel, path: str | Path) -> None:
    """Write the wide CSV layout; floats are written with round-trip precision."""
    frame = pd.DataFrame(panel.values.T, columns=list(panel.series_ids))
    frame.insert(0, "date", np.datetime_as_string(panel.dates, unit="D"))
    frame.to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# Activity filters


@dataclass(frozen=True)
class ActivityFilterConfig:
    min_operations: int = 103
    max_dormant_days: int = 200
    inactivity_cutoff_date: str | None = None
    closure_cutoff_date: str | None = None

    def __post_init__(self) -> None:
        if self.min_operations < 1 or self.max_dormant_days < 1:
            raise ValueError("min_operations and max_dormant_days must be >= 1")


def count_operations(values: np.ndarray) -> np.ndarray:
    """Number of days whose balance differs from the previous day, per row."""
    values = np.atleast_2d(values)
    return (np.diff(values, axis=1) != 0).sum(axis=1)


def longest_dormant_run(values: np.ndarray) -> np.ndarray:
    """Longest run of consecutive unchanged days (day-over-day diff == 0), per row."""
    values = np.atleast_2d(values)
    unchanged = np.diff(values, axis=1) == 0
    out = np.zeros(values.shape[0], dtype=int)
    for i, row in enumerate(unchanged):
        if not row.any():
            continue
        padded = np.concatenate(([0], row.astype(np.int8), [0]))
        edges = np.diff(padded)
        starts = np.where(edges == 1)[0]
        stops = np.where(edges == -1)[0]
        out[i] = int((stops - starts).max())
    return out


def _last_change_index(values: np.ndarray) -> np.ndarray:
    # index t of the last day with values[t] != values[t-1]; -1 if none
    changed = np.diff(values, axis=1) != 0
    has = changed.any(axis=1)
    last = changed.shape[1] - np.argmax(changed[:, ::-1], axis=1)
    return np.where(has, last, -1)


def apply_activity_filters(
    panel: Panel, cfg: ActivityFilterConfig = ActivityFilterConfig()
) -> tuple[Panel, list[tuple[str, str]]]:
    """Drop low-activity series; returns the survivors and ``(series_id, rule)`` log.

    Rules are checked in order ``min_operations``, ``dormant``, ``inactive``,
    ``closed``; the first that fires is logged.  The two cutoff rules use
    "no balance change after the cutoff date" as their proxy.
    """
    values = panel.values
    ops = count_operations(values)
    dormant = longest_dormant_run(values)
    last = _last_change_index(values)
    last_date = np.where(last >= 0, panel.dates[np.clip(last, 0, None)], panel.dates[0] - 1)

    keep: list[int] = []
    log: list[tuple[str, str]] = []
    for i, sid in enumerate(panel.series_ids):
        rule = None
        if ops[i] < cfg.min_operations:
            rule = "min_operations"
        elif dormant[i] >= cfg.max_dormant_days:
            rule = "dormant"
        elif cfg.inactivity_cutoff_date and last_date[i] <= np.datetime64(cfg.inactivity_cutoff_date, "D"):
            rule = "inactive"
        elif cfg.closure_cutoff_date and last_date[i] < np.datetime64(cfg.closure_cutoff_date, "D"):
            rule = "closed"
        if rule is None:
            keep.append(i)
        else:
            log.append((sid, rule))
    logger.info("activity filters kept %d of %d series", len(keep), panel.d)
    return panel.select(keep), log


def write_exclusion_log(log: Sequence[tuple[str, str]], path: str | Path) -> None:
    pd.DataFrame(list(log), columns=["series_id", "rule"]).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Differencing


def first_difference(panel: Panel) -> Panel:
    """``out[:, t] = in[:, t+1] - in[:, t]``, dated at ``t+1``."""
    if panel.n < 2:
        raise PanelError("first difference needs n >= 2")
    return Panel(np.diff(panel.values, axis=1), panel.series_ids, panel.dates[1:], "differenced")


def integrate(diff: Panel, first: np.ndarray, layout: Layout = "raw") -> Panel:
    """Inverse of :func:`first_difference` given the first column of the source."""
    first = np.asarray(first, dtype=float).reshape(-1, 1)
    values = np.concatenate([first, first + np.cumsum(diff.values, axis=1)], axis=1)
    dates = np.concatenate([[diff.dates[0] - 1], diff.dates])
    return Panel(values, diff.series_ids, dates, layout)

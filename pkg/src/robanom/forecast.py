"""Forecast-based detection: robust HAR regression, a trimmed-loss network,
prediction-error scoring and frozen real-time scoring."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .distance import ScoreMatrix, zscore_pooled
from .panel import Panel
from .scatter import MAD_NORMAL, mad
from .trend import FitError, RobustFit, TrendCycleSpec, build_design, design_row, lte_fit, series_seeds

logger = logging.getLogger(__name__)

LAGS = (1, 7, 30)
HISTORY = 30


# ---------------------------------------------------------------------------
# Features


def har_features(r: np.ndarray, t: int) -> np.ndarray:
    """``(r[t-1], mean r[t-7:t], mean r[t-30:t])`` for a 0-based index ``t >= 30``."""
    r = np.asarray(r, dtype=float)
    if t < HISTORY or t > r.size:
        raise ValueError(f"need 30 observations of history before index {t}")
    return np.array([r[t - 1], r[t - 7 : t].mean(), r[t - 30 : t].mean()])


def har_design(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and targets for ``t = 30 .. n-1`` (rolling means via cumulative sums)."""
    r = np.asarray(r, dtype=float)
    n = r.size
    if n <= HISTORY:
        raise ValueError(f"series of length {n} has no usable HAR rows")
    cs = np.concatenate(([0.0], np.cumsum(r)))
    t = np.arange(HISTORY, n)
    X = np.column_stack([r[t - 1], (cs[t] - cs[t - 7]) / 7.0, (cs[t] - cs[t - 30]) / 30.0])
    return X, r[HISTORY:]


def _design_batch(R: np.ndarray) -> np.ndarray:
    # (d, m, 3) feature tensor for a d x n block
    cs = np.concatenate([np.zeros((R.shape[0], 1)), np.cumsum(R, axis=1)], axis=1)
    t = np.arange(HISTORY, R.shape[1])
    return np.stack([R[:, t - 1], (cs[:, t] - cs[:, t - 7]) / 7.0, (cs[:, t] - cs[:, t - 30]) / 30.0], axis=-1)


# ---------------------------------------------------------------------------
# Robust HAR


@dataclass(frozen=True)
class HarModel:
    """``r_t = phi_1 r_{t-1} + phi_7 rbar_7 + phi_30 rbar_30 + e_t`` (no intercept)."""

    phi: np.ndarray
    scale: float
    ar1: bool = False

    def predict_features(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.phi

    def forecast(self, r: np.ndarray) -> np.ndarray:
        """One-step forecasts; entries before index 30 are NaN."""
        X, _ = har_design(r)
        out = np.full(np.asarray(r).size, np.nan)
        out[HISTORY:] = self.predict_features(X)
        return out


def robhar_fit(
    r: np.ndarray, ar1: bool = False, n_subsets: int = 500, seed=0, h_frac: float = 0.75, csteps: int = 1
) -> HarModel:
    """Trimmed-squares HAR fit; ``ar1`` restricts ``phi_7 = phi_30 = 0``."""
    X, y = har_design(r)
    cols = X[:, :1] if ar1 else X
    m = y.size
    if m < 3 * cols.shape[1]:
        raise FitError("too few HAR rows")
    fit = lte_fit(y, cols, h=int(math.floor(h_frac * m)), n_subsets=n_subsets, seed=seed, csteps=csteps)
    phi = np.zeros(3)
    phi[: cols.shape[1]] = fit.coefficients
    scale = float(mad(fit.residuals, normalize=True))
    return HarModel(phi, scale, ar1)


def robhar_fit_panel(R: Panel, ar1: bool = False, n_subsets: int = 500, seed=0, csteps: int = 1) -> list[HarModel]:
    seeds = series_seeds(seed, R.d)
    models = []
    for i in range(R.d):
        models.append(robhar_fit(R.values[i], ar1, n_subsets, np.random.default_rng(seeds[i]), csteps=csteps))
    return models


# ---------------------------------------------------------------------------
# Trimmed-loss network


@dataclass
class NeuralHarModel:
    """``f(v) = w2' max(0, W1 v + b1) + b2`` on MAD-standardized HAR features."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    trim: float = 0.75
    series_scales: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.W1.ndim != 2 or self.W1.shape[1] != 3 or self.W1.shape[0] < 1:
            raise ValueError("W1 must be l x 3 with l >= 1")

    @property
    def width(self) -> int:
        return self.W1.shape[0]

    def predict_features(self, V: np.ndarray) -> np.ndarray:
        H = np.maximum(V @ self.W1.T + self.b1, 0.0)
        return H @ self.w2 + self.b2

    def forecast(self, r: np.ndarray, scale: float | None = None) -> np.ndarray:
        """One-step forecasts for one series in its own units (NaN before index 30)."""
        r = np.asarray(r, dtype=float)
        s = _robust_scale(r) if scale is None else scale
        X, _ = har_design(r / s)
        out = np.full(r.size, np.nan)
        out[HISTORY:] = s * self.predict_features(X)
        return out

    def trimmed_loss(self, V: np.ndarray, y: np.ndarray) -> float:
        e = (y - self.predict_features(V)) ** 2
        return _trimmed_mean(e, self.trim)


def _robust_scale(r: np.ndarray) -> float:
    s = float(mad(r[np.isfinite(r)], normalize=True))
    if s > 0:
        return s
    sd = float(np.nanstd(r))
    return sd if sd > 0 else 1.0


def _trimmed_mean(e: np.ndarray, trim: float) -> float:
    k = max(1, int(math.floor(trim * e.size)))
    return float(np.partition(e, k - 1)[:k].mean())


class TrainingDivergence(FloatingPointError):
    pass


def robnhar_fit(
    R: Panel | np.ndarray,
    width: int = 10,
    trim: float = 0.75,
    epochs: int = 100,
    batch: int = 1024,
    lr: float = 1e-3,
    seed: int = 0,
    train_sample: int | None = None,
) -> NeuralHarModel:
    """Pooled training of the HAR network with the trimmed squared loss.

    Each series is divided by its normalized MAD before its rows are pooled.
    Adam updates; on every mini-batch only the ``floor(trim * batch)``
    smallest squared errors contribute to the gradient.
    """
    vals = R.values if isinstance(R, Panel) else np.atleast_2d(np.asarray(R, dtype=float))
    rng = np.random.default_rng(seed)
    if train_sample is not None and train_sample < vals.shape[0]:
        vals = vals[np.sort(rng.choice(vals.shape[0], train_sample, replace=False))]
    scales = np.array([_robust_scale(v) for v in vals])
    Z = vals / scales[:, None]
    feats = _design_batch(Z)
    V = feats.reshape(-1, 3)
    y = Z[:, HISTORY:].reshape(-1)
    ok = np.isfinite(V).all(axis=1) & np.isfinite(y)
    V, y = V[ok], y[ok]
    n_params = 4 * width + 1
    if y.size < 10 * n_params:
        raise ValueError(f"{y.size} training rows for {n_params} parameters")

    lim1 = math.sqrt(6.0 / 3)
    lim2 = math.sqrt(6.0 / width)
    params = [
        rng.uniform(-lim1, lim1, (width, 3)),
        np.zeros(width),
        rng.uniform(-lim2, lim2, width),
        np.zeros(1),
    ]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1_, b2_, eps = 0.9, 0.999, 1e-8
    keep = max(1, int(math.floor(trim * min(batch, y.size))))

    def full_loss() -> float:
        H = np.maximum(V @ params[0].T + params[1], 0.0)
        return _trimmed_mean((y - H @ params[2] - params[3][0]) ** 2, trim)

    losses = [full_loss()]
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(y.size)
        for start in range(0, y.size, batch):
            idx = order[start : start + batch]
            Vb, yb = V[idx], y[idx]
            A = Vb @ params[0].T + params[1]
            H = np.maximum(A, 0.0)
            e = H @ params[2] + params[3][0] - yb
            k = keep if idx.size == batch else max(1, int(math.floor(trim * idx.size)))
            sel = np.argpartition(e * e, k - 1)[:k]
            g = 2.0 * e[sel] / k
            Hs, As, Vs = H[sel], A[sel], Vb[sel]
            gw2 = Hs.T @ g
            gb2 = np.array([g.sum()])
            gA = np.outer(g, params[2]) * (As > 0)
            gW1 = gA.T @ Vs
            gb1 = gA.sum(axis=0)
            step += 1
            for j, gr in enumerate((gW1, gb1, gw2, gb2)):
                m[j] = b1_ * m[j] + (1 - b1_) * gr
                v[j] = b2_ * v[j] + (1 - b2_) * gr * gr
                mh = m[j] / (1 - b1_**step)
                vh = v[j] / (1 - b2_**step)
                params[j] = params[j] - lr * mh / (np.sqrt(vh) + eps)
        loss = full_loss()
        if not math.isfinite(loss) or not all(np.isfinite(p).all() for p in params):
            raise TrainingDivergence(f"non-finite loss at epoch {epoch + 1} (last finite {losses[-1]:.4g})")
        losses.append(loss)
    logger.info("NHAR trimmed loss %.4g -> %.4g over %d epochs", losses[0], losses[-1], epochs)
    return NeuralHarModel(params[0], params[1], params[2], float(params[3][0]), trim, scales, losses, seed)


# ---------------------------------------------------------------------------
# Prediction errors and scoring


def prediction_errors(model: HarModel | NeuralHarModel, r: np.ndarray) -> np.ndarray:
    """Squared one-step errors; NaN where fewer than 30 lags exist."""
    r = np.asarray(r, dtype=float)
    return (r - model.forecast(r)) ** 2


def error_scores(
    E2: np.ndarray, ids, dates, level: Literal["raw", "differenced"] = "raw", normalize: bool = False
) -> tuple[ScoreMatrix, np.ndarray]:
    """Squared errors, optionally normalized per series, and their pooled z-scores.

    With ``normalize`` each row is divided by the squared normalized MAD of
    the signed errors (recovered from ``E2``) so that series with different
    volatility share one threshold.  Returns the scores and the per-series
    variances used (ones when not normalizing).
    """
    if not normalize:
        c = np.asarray(E2, dtype=float)
        return ScoreMatrix(zscore_pooled(c), c, tuple(ids), np.asarray(dates), level), np.ones(c.shape[0])
    e = np.sqrt(E2)
    var = np.empty(E2.shape[0])
    for i in range(E2.shape[0]):
        row = e[i][np.isfinite(e[i])]
        # median of |e| equals the MAD of a zero-centred symmetric error
        s = MAD_NORMAL * float(np.median(row)) if row.size else 0.0
        var[i] = s * s if s > 0 else (float(np.mean(row**2)) if row.size and np.mean(row**2) > 0 else 1.0)
    c = E2 / var[:, None]
    return ScoreMatrix(zscore_pooled(c), c, tuple(ids), np.asarray(dates), level), var


def forecast_scores(
    R: Panel,
    model: Literal["har", "ar1", "nhar"] = "har",
    seed=0,
    n_subsets: int = 500,
    nhar: NeuralHarModel | None = None,
    normalize: bool = False,
    csteps: int = 1,
    **nhar_kwargs,
) -> tuple[ScoreMatrix, list]:
    """Fit the chosen forecaster and score every cell of ``R`` by its squared error.

    ``normalize`` divides each series' squared errors by its robust error
    variance before pooling; by default the squared errors are pooled as is.
    """
    if model in ("har", "ar1"):
        models = robhar_fit_panel(R, ar1=model == "ar1", n_subsets=n_subsets, seed=seed, csteps=csteps)
        E2 = np.vstack([prediction_errors(mo, R.values[i]) for i, mo in enumerate(models)])
    elif model == "nhar":
        net = nhar or robnhar_fit(R, seed=seed if isinstance(seed, int) else 0, **nhar_kwargs)
        models = [net]
        E2 = np.vstack([prediction_errors(net, R.values[i]) for i in range(R.d)])
    else:
        raise ValueError(f"unknown forecaster {model!r}")
    level = "differenced" if R.layout == "differenced" else "raw"
    scores, _ = error_scores(E2, R.series_ids, R.dates, level, normalize)
    return scores, models


# ---------------------------------------------------------------------------
# Real-time scoring with frozen models


@dataclass
class RealtimeState:
    """Frozen trend coefficients and forecaster plus a rolling residual buffer.

    ``t_next`` is the 1-based design index of the next observation.
    """

    beta: np.ndarray
    spec: TrendCycleSpec
    forecaster: list[HarModel] | NeuralHarModel
    buffer: np.ndarray
    variances: np.ndarray
    z_mean: float
    z_std: float
    kappa: float
    t_next: int
    series_ids: tuple[str, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        if self.buffer.shape[1] < HISTORY:
            raise ValueError("residual buffer must hold at least 30 observations")

    def _forecast_next(self) -> np.ndarray:
        B = self.buffer[:, -HISTORY:]
        V = np.column_stack([B[:, -1], B[:, -7:].mean(axis=1), B.mean(axis=1)])
        if isinstance(self.forecaster, NeuralHarModel):
            s = self.forecaster.series_scales
            return s * self.forecaster.predict_features(V / s[:, None])
        phi = np.vstack([m.phi for m in self.forecaster])
        return (V * phi).sum(axis=1)


def realtime_init(
    Y: Panel,
    T: int,
    spec: TrendCycleSpec,
    forecaster: Literal["har", "nhar"] = "har",
    kappa_k: float = 0.9975,
    seed: int = 0,
    n_subsets: int = 500,
    normalize: bool = False,
    csteps: int = 1,
    **nhar_kwargs,
) -> tuple[RealtimeState, ScoreMatrix]:
    """Fit trends and the forecaster on the first ``T`` columns of ``Y``.

    Returns the frozen state and the in-sample scores over those columns;
    ``kappa`` is the ``kappa_k`` quantile of the in-sample z-scores.
    """
    from .trend import fit_panel

    train = Y.window(0, T)
    pf = fit_panel(train, spec, n_subsets=n_subsets, seed=seed, csteps=csteps)
    if pf.failures:
        raise FitError(f"trend fit failed for {len(pf.failures)} series")
    R = pf.residuals
    if forecaster == "har":
        fc = robhar_fit_panel(R, n_subsets=n_subsets, seed=seed, csteps=csteps)
        E2 = np.vstack([prediction_errors(m, R.values[i]) for i, m in enumerate(fc)])
    else:
        net = robnhar_fit(R, seed=seed, **nhar_kwargs)
        net.series_scales = np.array([_robust_scale(v) for v in R.values])
        fc = net
        E2 = np.vstack([prediction_errors(net, R.values[i]) for i in range(R.d)])
    scores, var = error_scores(E2, R.series_ids, R.dates, normalize=normalize)
    c = scores.raw[np.isfinite(scores.raw)]
    kappa = float(np.quantile(scores.finite(), kappa_k))
    state = RealtimeState(
        pf.coefficient_matrix(), spec, fc, R.values[:, -HISTORY:].copy(), var,
        float(c.mean()), float(c.std()), kappa, T + 1, Y.series_ids, seed,
    )
    return state, scores


def realtime_step(state: RealtimeState, y_next: np.ndarray) -> tuple[np.ndarray, np.ndarray, RealtimeState]:
    """Score one new observation per series without refitting.

    Returns boolean flags, the z-scores, and the advanced state.  Series with
    a missing observation are not flagged and their buffer repeats the
    forecast.
    """
    y_next = np.asarray(y_next, dtype=float)
    if y_next.shape != (state.beta.shape[0],):
        raise ValueError(f"expected {state.beta.shape[0]} observations, got {y_next.shape}")
    x = design_row(state.t_next, state.spec)
    r_hat = y_next - state.beta @ x
    r_tilde = state._forecast_next()
    missing = ~np.isfinite(r_hat)
    if missing.any():
        logger.warning("%d series missing at t=%d; skipped", int(missing.sum()), state.t_next)
        r_hat = np.where(missing, r_tilde, r_hat)
    e2 = (r_hat - r_tilde) ** 2
    z = (e2 / state.variances - state.z_mean) / state.z_std
    z[missing] = np.nan
    flags = np.nan_to_num(z, nan=-np.inf) > state.kappa
    new = RealtimeState(
        state.beta, state.spec, state.forecaster,
        np.concatenate([state.buffer[:, 1:], r_hat[:, None]], axis=1),
        state.variances, state.z_mean, state.z_std, state.kappa, state.t_next + 1, state.series_ids, state.seed,
    )
    return flags, z, new


# ---------------------------------------------------------------------------
# Serialization: magic, version, header length, JSON header, float64 blobs

MAGIC = b"RBAN"
VERSION = 1


def _pack(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    meta, blobs, offset = {}, [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        meta[name] = {"shape": list(a.shape), "offset": offset}
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = dict(header, arrays=meta)
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(raw)) + raw)
        for b in blobs:
            fh.write(b)


def _unpack(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a model state file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported state version {version}")
    header = json.loads(data[12 : 12 + hlen])
    body = data[12 + hlen :]
    arrays = {}
    for name, m in header["arrays"].items():
        count = int(np.prod(m["shape"])) if m["shape"] else 1
        arrays[name] = np.frombuffer(body, "<f8", count, m["offset"]).reshape(m["shape"]).copy()
    return header, arrays


def save_state(state: RealtimeState, path) -> None:
    arrays = {"beta": state.beta, "buffer": state.buffer, "variances": state.variances}
    header = {
        "kind": "realtime",
        "trend_order": state.spec.trend_order,
        "frequencies": list(state.spec.frequencies),
        "z_mean": state.z_mean,
        "z_std": state.z_std,
        "kappa": state.kappa,
        "t_next": state.t_next,
        "series_ids": list(state.series_ids),
        "seed": state.seed,
    }
    if isinstance(state.forecaster, NeuralHarModel):
        f = state.forecaster
        header.update(forecaster="nhar", trim=f.trim, nhar_seed=f.seed)
        arrays.update(W1=f.W1, b1=f.b1, w2=f.w2, b2=np.array([f.b2]), scales=f.series_scales)
    else:
        header.update(forecaster="har", ar1=[m.ar1 for m in state.forecaster])
        arrays.update(phi=np.vstack([m.phi for m in state.forecaster]), har_scale=np.array([m.scale for m in state.forecaster]))
    _pack(path, header, arrays)


def load_state(path) -> RealtimeState:
    h, a = _unpack(path)
    if h.get("kind") != "realtime":
        raise ValueError(f"{path}: not a real-time state")
    spec = TrendCycleSpec(h["trend_order"], tuple(h["frequencies"]))
    if h["forecaster"] == "nhar":
        fc = NeuralHarModel(a["W1"], a["b1"], a["w2"], float(a["b2"][0]), h["trim"], a["scales"], seed=h["nhar_seed"])
    else:
        fc = [HarModel(phi, float(s), bool(ar)) for phi, s, ar in zip(a["phi"], a["har_scale"], h["ar1"])]
    return RealtimeState(
        a["beta"], spec, fc, a["buffer"], a["variances"], h["z_mean"], h["z_std"], h["kappa"], h["t_next"],
        tuple(h["series_ids"]), h["seed"],
    )

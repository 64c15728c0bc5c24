"""Per-minute input-TPS forecasting.

ARIMA(p, d, q) models are estimated with the two-stage Hannan-Rissanen
procedure (a long autoregression supplies innovation estimates, then one
least-squares regression on lagged values and lagged innovations), and the
order is picked by AIC over a small grid. A trailing-window moving average is
kept as a baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .domain import FleetSimError

HORIZON = 60
DEFAULT_ORDERS: Tuple[Tuple[int, int, int], ...] = tuple(product(range(4), range(2), range(2)))


class SeriesTooShort(FleetSimError):
    pass


class AllZeroActuals(FleetSimError):
    pass


@dataclass
class ArimaFit:
    order: Tuple[int, int, int]
    const: float
    ar: np.ndarray
    ma: np.ndarray
    # most recent in-sample innovations, oldest first (len == q)
    last_innovations: np.ndarray
    aic: float
    fallback: bool = False

    @property
    def p(self) -> int:
        return self.order[0]

    @property
    def d(self) -> int:
        return self.order[1]

    @property
    def q(self) -> int:
        return self.order[2]


@dataclass
class Forecast:
    values: np.ndarray
    buffer: float = 0.0

    @property
    def peak(self) -> float:
        return float(self.values.max()) if len(self.values) else 0.0

    def demand(self) -> float:
        """Peak forecast plus headroom; what the capacity planner provisions for."""
        return self.peak + self.buffer

    def at(self, step: int) -> float:
        if not len(self.values):
            return 0.0
        return float(self.values[min(max(step, 0), len(self.values) - 1)])


def _lagmatrix(y: np.ndarray, lags: int, rows: range) -> np.ndarray:
    return np.array([[y[t - i] for i in range(1, lags + 1)] for t in rows]).reshape(len(rows), lags)


def _stationary(ar: np.ndarray) -> bool:
    if len(ar) == 0:
        return True
    roots = np.roots(np.r_[1.0, -ar])
    return bool(np.all(np.abs(roots) < 1.0 - 1e-6))


def _invertible(ma: np.ndarray) -> bool:
    if len(ma) == 0:
        return True
    roots = np.roots(np.r_[1.0, ma])
    return bool(np.all(np.abs(roots) < 1.0 - 1e-6))


def _aic(k: int, rss: float, n: int, floor: float) -> float:
    return 2 * k + n * float(np.log(max(rss / n, floor)))


def _fit_order(y: np.ndarray, p: int, q: int, floor: float) -> Optional[ArimaFit]:
    n = len(y)
    if np.var(y) <= floor:
        # constant after differencing: the mean model is exact
        return ArimaFit((p, 0, q), float(y.mean()), np.zeros(0), np.zeros(0), np.zeros(0),
                        _aic(1, 0.0, n, floor), fallback=True)
    innov = None
    start = p
    if q:
        m = min(max(p + q + 2, 6), n // 3)
        if m < 1:
            return None
        rows = range(m, n)
        X = np.column_stack([np.ones(len(rows)), _lagmatrix(y, m, rows)])
        coef, *_ = np.linalg.lstsq(X, y[m:], rcond=None)
        innov = np.full(n, np.nan)
        innov[m:] = y[m:] - X @ coef
        start = max(p, m + q)
    rows = range(start, n)
    if len(rows) <= p + q + 1:
        return None
    cols = [np.ones(len(rows))]
    if p:
        cols.append(_lagmatrix(y, p, rows))
    if q:
        cols.append(_lagmatrix(innov, q, rows))
    X = np.column_stack(cols)
    target = y[start:]
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ coef
    rss = float(resid @ resid)
    ar, ma = coef[1:1 + p], coef[1 + p:]
    if not (_stationary(ar) and _invertible(ma)):
        return None
    last = resid[-q:] if q else np.zeros(0)
    return ArimaFit((p, 0, q), float(coef[0]), ar, ma, last, _aic(p + q + 1, rss, len(rows), floor))


def fit_arima(series: Sequence[float], orders: Iterable[Tuple[int, int, int]] = DEFAULT_ORDERS,
              min_length: int = 60) -> ArimaFit:
    """Fit every candidate order and keep the lowest AIC (first wins on ties).

    Non-stationary or non-invertible estimates are discarded; if nothing
    survives, the mean of the series is used.
    """
    x = np.asarray(series, dtype=float)
    if len(x) < min_length:
        raise SeriesTooShort(f"need at least {min_length} samples, got {len(x)}")
    floor = 1e-12 * max(float(np.mean(x * x)), 1e-12)
    best: Optional[ArimaFit] = None
    for p, d, q in orders:
        y = np.diff(x, n=d) if d else x
        fit = _fit_order(y, p, q, floor)
        if fit is None:
            continue
        fit.order = (fit.p if not fit.fallback else 0, d, fit.q if not fit.fallback else 0)
        if best is None or fit.aic < best.aic:
            best = fit
    if best is None:
        best = ArimaFit((0, 0, 0), float(x.mean()), np.zeros(0), np.zeros(0), np.zeros(0),
                        float("nan"), fallback=True)
    return best


def forecast_next_hour(fit: ArimaFit, series: Sequence[float], horizon: int = HORIZON) -> Forecast:
    """Recursive multi-step forecast, integrated back to levels and clipped at 0."""
    x = np.asarray(series, dtype=float)
    d = fit.d
    y = list(np.diff(x, n=d) if d else x)
    innov = list(fit.last_innovations)
    out = []
    for _ in range(horizon):
        v = fit.const
        for i, phi in enumerate(fit.ar, start=1):
            v += phi * y[-i]
        for j, theta in enumerate(fit.ma, start=1):
            if j <= len(innov):
                v += theta * innov[-j]
        y.append(v)
        innov.append(0.0)
        out.append(v)
    pred = np.array(out)
    if d:
        level = x[-1]
        pred = level + np.cumsum(pred)
    return Forecast(np.clip(pred, 0.0, None))


def compute_buffer(niw_tps_last_hour: Sequence[float], fraction: float = 0.10) -> float:
    """Headroom for bursts and deferred work: a fraction of recent mean NIW input TPS."""
    v = np.asarray(niw_tps_last_hour, dtype=float)
    if not len(v):
        return 0.0
    return fraction * float(v.mean())


def moving_average_forecast(series: Sequence[float], window: int, horizon: int = HORIZON) -> Forecast:
    x = np.asarray(series, dtype=float)
    if window < 1 or len(x) < window:
        raise SeriesTooShort(f"need at least {window} samples, got {len(x)}")
    return Forecast(np.full(horizon, float(x[-window:].mean())))


def mape(predicted: Sequence[float], actual: Sequence[float], return_excluded: bool = False):
    """Mean absolute percentage error over samples with a positive actual value."""
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    keep = a > 0
    if not keep.any():
        raise AllZeroActuals("no positive actual values")
    value = 100.0 * float(np.mean(np.abs(p[keep] - a[keep]) / a[keep]))
    if return_excluded:
        return value, int((~keep).sum())
    return value


class Forecaster:
    """Stateless helper choosing between ARIMA and the moving-average baseline."""

    def __init__(self, method: str = "arima", arima_window: int = 60, ma_window: int = 15,
                 orders: Iterable[Tuple[int, int, int]] = DEFAULT_ORDERS):
        if method not in ("arima", "ma"):
            raise ValueError(f"unknown forecaster {method!r}")
        self.method = method
        self.arima_window = arima_window
        self.ma_window = ma_window
        self.orders = tuple(orders)

    def predict(self, history: Sequence[float], horizon: int = HORIZON) -> Forecast:
        h = np.asarray(history, dtype=float)
        if self.method == "ma":
            window = min(self.ma_window, len(h))
            if window == 0:
                return Forecast(np.zeros(horizon))
            return moving_average_forecast(h, window, horizon)
        tail = h[-self.arima_window:]
        if len(tail) < self.arima_window:
            # not enough history yet: fall back to the baseline
            return moving_average_forecast(tail, len(tail), horizon) if len(tail) else Forecast(np.zeros(horizon))
        fit = fit_arima(tail, self.orders, min_length=self.arima_window)
        return forecast_next_hour(fit, tail, horizon)

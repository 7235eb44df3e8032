"""Forecast and classification evaluation metrics.

Point metrics (mse, mae), the percentage/scaled family (smape, mase, owa
against a seasonally adjusted naive reference), and accuracy.  Everything
here is pure and stateless; report serialization lives with the harness.

MASE has two scaling conventions, selected by ``scale_on``:

* "insample" (default): the denominator is the mean absolute seasonal
  difference of the *history* the forecast was made from.
* "forecast": the denominator uses the target window itself,
  mean_{j=s+1..H} |Y_j - Y_{j-s}| — degenerate when H <= s, kept because
  some definitions write it this way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SEASONALITY_Z = 1.645  # one-sided 90% normal quantile


class MetricError(ValueError):
    """Empty input or degenerate denominator."""


@dataclass
class MetricReport:
    task: str
    values: dict[str, float]
    per_horizon: dict[str, list[float]] = field(default_factory=dict)
    sample_count: int = 0
    config_digest: str = ""

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise MetricError(f"metric {k} is not finite: {v}")


def point_metrics(y: np.ndarray, y_hat: np.ndarray) -> tuple[float, float]:
    """(mse, mae) over one forecast window."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise MetricError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise MetricError("empty input")
    diff = y - y_hat
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def smape(y: np.ndarray, y_hat: np.ndarray) -> float:
    """(200/H) * sum |y - y_hat| / (|y| + |y_hat|), denominator floored at 1e-8."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise MetricError("smape needs equal nonempty vectors")
    den = np.maximum(np.abs(y) + np.abs(y_hat), 1e-8)
    return float(200.0 * np.mean(np.abs(y - y_hat) / den))


def mase(
    y: np.ndarray,
    y_hat: np.ndarray,
    insample: np.ndarray,
    s: int,
    scale_on: str = "insample",
) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    insample = np.asarray(insample, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise MetricError("mase needs equal nonempty vectors")
    if s < 1:
        raise MetricError("seasonality s must be >= 1")
    if scale_on == "insample":
        if insample.size <= s:
            raise MetricError(f"insample of length {insample.size} too short for s={s}")
        scale = float(np.mean(np.abs(insample[s:] - insample[:-s])))
    elif scale_on == "forecast":
        if y.size <= s:
            raise MetricError(f"forecast window of length {y.size} too short for s={s}")
        scale = float(np.mean(np.abs(y[s:] - y[:-s])))
    else:
        raise MetricError(f"unknown scale_on {scale_on!r}")
    if scale <= 0.0:
        raise MetricError("constant seasonal series: mase scale is zero")
    return float(np.mean(np.abs(y - y_hat)) / scale)


def m4_metrics(
    y: np.ndarray,
    y_hat: np.ndarray,
    insample: np.ndarray,
    s: int,
    naive2_forecast: np.ndarray,
    scale_on: str = "insample",
) -> tuple[float, float, float]:
    """(smape, mase, owa) with owa = ((smape/smape_ref) + (mase/mase_ref)) / 2,
    the reference being the seasonally adjusted naive forecast."""
    sm = smape(y, y_hat)
    ma = mase(y, y_hat, insample, s, scale_on=scale_on)
    sm_ref = smape(y, naive2_forecast)
    ma_ref = mase(y, naive2_forecast, insample, s, scale_on=scale_on)
    if sm_ref <= 0.0 or ma_ref <= 0.0:
        raise MetricError("reference forecast is perfect; owa undefined")
    return sm, ma, float(0.5 * (sm / sm_ref + ma / ma_ref))


def _circular_acf(x: np.ndarray, lag: int) -> float:
    d = x - x.mean()
    denom = float(d @ d)
    if denom <= 0.0:
        return 0.0
    return float(d @ np.roll(d, -lag)) / denom


def seasonal_indices(insample: np.ndarray, s: int) -> np.ndarray:
    """Multiplicative seasonal indices via classical decomposition.

    Trend is a centered moving average of window s (a 2 x s average when s
    is even); detrended values x_t / trend_t are averaged per phase and the
    indices are normalized to mean 1.
    """
    t = insample.size
    if s % 2 == 0:
        kernel = np.concatenate(([0.5], np.ones(s - 1), [0.5])) / s
    else:
        kernel = np.ones(s) / s
    half = kernel.size // 2
    trend = np.convolve(insample, kernel, mode="valid")  # centered at half..t-half-1
    ratios: list[list[float]] = [[] for _ in range(s)]
    for i, tr in enumerate(trend):
        pos = i + half
        if tr != 0.0:
            ratios[pos % s].append(insample[pos] / tr)
    idx = np.array([np.mean(r) if r else 1.0 for r in ratios])
    mean = idx.mean()
    if mean <= 0.0:
        raise MetricError("degenerate seasonal indices")
    return idx / mean


def naive2(insample: np.ndarray, horizon: int, s: int) -> np.ndarray:
    """Seasonally adjusted naive forecast.

    Step by step:
      1. If s == 1, the series is too short (T < 2s), any value is
         non-positive (multiplicative adjustment undefined), or the
         seasonality test fails, repeat the last observed value H times.
      2. Seasonality test: circular autocorrelation of the mean-centered
         series at lag s must reach 1.645 / sqrt(T).  (The circular form
         keeps an exactly periodic series at autocorrelation 1 regardless
         of length, which the windowed form cannot.)
      3. Otherwise compute multiplicative seasonal indices (see
         seasonal_indices), deseasonalize x*_t = x_t / index[t mod s],
         and forecast x*_T (the last deseasonalized level) re-seasonalized:
         y_h = x*_T * index[(T + h - 1) mod s].
    """
    insample = np.asarray(insample, dtype=np.float64)
    if horizon < 1:
        raise MetricError("horizon must be >= 1")
    if s < 1:
        raise MetricError("seasonality s must be >= 1")
    if insample.size < max(s, 3):
        raise MetricError(f"insample of length {insample.size} too short")
    t = insample.size
    seasonal = (
        s > 1
        and t >= 2 * s
        and np.all(insample > 0.0)
        and _circular_acf(insample, s) >= SEASONALITY_Z / np.sqrt(t)
    )
    if not seasonal:
        return np.full(horizon, insample[-1])
    idx = seasonal_indices(insample, s)
    deseason_last = insample[-1] / idx[(t - 1) % s]
    return np.array([deseason_last * idx[(t + h) % s] for h in range(horizon)])


def accuracy(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise MetricError("label vectors must have equal length")
    if pred.size == 0:
        raise MetricError("empty input")
    return float(np.mean(pred == true))

"""Dataset ingestion, synthetic series, windowing and chronological splits.

CSV convention: optional header row, optional leading timestamp column,
then numeric feature columns (one per channel).  Windowing is channel
independent: every variate becomes its own stream of (input, target)
samples sharing the time axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Malformed file or impossible split/window request."""


@dataclass
class MultivariateSeries:
    name: str
    values: np.ndarray  # (T, D)
    timestamps: list[str] | None = None
    frequency: str = "unknown"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise DataError("series values must be a (T, D) matrix with D >= 1")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray  # (T_in,)
    target: np.ndarray  # (T',)
    channel_id: int
    origin: int  # index of the first input step


def load_csv(
    path,
    has_header: bool = True,
    timestamp_col: int | None = 0,
    strict: bool = True,
    forward_fill: bool = False,
    name: str | None = None,
) -> MultivariateSeries:
    """Read a rectangular numeric CSV into a series.

    The timestamp column (if any) is kept as strings and excluded from the
    value matrix.  A missing or non-numeric cell raises with its row number
    unless forward_fill is set, in which case the previous row's value is
    reused (never for the first row).
    """
    rows: list[list[float]] = []
    timestamps: list[str] | None = [] if timestamp_col is not None else None
    width: int | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, raw in enumerate(reader, start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            if has_header and not rows and width is None and lineno == 1:
                width = len(raw)
                continue
            if width is None:
                width = len(raw)
            if len(raw) != width:
                raise DataError(f"{path}: row {lineno} has {len(raw)} cells, expected {width}")
            cells = list(raw)
            if timestamp_col is not None:
                timestamps.append(cells.pop(timestamp_col))
            parsed: list[float] = []
            for col, cell in enumerate(cells):
                cell = cell.strip()
                try:
                    parsed.append(float(cell)) if cell else parsed.append(float("nan"))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col}: non-numeric {cell!r}")
            if any(np.isnan(v) for v in parsed):
                if forward_fill and rows:
                    parsed = [p if not np.isnan(p) else prev for p, prev in zip(parsed, rows[-1])]
                elif strict or not rows:
                    bad = [c for c, v in enumerate(parsed) if np.isnan(v)]
                    raise DataError(f"{path}: row {lineno} missing value in column(s) {bad}")
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return MultivariateSeries(
        name=name or str(path), values=np.asarray(rows), timestamps=timestamps
    )


def save_csv(path, series: MultivariateSeries, header: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"ch{c}" for c in range(series.channels)])
        for row in series.values:
            writer.writerow([repr(float(v)) for v in row])


def make_windows(series: MultivariateSeries, input_len: int, horizon: int, stride: int = 1) -> list[WindowSample]:
    """Contiguous, non-overlapping (input, target) pairs per channel.

    Samples come out origin-major (all channels of the earliest origin
    first), i.e. in chronological order.
    """
    if input_len < 1 or horizon < 1 or stride < 1:
        raise DataError("input_len, horizon and stride must be >= 1")
    t = series.length
    if t < input_len + horizon:
        raise DataError(
            f"series of length {t} too short for input {input_len} + horizon {horizon}"
        )
    count = (t - input_len - horizon) // stride + 1
    samples: list[WindowSample] = []
    for w in range(count):
        origin = w * stride
        for ch in range(series.channels):
            col = series.values[:, ch]
            samples.append(
                WindowSample(
                    input=col[origin : origin + input_len].copy(),
                    target=col[origin + input_len : origin + input_len + horizon].copy(),
                    channel_id=ch,
                    origin=origin,
                )
            )
    return samples


def chrono_split(
    samples: list[WindowSample], fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
) -> tuple[list[WindowSample], list[WindowSample], list[WindowSample]]:
    """Split by origin time with no leakage: every train origin precedes
    every validation origin, which precedes every test origin.  A sample on
    a fractional boundary goes to the later split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    origins = sorted({s.origin for s in samples})
    n = len(origins)
    cut1 = int(fractions[0] * n)
    cut2 = int((fractions[0] + fractions[1]) * n)
    train_set = set(origins[:cut1])
    val_set = set(origins[cut1:cut2])
    test_set = set(origins[cut2:])
    train = [s for s in samples if s.origin in train_set]
    val = [s for s in samples if s.origin in val_set]
    test = [s for s in samples if s.origin in test_set]
    if not train or not val or not test:
        raise DataError(
            f"empty split (sizes {len(train)}/{len(val)}/{len(test)}) for fractions {fractions}"
        )
    return train, val, test


def few_shot_subset(train: list[WindowSample], ratio: float) -> list[WindowSample]:
    """First ceil(ratio * len) training samples, chronologically."""
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"few-shot ratio must be in (0, 1], got {ratio}")
    ordered = sorted(train, key=lambda s: (s.origin, s.channel_id))
    keep = int(np.ceil(ratio * len(ordered)))
    return ordered[:keep]


SYNTH_KINDS = ("sine_mix", "ar2", "trend_seasonal")


def synth_generate(kind: str, length: int, seed: int = 0, params: dict | None = None) -> MultivariateSeries:
    """Deterministic synthetic series.

    sine_mix:       sum_i a_i * sin(2*pi*t/P_i + phi_i) + noise*eps_t
    ar2:            x_t = c1*x_{t-1} + c2*x_{t-2} + noise*eps_t, zero init
    trend_seasonal: slope*t + amp*sin(2*pi*t/period) + noise*eps_t
    """
    if length < 1:
        raise DataError("length must be >= 1")
    params = dict(params or {})
    channels = int(params.pop("channels", 1))
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    cols = []
    for ch in range(channels):
        if kind == "sine_mix":
            amps = params.get("amplitudes", (1.0, 0.5))
            periods = params.get("periods", (24.0, 97.0))
            phases = params.get("phases", tuple(0.7 * ch for _ in amps))
            noise = float(params.get("noise", 0.0))
            col = np.zeros(length)
            for a, per, ph in zip(amps, periods, phases):
                col += a * np.sin(2.0 * np.pi * t / per + ph)
            col += noise * rng.standard_normal(length)
        elif kind == "ar2":
            c1 = float(params.get("c1", 1.5))
            c2 = float(params.get("c2", -0.9))
            noise = float(params.get("noise", 1.0))
            eps = noise * rng.standard_normal(length)
            col = np.zeros(length)
            for i in range(2, length):
                col[i] = c1 * col[i - 1] + c2 * col[i - 2] + eps[i]
        elif kind == "trend_seasonal":
            slope = float(params.get("slope", 0.01))
            amp = float(params.get("amplitude", 1.0))
            period = float(params.get("period", 24.0))
            noise = float(params.get("noise", 0.0))
            col = slope * t + amp * np.sin(2.0 * np.pi * t / period)
            col += noise * rng.standard_normal(length)
        else:
            raise DataError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
        cols.append(col)
    return MultivariateSeries(name=f"{kind}-seed{seed}", values=np.stack(cols, axis=1))

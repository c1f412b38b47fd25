"""Baselines, the Easy/Hard day split, metrics and Table-1 style reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError
from .geodata import Sample, format_timestamp
from .solarphys import clear_sky, solar_position

HARD_THRESHOLD = abs(math.log(2.0 / 3.0))
AREA_FLOOR = 1.0  # W h / m^2
STEP_HOURS = 0.5
SPLITS = ("All", "Easy", "Hard")


# --------------------------------------------------------------------- split

@dataclass(frozen=True)
class SplitLabel:
    r: float
    label: str

    @property
    def hard(self) -> bool:
        return self.label == "Hard"


def day_area(y) -> float:
    """Trapezoidal area under a GHI curve sampled every 30 minutes (W h/m^2)."""
    return float(np.trapezoid(np.asarray(y, dtype=np.float64), dx=STEP_HOURS))


def split_label(y, y_prev) -> SplitLabel:
    """Easy when r = |log(area(y) / area(y_prev))| is below |log(2/3)|."""
    y = np.asarray(y, dtype=np.float64)
    y_prev = np.asarray(y_prev, dtype=np.float64)
    if y.shape != y_prev.shape:
        raise ShapeError(f"day windows differ in shape: {y.shape} vs {y_prev.shape}")
    a = max(day_area(y), AREA_FLOOR)
    b = max(day_area(y_prev), AREA_FLOOR)
    r = abs(math.log(a) - math.log(b))
    return SplitLabel(r=r, label="Easy" if r < HARD_THRESHOLD else "Hard")


# ------------------------------------------------------------------- metrics

def metrics(pred, target) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if not (np.isfinite(pred).all() and np.isfinite(target).all()):
        raise ValidationError("metrics need finite inputs")
    err = pred - target
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


def _level_index(levels: Sequence[float], level: float) -> int:
    for i, q in enumerate(levels):
        if abs(q - level) < 1e-9:
            return i
    raise ParameterError(f"quantile level {level} not among {list(levels)}")


def interval_coverage(fan, target, levels: Sequence[float], lo: float = 0.02,
                      hi: float = 0.98) -> float:
    """Fraction of time steps with q_lo <= target <= q_hi."""
    fan = np.asarray(fan, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    i_lo, i_hi = _level_index(levels, lo), _level_index(levels, hi)
    inside = (fan[..., i_lo] <= target) & (target <= fan[..., i_hi])
    return float(inside.mean())


# ----------------------------------------------------------------- baselines

def persistence(history) -> np.ndarray:
    return np.array(history, dtype=np.float64, copy=True)


def fourier_baseline(history, k: int) -> np.ndarray:
    """Low-pass reconstruction keeping the DC term and the k-1 lowest frequencies."""
    history = np.asarray(history, dtype=np.float64)
    if k < 1 or k > 24:
        raise ParameterError(f"number of Fourier modes must lie in [1, 24], got {k}")
    coef = np.fft.rfft(history)
    coef[k:] = 0.0
    return np.fft.irfft(coef, n=len(history))


def clear_sky_baseline(timestamps, meta, turbidity: float = 3.0) -> np.ndarray:
    return clear_sky(timestamps, meta, turbidity).ghi


# ------------------------------------------------------------------- reports

@dataclass
class SplitMetrics:
    count: int
    mae: float | None = None
    rmse: float | None = None
    p_t: float | None = None

    def to_json(self) -> dict:
        d = {"count": self.count}
        if self.count:
            d.update(mae=self.mae, rmse=self.rmse)
            if self.p_t is not None:
                d["p_t"] = self.p_t
        return d


@dataclass
class EvalReport:
    model: str
    splits: dict[str, SplitMetrics]
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = {k: self.splits[k].count for k in SPLITS}
        if counts["All"] != counts["Easy"] + counts["Hard"]:
            raise ValidationError(f"split counts do not partition All: {counts}")
        for name, m in self.splits.items():
            if m.count and m.mae > m.rmse + 1e-9:
                raise ValidationError(f"{name}: MAE {m.mae} exceeds RMSE {m.rmse}")
            if m.p_t is not None and not 0.0 <= m.p_t <= 1.0:
                raise ValidationError(f"{name}: p_t {m.p_t} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "splits": {k: self.splits[k].to_json() for k in SPLITS},
            "options": self.options,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        splits = {k: SplitMetrics(**v) for k, v in d["splits"].items()}
        return cls(d["model"], splits, d.get("options", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def table(self) -> str:
        return format_table([self])


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: one row per model, MAE/RMSE (and p_t) per split."""
    name_w = max([len("Models")] + [len(r.model) for r in reports])
    col = 9
    head1 = "Models".ljust(name_w)
    head2 = " " * name_w
    for s in SPLITS:
        count = reports[0].splits[s].count if reports else 0
        head1 += " | " + f"{s} ({count})".center(2 * col + 1)
        head2 += " | " + "MAE".rjust(col) + " " + "RMSE".rjust(col)
    lines = [head1, head2, "-" * len(head1)]
    has_pt = any(r.splits["All"].p_t is not None for r in reports)

    def fmt(v):
        return "-".rjust(col) if v is None else f"{v:{col}.2f}"

    for r in reports:
        row = r.model.ljust(name_w)
        for s in SPLITS:
            m = r.splits[s]
            row += " | " + fmt(m.mae) + " " + fmt(m.rmse)
        lines.append(row)
    if has_pt:
        lines.append("-" * len(head1))
        sub = " " * name_w
        for _ in SPLITS:
            sub += " | " + "MAE".rjust(col) + " " + "p_t".rjust(col)
        lines.append(sub)
        for r in reports:
            if r.splits["All"].p_t is None:
                continue
            row = r.model.ljust(name_w)
            for s in SPLITS:
                m = r.splits[s]
                row += " | " + fmt(m.mae) + " " + fmt(m.p_t)
            lines.append(row)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- evaluation

@dataclass
class Forecast:
    """Predictions ``[N, pred_len, Q]`` in W/m^2 with their quantile levels.

    ``levels`` is None for a single deterministic trace (Q = 1).
    """

    values: np.ndarray
    levels: list[float] | None = None

    @property
    def point(self) -> np.ndarray:
        if self.levels is None:
            return self.values[..., 0]
        return self.values[..., _level_index(self.levels, 0.5)]


Forecaster = Callable[[Sequence[Sample]], Forecast]


def ghi_history(sample: Sample, ghi_index: int = 0) -> np.ndarray:
    return np.asarray(sample.history_series[:, ghi_index], dtype=np.float64)


def persistence_forecaster(ghi_index: int = 0) -> Forecaster:
    def run(samples):
        return Forecast(np.stack([persistence(ghi_history(s, ghi_index))[:, None] for s in samples]))
    return run


def fourier_forecaster(k: int, ghi_index: int = 0) -> Forecaster:
    def run(samples):
        return Forecast(
            np.stack([fourier_baseline(ghi_history(s, ghi_index), k)[:, None] for s in samples])
        )
    return run


def clear_sky_forecaster(turbidity: float = 3.0) -> Forecaster:
    def run(samples):
        return Forecast(np.stack(
            [clear_sky_baseline(s.target_times, s.meta, turbidity)[:, None] for s in samples]
        ))
    return run


def labels_for(samples: Sequence[Sample], ghi_index: int = 0) -> list[SplitLabel]:
    """Split labels from ground truth only: target day vs the history day."""
    return [split_label(s.target[:, 0], ghi_history(s, ghi_index)[-len(s.target):])
            for s in samples]


def evaluate(forecaster, samples: Sequence[Sample], name: str = "model", ghi_index: int = 0,
             daylight_only: bool = False, pooling: str = "timesteps",
             forecast: Forecast | None = None) -> tuple[EvalReport, Forecast]:
    """Score a forecaster on raw (W/m^2) samples, split into All/Easy/Hard.

    ``pooling="timesteps"`` averages errors over every step of every window;
    ``"windows"`` averages per-window MAE/RMSE instead.
    """
    if pooling not in ("timesteps", "windows"):
        raise ParameterError(f"unknown pooling '{pooling}'")
    if forecast is None:
        forecast = forecaster(samples) if len(samples) else Forecast(np.zeros((0, 0, 1)))
    labels = labels_for(samples, ghi_index)
    target = np.stack([s.target[:, 0] for s in samples]) if len(samples) else np.zeros((0, 0))
    point = forecast.point if len(samples) else np.zeros((0, 0))
    mask = np.ones_like(target, dtype=bool)
    if daylight_only and len(samples):
        mask = np.stack([
            solar_position(s.target_times, s.meta.latitude, s.meta.longitude).zenith < 90.0
            for s in samples
        ])

    splits = {}
    for split in SPLITS:
        sel = np.array([split == "All" or lab.label == split for lab in labels], dtype=bool)
        count = int(sel.sum())
        if count == 0:
            splits[split] = SplitMetrics(count=0)
            continue
        p, t, m = point[sel], target[sel], mask[sel]
        if pooling == "timesteps":
            mae, rmse = metrics(p[m], t[m])
        else:
            per = [metrics(pi[mi], ti[mi]) for pi, ti, mi in zip(p, t, m) if mi.any()]
            mae = float(np.mean([a for a, _ in per]))
            rmse = float(np.mean([b for _, b in per]))
        p_t = None
        if forecast.levels is not None and 0.02 in _rounded(forecast.levels) \
                and 0.98 in _rounded(forecast.levels):
            fan = forecast.values[sel]
            i_lo = _level_index(forecast.levels, 0.02)
            i_hi = _level_index(forecast.levels, 0.98)
            inside = (fan[..., i_lo] <= t) & (t <= fan[..., i_hi])
            p_t = float(inside[m].mean())
        splits[split] = SplitMetrics(count=count, mae=mae, rmse=rmse, p_t=p_t)
    report = EvalReport(name, splits, {"daylight_only": daylight_only, "pooling": pooling})
    return report, forecast


def _rounded(levels):
    return {round(q, 9) for q in levels}


def quantile_column(level: float) -> str:
    return f"q{int(round(level * 100)):02d}"


def write_forecast_csv(path, samples: Sequence[Sample], forecast: Forecast) -> None:
    cols = ["pred"] if forecast.levels is None else [quantile_column(q) for q in forecast.levels]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "station", "timestamp", "target", *cols])
        for i, s in enumerate(samples):
            for j, t in enumerate(s.target_times):
                vals = forecast.values[i, j]
                w.writerow([i, s.meta.name, format_timestamp(t), f"{s.target[j, 0]:.6g}",
                            *(f"{v:.6g}" for v in vals)])

"""Glue between on-disk datasets and model tensors.

A dataset directory holds ``stations/<name>.csv`` (+ ``.json`` metadata),
a ``context/`` cube container and an optional ``dataset.json`` index.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .embed import cyclical_time, normalize_coords, patch_centers
from .errors import ConfigError
from .geodata import (
    ContextCube, NormStats, Sample, StationSeries, fit_norm, load_context_cube,
    load_station_series, make_windows, slice_series, time_grid,
)
from .solarphys import augment_context

logger = logging.getLogger(__name__)

STEPS_PER_DAY = 48
ELEVATION_SCALE = 1000.0  # metres -> km; elevation is scaled, not z-scored


@dataclass(frozen=True)
class Designation:
    """A set of stations over a half-open range of days."""

    stations: tuple[str, ...]
    days: tuple[int, int]

    @classmethod
    def from_dict(cls, d: dict) -> "Designation":
        days = d.get("days") or [0, None]
        return cls(tuple(d["stations"]), (int(days[0]), None if days[1] is None else int(days[1])))

    def overlaps(self, other: "Designation") -> bool:
        if not set(self.stations) & set(other.stations):
            return False
        a0, a1 = self.days
        b0, b1 = other.days
        a1 = np.inf if a1 is None else a1
        b1 = np.inf if b1 is None else b1
        return a0 < b1 and b0 < a1


@dataclass
class RawDataset:
    stations: dict[str, StationSeries]
    cube: ContextCube
    root: Path | None = None


def load_dataset(root, impute: str | None = None) -> RawDataset:
    root = Path(root)
    index = root / "dataset.json"
    if index.exists():
        names = json.loads(index.read_text())["stations"]
        paths = [root / "stations" / f"{n}.csv" for n in names]
    else:
        paths = sorted((root / "stations").glob("*.csv"))
    stations = {}
    for p in paths:
        s = load_station_series(p, impute=impute)
        stations[s.meta.name] = s
    cube = load_context_cube(root / "context")
    return RawDataset(stations=stations, cube=cube, root=root)


class Prepared:
    """Normalized, flow-augmented data ready for batching.

    Norm stats are fitted on ``fit_on`` only (the training designation).
    """

    def __init__(self, raw: RawDataset, fit_on: Designation | None = None,
                 norm: dict | None = None, patch_size: int = 8,
                 flow_alpha: float = 0.1, flow_iterations: int = 100):
        self.raw = raw
        self.patch_size = patch_size
        cube = augment_context(raw.cube, alpha=flow_alpha, iterations=flow_iterations)
        self.ctx_channels = cube.channels
        some = next(iter(raw.stations.values()))
        self.ts_channels = some.channels

        if norm is None:
            if fit_on is None:
                raise ConfigError("need a training designation to fit normalization")
            norm = self._fit(raw, cube, fit_on)
        self.norm = norm
        ts_stats: NormStats = norm["series"]
        ctx_stats: NormStats = norm["context"]

        frames = np.empty(cube.frames.shape, dtype=np.float32)
        for c, name in enumerate(cube.channels):
            if name == "elevation":
                frames[:, c] = cube.frames[:, c] / ELEVATION_SCALE
            else:
                frames[:, c] = (cube.frames[:, c] - ctx_stats.mean[name]) / ctx_stats.std[name]
        self.cube = ContextCube(frames, cube.lat, cube.lon, cube.elevation, cube.channels,
                                cube.timestamps)
        self.ctx_coords = patch_centers(cube.lat, cube.lon, patch_size)
        self.series = {}
        for name, s in raw.stations.items():
            mean = np.array([ts_stats.mean[c] for c in s.channels])
            std = np.array([ts_stats.std[c] for c in s.channels])
            values = np.concatenate(
                [(s.values - mean) / std,
                 np.full((len(s), 1), s.meta.elevation / ELEVATION_SCALE)], axis=1)
            self.series[name] = StationSeries(s.meta, s.timestamps, values,
                                              s.channels + ("elevation",))
        self.target_mean = ts_stats.mean["ghi"]
        self.target_std = ts_stats.std["ghi"]

    @staticmethod
    def _fit(raw: RawDataset, cube: ContextCube, des: Designation) -> dict:
        rows = []
        for name in des.stations:
            if name not in raw.stations:
                raise ConfigError(f"unknown station '{name}'")
            s = raw.stations[name]
            lo, hi = _day_rows(des.days, len(s))
            rows.append(s.values[lo:hi])
        series_stats = fit_norm(rows, some_channels(raw))
        s0 = raw.stations[des.stations[0]]
        lo, hi = _day_rows(des.days, len(s0))
        off = int(np.searchsorted(cube.timestamps, s0.timestamps[lo]))
        chans = [c for c in cube.channels if c != "elevation"]
        sel = [cube.channels.index(c) for c in chans]
        ctx_stats = fit_norm([cube.frames[off : off + hi - lo][:, sel]], chans, axis=1)
        return {"series": series_stats, "context": ctx_stats}

    @property
    def n_ts_inputs(self) -> int:
        return len(self.ts_channels) + 1

    @property
    def n_ctx_inputs(self) -> int:
        return len(self.ctx_channels)

    def windows(self, des: Designation, stride: int, hist_len: int = 48, pred_len: int = 48):
        """All samples for a designation, station by station in the given order."""
        out = []
        for name in des.stations:
            if name not in self.series:
                raise ConfigError(f"unknown station '{name}'")
            s = self.series[name]
            lo, hi = _day_rows(des.days, len(s))
            out.extend(make_windows(slice_series(s, lo, hi), self.cube, hist_len, pred_len, stride))
        return out

    def raw_windows(self, des: Designation, stride: int, hist_len: int = 48, pred_len: int = 48):
        """Same windows as :meth:`windows` over the un-normalized series (no context)."""
        out = []
        for name in des.stations:
            s = self.raw.stations[name]
            lo, hi = _day_rows(des.days, len(s))
            out.extend(make_windows(slice_series(s, lo, hi), None, hist_len, pred_len, stride))
        return out

    def history_sample(self, station: str, start: int, hist_len: int = 48,
                       pred_len: int = 48) -> Sample:
        """A forecast input whose history begins at row ``start``; the target may lie
        beyond the recorded data and is then filled with NaN."""
        if station not in self.series:
            raise ConfigError(f"unknown station '{station}'")
        s = self.series[station]
        if start < 0 or start + hist_len > len(s):
            raise ConfigError(f"history [{start}, {start + hist_len}) outside the {len(s)} rows "
                              f"of station '{station}'")
        win = make_windows(slice_series(s, start, start + hist_len), self.cube, hist_len, 0,
                           stride=1)[0]
        times = time_grid(s.timestamps[start] + np.timedelta64(30 * hist_len, "m"), pred_len)
        target = np.full((pred_len, 1), np.nan)
        known = s.values[start + hist_len : start + hist_len + pred_len, s.channels.index("ghi")]
        target[: len(known), 0] = known
        return Sample(win.history_series, win.history_context, target, s.meta,
                      win.history_times, times, start)

    def batch(self, samples: Sequence[Sample], dtype=torch.float32) -> dict:
        ts = np.stack([s.history_series for s in samples])
        ctx = np.stack([s.history_context for s in samples])
        tt = np.stack([cyclical_time(s.history_times) for s in samples])
        coords = np.array([normalize_coords(s.meta.latitude, s.meta.longitude) for s in samples])
        target = np.stack([s.target[:, 0] for s in samples])
        # target windows are normalized series rows; recover W/m^2 for metrics
        return {
            "ts": torch.as_tensor(ts, dtype=dtype),
            "ts_time": torch.as_tensor(tt, dtype=dtype),
            "ctx": torch.as_tensor(ctx, dtype=dtype),
            "ctx_time": torch.as_tensor(tt, dtype=dtype),
            "ctx_coords": torch.as_tensor(self.ctx_coords, dtype=dtype),
            "station_coords": torch.as_tensor(coords, dtype=dtype),
            "target": torch.as_tensor(target[..., None], dtype=dtype),
            "target_wm2": target * self.target_std + self.target_mean,
        }

    def series_index(self, name: str) -> int:
        return self.ts_channels.index(name)

    def to_wm2(self, pred_norm: np.ndarray) -> np.ndarray:
        return np.maximum(pred_norm * self.target_std + self.target_mean, 0.0)


def some_channels(raw: RawDataset) -> tuple[str, ...]:
    channels = {s.channels for s in raw.stations.values()}
    if len(channels) != 1:
        raise ConfigError("all stations must share the same channel layout")
    return channels.pop()


def _day_rows(days: tuple[int, int | None], n: int) -> tuple[int, int]:
    lo = days[0] * STEPS_PER_DAY
    hi = n if days[1] is None else min(n, days[1] * STEPS_PER_DAY)
    return lo, hi


def norm_to_json(norm: dict) -> dict:
    return {k: v.to_json() for k, v in norm.items()}


def norm_from_json(data: dict) -> dict:
    return {k: NormStats.from_json(v) for k, v in data.items()}

"""Station series, context cubes, windowing and normalization."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, FormatError, GapError, ParseError, ValidationError

logger = logging.getLogger(__name__)

STEP = np.timedelta64(30, "m")
IRRADIANCE_CHANNELS = frozenset({"ghi", "dni", "dhi", "cs_ghi", "cs_dni", "cs_dhi"})
DEFAULT_CHANNELS = (
    "ghi", "dni", "dhi", "pressure", "cs_ghi", "cs_dni", "cs_dhi", "zenith", "azimuth", "kt",
)
CUBE_FORMAT = "heliocast-cube"


@dataclass(frozen=True)
class StationMeta:
    name: str
    latitude: float
    longitude: float
    elevation: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValidationError(f"{self.name}: latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValidationError(f"{self.name}: longitude {self.longitude} outside [-180, 180]")
        if self.elevation < -500.0:
            raise ValidationError(f"{self.name}: elevation {self.elevation} below -500 m")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "latitude": self.latitude,
            "longitude": self.longitude,
            "elevation": self.elevation,
        }


@dataclass(frozen=True)
class StationSeries:
    meta: StationMeta
    timestamps: np.ndarray  # datetime64[m], UTC
    values: np.ndarray  # [T, C] float64
    channels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.timestamps)

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.channels.index(name)]


@dataclass(frozen=True)
class ContextCube:
    frames: np.ndarray  # [T, C, H, W] float32
    lat: np.ndarray  # [H]
    lon: np.ndarray  # [W]
    elevation: np.ndarray  # [H, W] metres
    channels: tuple[str, ...]
    timestamps: np.ndarray  # datetime64[m]

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise FormatError(f"frames must be [T, C, H, W], got {self.frames.shape}")
        t, c, h, w = self.frames.shape
        if len(self.channels) != c:
            raise FormatError(f"{len(self.channels)} channel names for {c} channels")
        if self.lat.shape != (h,) or self.lon.shape != (w,):
            raise FormatError("coordinate vectors do not match the frame size")
        if self.elevation.shape != (h, w):
            raise FormatError(f"elevation grid {self.elevation.shape} != {(h, w)}")
        if len(self.timestamps) != t:
            raise FormatError(f"{len(self.timestamps)} timestamps for {t} frames")
        for name, axis in (("lat", self.lat), ("lon", self.lon)):
            d = np.diff(axis)
            if len(d) and not (np.all(d > 0) or np.all(d < 0)):
                raise ValidationError(f"{name} coordinates are not strictly monotone")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    @property
    def lat_grid(self) -> np.ndarray:
        return np.broadcast_to(self.lat[:, None], self.elevation.shape)

    @property
    def lon_grid(self) -> np.ndarray:
        return np.broadcast_to(self.lon[None, :], self.elevation.shape)

    def cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        """Nearest grid cell (row, col) to a coordinate."""
        return int(np.argmin(np.abs(self.lat - lat))), int(np.argmin(np.abs(self.lon - lon)))


@dataclass(frozen=True)
class Sample:
    history_series: np.ndarray  # [hist, C_ts]
    history_context: np.ndarray  # [hist, C_ctx, H, W]
    target: np.ndarray  # [pred, 1]
    meta: StationMeta
    history_times: np.ndarray
    target_times: np.ndarray
    start: int = 0


@dataclass
class NormStats:
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {k: {"mean": self.mean[k], "std": self.std[k]} for k in self.mean}

    @classmethod
    def from_json(cls, data: dict) -> "NormStats":
        return cls(
            mean={k: float(v["mean"]) for k, v in data.items()},
            std={k: float(v["std"]) for k, v in data.items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- timestamps

def parse_timestamp(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    if dt.second or dt.microsecond or dt.minute not in (0, 30):
        raise ValueError(f"{text!r} is not on the 30-minute grid")
    return np.datetime64(dt, "m")


def format_timestamp(t: np.datetime64) -> str:
    return str(np.datetime64(t, "m")) + "Z"


def time_grid(start, n: int) -> np.ndarray:
    return np.datetime64(start, "m") + STEP * np.arange(n)


# ------------------------------------------------------------ station series

def _find_gaps(stamps: np.ndarray) -> list[str]:
    missing = []
    for a, b in zip(stamps[:-1], stamps[1:]):
        t = a + STEP
        while t < b:
            missing.append(str(t).replace("T", " "))
            t += STEP
    return missing


def _impute_clear_sky_scaled(stamps, values, channels, meta, turbidity):
    from .solarphys import clear_sky, solar_position

    full = time_grid(stamps[0], int((stamps[-1] - stamps[0]) // STEP) + 1)
    pos = np.searchsorted(full, stamps)
    known = np.zeros(len(full), dtype=bool)
    known[pos] = True
    cs = clear_sky(full, meta, turbidity)
    sun = solar_position(full, meta.latitude, meta.longitude)
    derived = {
        "cs_ghi": cs.ghi, "cs_dni": cs.dni, "cs_dhi": cs.dhi,
        "zenith": sun.zenith, "azimuth": sun.azimuth,
    }
    out = np.empty((len(full), values.shape[1]))
    x = np.flatnonzero(known)
    for c, name in enumerate(channels):
        col = np.full(len(full), np.nan)
        col[pos] = values[:, c]
        if name in derived:
            col[~known] = derived[name][~known]
        elif name in ("ghi", "dni", "dhi") and f"cs_{name}" in derived:
            ref = derived[f"cs_{name}"]
            with np.errstate(divide="ignore", invalid="ignore"):
                index = np.where(ref[x] > 0, col[x] / ref[x], 0.0)
            col[~known] = np.interp(np.flatnonzero(~known), x, index) * ref[~known]
        else:
            col[~known] = np.interp(np.flatnonzero(~known), x, col[x])
        out[:, c] = col
    return full, out


def load_station_series(
    path, meta: StationMeta | None = None, impute: str | None = None, turbidity: float = 3.0
) -> StationSeries:
    """Read a station CSV (``timestamp,ghi,dni,...``), sorted and validated.

    Without ``meta`` the station metadata is read from ``<path>.json``.
    Gaps raise :class:`GapError` unless ``impute="clear-sky-scaled"``.
    """
    path = Path(path)
    if meta is None:
        side = path.with_suffix(".json")
        if not side.exists():
            raise FormatError(f"no station metadata given and {side} not found")
        meta = StationMeta(**json.loads(side.read_text()))

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if not header or header[0] != "timestamp":
            raise ParseError("header must start with 'timestamp'", line=1)
        channels = tuple(header[1:])
        if len(set(channels)) != len(channels):
            raise ParseError("duplicate channel names in header", line=1)
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                stamps.append(parse_timestamp(row[0]))
            except ValueError as exc:
                raise ParseError(f"bad timestamp: {exc}", line=lineno) from None
            try:
                rows.append([float(cell) for cell in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if not rows:
        raise ParseError("no data rows", line=2)

    stamps = np.array(stamps, dtype="datetime64[m]")
    values = np.array(rows, dtype=np.float64)
    order = np.argsort(stamps, kind="stable")
    stamps, values = stamps[order], values[order]
    if np.any(np.diff(stamps) == np.timedelta64(0, "m")):
        dup = stamps[1:][np.diff(stamps) == np.timedelta64(0, "m")][0]
        raise ValidationError(f"duplicate timestamp {dup}")
    if not np.isfinite(values).all():
        raise ValidationError("non-finite values in station series")
    for c, name in enumerate(channels):
        if name in IRRADIANCE_CHANNELS and np.any(values[:, c] < 0):
            i = int(np.argmax(values[:, c] < 0))
            raise ValidationError(f"negative irradiance in '{name}' at {stamps[i]}")

    missing = _find_gaps(stamps)
    if missing:
        if impute != "clear-sky-scaled":
            raise GapError(missing)
        logger.warning("imputing %d missing rows in %s", len(missing), path.name)
        stamps, values = _impute_clear_sky_scaled(stamps, values, channels, meta, turbidity)
    return StationSeries(meta=meta, timestamps=stamps, values=values, channels=channels)


def write_station_series(series: StationSeries, path, with_meta: bool = True) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *series.channels])
        for t, row in zip(series.timestamps, series.values):
            writer.writerow([format_timestamp(t), *(repr(float(v)) for v in row)])
    if with_meta:
        path.with_suffix(".json").write_text(json.dumps(series.meta.to_dict(), indent=2))


# ------------------------------------------------------------- context cubes

def write_context_cube(cube: ContextCube, directory, valid_range: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    t, c, h, w = cube.frames.shape
    manifest = {
        "format": CUBE_FORMAT,
        "version": 1,
        "dtype": "f32le",
        "shape": [t, c, h, w],
        "channels": list(cube.channels),
        "start": format_timestamp(cube.timestamps[0]),
        "step_minutes": 30,
        "lat": [float(x) for x in cube.lat],
        "lon": [float(x) for x in cube.lon],
        "elevation": "elevation.bin",
        "frame_pattern": "frames/{index:05d}.bin",
    }
    if valid_range:
        manifest["valid_range"] = valid_range
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    cube.elevation.astype("<f4").tofile(directory / "elevation.bin")
    frames = np.ascontiguousarray(cube.frames, dtype="<f4")
    for i in range(t):
        frames[i].tofile(directory / manifest["frame_pattern"].format(index=i))


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(f"{path.name}: expected {expected} bytes, got {actual}")
    return np.fromfile(path, dtype="<f4").reshape(shape)


def load_context_cube(directory) -> ContextCube:
    """Assemble a ``[T, C, H, W]`` cube from a manifest directory."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{mpath} not found")
    m = json.loads(mpath.read_text())
    if m.get("format", CUBE_FORMAT) != CUBE_FORMAT or m.get("dtype") != "f32le":
        raise FormatError("unsupported cube format or dtype (need f32le)")
    try:
        t, c, h, w = (int(x) for x in m["shape"])
    except (KeyError, ValueError, TypeError):
        raise FormatError("manifest 'shape' must be [T, C, H, W]") from None
    if len(m["channels"]) != c:
        raise FormatError(f"manifest lists {len(m['channels'])} channels, shape says {c}")
    if m.get("step_minutes", 30) != 30:
        raise FormatError("only 30-minute frame spacing is supported")
    lat = np.asarray(m["lat"], dtype=np.float64)
    lon = np.asarray(m["lon"], dtype=np.float64)
    if lat.shape != (h,) or lon.shape != (w,):
        raise FormatError("coordinate vectors do not match the declared H, W")

    frames = np.empty((t, c, h, w), dtype=np.float32)
    pattern = m.get("frame_pattern", "frames/{index:05d}.bin")
    for i in range(t):
        frames[i] = _read_f32(directory / pattern.format(index=i), (c, h, w))
    elevation = _read_f32(directory / m["elevation"], (h, w)).astype(np.float64)

    n_clamped = 0
    for name, (lo, hi) in (m.get("valid_range") or {}).items():
        k = m["channels"].index(name)
        bad = (frames[:, k] < lo) | (frames[:, k] > hi)
        n_clamped += int(bad.sum())
        np.clip(frames[:, k], lo, hi, out=frames[:, k])
    if n_clamped:
        logger.warning("clamped %d out-of-range context values", n_clamped)

    return ContextCube(
        frames=frames,
        lat=lat,
        lon=lon,
        elevation=elevation,
        channels=tuple(m["channels"]),
        timestamps=time_grid(parse_timestamp(m["start"]), t),
    )


# ----------------------------------------------------------------- windowing

class Windows(Sequence):
    """Lazy sequence of sliding-window samples over one station + cube."""

    def __init__(self, series: StationSeries, cube: ContextCube | None, hist_len: int = 48,
                 pred_len: int = 48, stride: int = 48, target: str = "ghi"):
        if stride < 1:
            raise ValueError("stride must be positive")
        self.series, self.cube = series, cube
        self.hist_len, self.pred_len, self.stride = hist_len, pred_len, stride
        self.target_index = series.channels.index(target)
        self.offset = 0
        if cube is not None:
            self.offset = _alignment_offset(series.timestamps, cube.timestamps)
        span = len(series) - hist_len - pred_len
        self._n = 0 if span < 0 else span // stride + 1

    def __len__(self) -> int:
        return self._n

    def start_of(self, i: int) -> int:
        return i * self.stride

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += self._n
        if not 0 <= i < self._n:
            raise IndexError(i)
        s = i * self.stride
        h, p = self.hist_len, self.pred_len
        ts = self.series.timestamps
        ctx = None
        if self.cube is not None:
            o = self.offset + s
            ctx = self.cube.frames[o : o + h]
        return Sample(
            history_series=self.series.values[s : s + h],
            history_context=ctx,
            target=self.series.values[s + h : s + h + p, self.target_index : self.target_index + 1],
            meta=self.series.meta,
            history_times=ts[s : s + h],
            target_times=ts[s + h : s + h + p],
            start=s,
        )


def _alignment_offset(series_times: np.ndarray, cube_times: np.ndarray) -> int:
    if len(series_times) == 0:
        return 0
    offset = int(np.searchsorted(cube_times, series_times[0]))
    end = offset + len(series_times)
    if end > len(cube_times) or not np.array_equal(cube_times[offset:end], series_times):
        raise AlignmentError(
            f"station timestamps {series_times[0]}..{series_times[-1]} are not covered "
            f"by the context cube {cube_times[0]}..{cube_times[-1]}"
        )
    return offset


def make_windows(series: StationSeries, cube: ContextCube | None = None, hist_len: int = 48,
                 pred_len: int = 48, stride: int = 48, target: str = "ghi") -> Windows:
    return Windows(series, cube, hist_len=hist_len, pred_len=pred_len, stride=stride, target=target)


def slice_series(series: StationSeries, start: int, stop: int) -> StationSeries:
    return StationSeries(series.meta, series.timestamps[start:stop], series.values[start:stop],
                         series.channels)


# ------------------------------------------------------------- normalization

def fit_norm(arrays: Iterable[np.ndarray], channels: Sequence[str], axis: int = -1) -> NormStats:
    """Per-channel mean/std over the given arrays, channel axis ``axis``.

    Accumulates in float64; raises if a channel is constant.
    """
    channels = list(channels)
    arrays = [np.moveaxis(np.asarray(a, dtype=np.float64), axis, -1).reshape(-1, len(channels))
              for a in arrays]
    total = np.zeros(len(channels))
    total_sq = np.zeros(len(channels))
    count = 0
    for a in arrays:
        total += a.sum(0)
        count += a.shape[0]
    if count == 0:
        raise ValidationError("cannot fit normalization on empty data")
    mean = total / count
    for a in arrays:
        total_sq += ((a - mean) ** 2).sum(0)
    std = np.sqrt(total_sq / count)
    for name, m, s in zip(channels, mean, std):
        if not s > 1e-12 * max(1.0, abs(m)):
            raise ValidationError(f"channel '{name}' has zero standard deviation")
    return NormStats(
        mean={k: float(m) for k, m in zip(channels, mean)},
        std={k: float(s) for k, s in zip(channels, std)},
    )


def _norm_vectors(stats: NormStats, channels: Sequence[str], ndim: int, axis: int):
    shape = [1] * ndim
    shape[axis] = len(channels)
    mean = np.array([stats.mean[c] for c in channels]).reshape(shape)
    std = np.array([stats.std[c] for c in channels]).reshape(shape)
    return mean, std


def apply_norm(x, stats: NormStats, channels: Sequence[str], axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean, std = _norm_vectors(stats, channels, x.ndim, axis)
    return (x - mean) / std


def invert_norm(x, stats: NormStats, channels: Sequence[str], axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean, std = _norm_vectors(stats, channels, x.ndim, axis)
    return x * std + mean

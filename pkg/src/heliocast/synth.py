"""Synthetic advecting-cloud world with known ground truth.

Clouds are smooth gaussian blobs on a periodic grid, translated by a constant
wind: a few large long-lived fronts plus many small convective cells that live
only a few steps. Channel 0 of the context cube is the cloud opacity field; a station
under a cell sees ``GHI = clear-sky GHI * (1 - opacity)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .evaluation import labels_for
from .geodata import (
    DEFAULT_CHANNELS, ContextCube, StationMeta, StationSeries, make_windows, parse_timestamp,
    time_grid, write_context_cube, write_station_series,
)
from .solarphys import altitude_to_pressure, clear_sky, solar_position

STEPS_PER_DAY = 48


@dataclass
class StationSpec:
    name: str
    row: int
    col: int


def _default_stations():
    # each station sits at the centre of an 8-cell patch
    return [
        {"name": "north", "row": 28, "col": 20},
        {"name": "centre", "row": 20, "col": 12},
        {"name": "south", "row": 4, "col": 28},
        {"name": "test", "row": 12, "col": 20},
    ]


@dataclass
class SynthConfig:
    grid: int = 32
    days: int = 60
    start: str = "2020-06-01T00:00"
    lat0: float = 44.0
    lon0: float = -1.6
    spacing: float = 0.1  # degrees per cell
    stations: list = field(default_factory=_default_stations)
    blobs: int = 2  # large fronts, visible upwind a day ahead
    blob_sigma: tuple = (4.0, 6.0)  # cells, drawn uniformly
    opacity: tuple = (0.8, 1.0)  # peak opacity, drawn uniformly
    wind: tuple = (0.3, 0.0)  # (east, north) cells per step
    regeneration: float = 0.3  # expected blob replacements per blob per day
    fade_steps: int = 8
    cells: int = 40  # short-lived convective cells, too brief to see coming
    cell_sigma: tuple = (1.0, 2.0)
    cell_opacity: tuple = (0.3, 0.7)
    cell_life: float = 8.0  # mean lifetime in steps
    daily_overcast: list = field(default_factory=list)  # uniform opacity per day, cycled
    terrain: float = 0.0  # peak elevation of the smooth terrain (m)
    turbidity: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.stations = [s if isinstance(s, StationSpec) else StationSpec(**s)
                         for s in self.stations]
        if self.grid < 4 or self.days < 1:
            raise ConfigError("grid must be >= 4 and days >= 1")
        for lo, hi in (self.opacity, self.cell_opacity):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"opacity range {(lo, hi)} must lie in [0, 1]")
        if any(not 0.0 <= o <= 1.0 for o in self.daily_overcast):
            raise ConfigError("daily_overcast values must lie in [0, 1]")
        if float(np.hypot(*self.wind)) >= self.grid / 8:
            raise ConfigError(f"wind magnitude must stay below grid/8 = {self.grid / 8} cells/step")
        if self.regeneration < 0 or self.blobs < 0 or self.cells < 0:
            raise ConfigError("blobs, cells and regeneration must be non-negative")
        if self.cell_life < 2:
            raise ConfigError("cell_life must be at least 2 steps")
        if not 1.0 <= self.turbidity <= 10.0:
            raise ConfigError("turbidity must lie in [1, 10]")
        names = [s.name for s in self.stations]
        if len(set(names)) != len(names):
            raise ConfigError("station names must be unique")
        for s in self.stations:
            if not (0 <= s.row < self.grid and 0 <= s.col < self.grid):
                raise ConfigError(f"station '{s.name}' at ({s.row}, {s.col}) is off the "
                                  f"{self.grid}x{self.grid} grid")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in _PAIRS:
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        d = dict(d)
        for k in _PAIRS:
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


_PAIRS = ("blob_sigma", "opacity", "wind", "cell_sigma", "cell_opacity")


@dataclass
class SynthWorld:
    stations: dict[str, StationSeries]
    cube: ContextCube
    cfg: SynthConfig


# ------------------------------------------------------------------- clouds

def _wrapped_gauss(coord: np.ndarray, centre, sigma, n: int) -> np.ndarray:
    """Periodic gaussian profile ``[..., n]`` summed over neighbouring images."""
    d = coord[None, :] - np.asarray(centre)[:, None]
    out = np.zeros_like(d)
    # enough images that the truncated tail is below 1e-20
    reach = 2 + int(np.ceil(10.0 * np.max(sigma, initial=0.0) / n))
    for k in range(-reach, reach + 1):
        out += np.exp(-0.5 * ((d + k * n) / np.asarray(sigma)[:, None]) ** 2)
    return out


def _schedule(rng, grid: int, count: int, sigma, opacity, mean_life: float,
              min_life: float, start: float, n_steps: int) -> np.ndarray:
    rows = []
    for _ in range(count):
        birth = start
        while birth < n_steps:
            life = np.inf if mean_life == np.inf else max(min_life, rng.exponential(mean_life))
            rows.append((rng.uniform(0, grid), rng.uniform(0, grid), rng.uniform(*sigma),
                         rng.uniform(*opacity), birth, birth + life))
            birth = birth + life
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


def _blob_schedule(cfg: SynthConfig, rng: np.random.Generator, n_steps: int):
    """Blob table with columns (row0, col0, sigma, peak, birth, death)."""
    mean_life = STEPS_PER_DAY / cfg.regeneration if cfg.regeneration > 0 else np.inf
    return _schedule(rng, cfg.grid, cfg.blobs, cfg.blob_sigma, cfg.opacity, mean_life,
                     2 * cfg.fade_steps, -cfg.fade_steps, n_steps)


def _cell_schedule(cfg: SynthConfig, rng: np.random.Generator, n_steps: int):
    """Convective cells: same table layout, lifetimes of a few steps."""
    return _schedule(rng, cfg.grid, cfg.cells, cfg.cell_sigma, cfg.cell_opacity,
                     cfg.cell_life, 2.0, -cfg.cell_life, n_steps)


def _envelope(t: int, birth, death, fade: int) -> np.ndarray:
    if fade <= 0:
        return ((t >= birth) & (t < death)).astype(np.float64)
    up = np.clip((t - birth) / fade, 0.0, 1.0)
    down = np.clip((death - t) / fade, 0.0, 1.0)
    return np.minimum(up, down)


def _transmit(cfg: SynthConfig, table: np.ndarray, t: int, fade: float) -> np.ndarray:
    n = cfg.grid
    transmit = np.ones((n, n))
    if not len(table):
        return transmit
    amp = table[:, 3] * _envelope(t, table[:, 4], table[:, 5], fade)
    live = amp > 0
    if live.any():
        b = table[live]
        idx = np.arange(n, dtype=np.float64)
        rc = np.mod(b[:, 0] + cfg.wind[1] * t, n)
        cc = np.mod(b[:, 1] + cfg.wind[0] * t, n)
        gy = _wrapped_gauss(idx, rc, b[:, 2], n)
        gx = _wrapped_gauss(idx, cc, b[:, 2], n)
        for a, y, x in zip(amp[live], gy, gx):
            transmit *= 1.0 - a * np.outer(y, x)
    return transmit


def cloud_field(cfg: SynthConfig, blobs: np.ndarray, t: int,
                cells: np.ndarray | None = None) -> np.ndarray:
    """Opacity in [0, 1] at step ``t``: 1 - prod(1 - a_i g_i), plus any overcast."""
    transmit = _transmit(cfg, blobs, t, cfg.fade_steps)
    if cells is not None:
        transmit *= _transmit(cfg, cells, t, 1.0)
    if cfg.daily_overcast:
        day = t // STEPS_PER_DAY
        transmit *= 1.0 - cfg.daily_overcast[day % len(cfg.daily_overcast)]
    return np.clip(1.0 - transmit, 0.0, 1.0)


def terrain(cfg: SynthConfig) -> np.ndarray:
    n = cfg.grid
    idx = np.arange(n, dtype=np.float64)
    hill = np.exp(-0.5 * ((idx[:, None] - 0.7 * n) ** 2 + (idx[None, :] - 0.3 * n) ** 2)
                  / (0.2 * n) ** 2)
    return cfg.terrain * hill


# ------------------------------------------------------------------ generate

def generate(cfg: SynthConfig) -> SynthWorld:
    """Paired station series and context cube; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    n_steps = cfg.days * STEPS_PER_DAY
    stamps = time_grid(parse_timestamp(cfg.start), n_steps)
    blobs = _blob_schedule(cfg, rng, n_steps)
    cells = _cell_schedule(cfg, rng, n_steps)
    opacity = np.stack([cloud_field(cfg, blobs, t, cells) for t in range(n_steps)])

    n = cfg.grid
    lat = np.round(cfg.lat0 + cfg.spacing * np.arange(n), 6)
    lon = np.round(cfg.lon0 + cfg.spacing * np.arange(n), 6)
    elevation = terrain(cfg)
    cube = ContextCube(frames=opacity[:, None].astype(np.float32), lat=lat, lon=lon,
                       elevation=elevation.astype(np.float32).astype(np.float64),
                       channels=("cloud",), timestamps=stamps)

    synoptic = rng.uniform(0, 2 * np.pi)
    stations = {}
    for site in cfg.stations:
        meta = StationMeta(site.name, float(lat[site.row]), float(lon[site.col]),
                           float(cube.elevation[site.row, site.col]))
        cs = clear_sky(stamps, meta, cfg.turbidity)
        pos = solar_position(stamps, meta.latitude, meta.longitude)
        tau = 1.0 - opacity[:, site.row, site.col]
        ghi, dni, dhi = cs.ghi * tau, cs.dni * tau, cs.dhi * tau
        steps = np.arange(n_steps)
        pressure = (altitude_to_pressure(meta.elevation) / 100.0
                    + 6.0 * np.sin(2 * np.pi * steps / (5 * STEPS_PER_DAY) + synoptic))
        kt = np.where(cs.ghi > 0, tau, 0.0)
        values = np.stack([ghi, dni, dhi, pressure, cs.ghi, cs.dni, cs.dhi, pos.zenith,
                           pos.azimuth, kt], axis=1)
        stations[site.name] = StationSeries(meta, stamps, values, DEFAULT_CHANNELS)
    return SynthWorld(stations, cube, cfg)


def label_audit(world: SynthWorld, stride: int = STEPS_PER_DAY) -> dict[str, int]:
    """Easy/Hard window counts over every station (day windows by default)."""
    counts = {"Easy": 0, "Hard": 0}
    for s in world.stations.values():
        for lab in labels_for(list(make_windows(s, None, stride=stride))):
            counts[lab.label] += 1
    counts["All"] = counts["Easy"] + counts["Hard"]
    return counts


def write_dataset(world: SynthWorld, directory) -> Path:
    """Write the world in the standard station-CSV + cube-container layout."""
    directory = Path(directory)
    (directory / "stations").mkdir(parents=True, exist_ok=True)
    for name, s in world.stations.items():
        write_station_series(s, directory / "stations" / f"{name}.csv")
    write_context_cube(world.cube, directory / "context", valid_range={"cloud": [0.0, 1.0]})
    index = {"stations": list(world.stations), "synth": world.cfg.to_dict()}
    (directory / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return directory

"""Solar geometry, Ineichen clear-sky irradiance and context augmentation.

Solar position follows the low-precision almanac formulae (mean longitude,
mean anomaly, ecliptic longitude) which are good to ~0.01 deg between 1950
and 2050. Clear-sky irradiance uses the Ineichen/Perez formulation with a
fixed Linke turbidity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

J2000 = np.datetime64("2000-01-01T12:00", "s")
SOLAR_CONSTANT = 1366.1


@dataclass(frozen=True)
class SolarPosition:
    zenith: np.ndarray
    azimuth: np.ndarray

    @property
    def elevation(self):
        return 90.0 - self.zenith


@dataclass(frozen=True)
class ClearSkyTriple:
    ghi: np.ndarray
    dni: np.ndarray
    dhi: np.ndarray


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray


def _as_datetime64(t) -> np.ndarray:
    if isinstance(t, datetime):
        if t.tzinfo is not None:
            t = t.replace(tzinfo=None) - (t.utcoffset() or 0)
        return np.datetime64(t, "s")
    return np.asarray(t, dtype="datetime64[s]")


def _day_of_year(t: np.ndarray) -> np.ndarray:
    year_start = t.astype("datetime64[Y]").astype("datetime64[D]")
    return (t.astype("datetime64[D]") - year_start).astype(np.int64) + 1


def solar_position(t, lat, lon) -> SolarPosition:
    """Sun zenith and azimuth (degrees, azimuth clockwise from north).

    ``t`` is UTC (datetime, datetime64 or an array of them). Broadcasts over
    ``t``, ``lat`` and ``lon``.
    """
    t = _as_datetime64(t)
    n = (t - J2000).astype(np.float64) / 86400.0
    lat = np.radians(np.asarray(lat, dtype=np.float64))
    lon = np.asarray(lon, dtype=np.float64)

    mean_lon = np.mod(280.460 + 0.9856474 * n, 360.0)
    mean_anom = np.radians(np.mod(357.528 + 0.9856003 * n, 360.0))
    ecl_lon = np.radians(mean_lon + 1.915 * np.sin(mean_anom) + 0.020 * np.sin(2 * mean_anom))
    obliquity = np.radians(23.439 - 4.0e-7 * n)

    right_asc = np.arctan2(np.cos(obliquity) * np.sin(ecl_lon), np.cos(ecl_lon))
    decl = np.arcsin(np.sin(obliquity) * np.sin(ecl_lon))

    gmst = np.mod(18.697374558 + 24.06570982441908 * n, 24.0)
    hour_angle = np.radians(gmst * 15.0 + lon) - right_asc

    cos_zen = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)
    zenith = np.degrees(np.arccos(np.clip(cos_zen, -1.0, 1.0)))
    azimuth = np.degrees(
        np.arctan2(
            -np.sin(hour_angle),
            np.tan(decl) * np.cos(lat) - np.sin(lat) * np.cos(hour_angle),
        )
    )
    return SolarPosition(zenith=zenith, azimuth=np.mod(azimuth, 360.0))


def extra_radiation(t) -> np.ndarray:
    """Extraterrestrial normal irradiance, Spencer's Fourier series."""
    doy = _day_of_year(_as_datetime64(t))
    b = 2.0 * np.pi * (doy - 1) / 365.0
    factor = (
        1.00011
        + 0.034221 * np.cos(b)
        + 0.00128 * np.sin(b)
        + 0.000719 * np.cos(2 * b)
        + 0.000077 * np.sin(2 * b)
    )
    return SOLAR_CONSTANT * factor


def relative_airmass(zenith) -> np.ndarray:
    """Kasten & Young (1989); NaN when the sun is below the horizon."""
    z = np.asarray(zenith, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        am = 1.0 / (np.cos(np.radians(z)) + 0.50572 * (96.07995 - z) ** -1.6364)
    return np.where(z < 90.0, am, np.nan)


def altitude_to_pressure(altitude) -> np.ndarray:
    """Standard-atmosphere surface pressure in Pa."""
    return 100.0 * ((44331.514 - np.asarray(altitude, dtype=np.float64)) / 11880.516) ** (1 / 0.1902632)


def ineichen(zenith, altitude, turbidity, dni_extra) -> ClearSkyTriple:
    """Ineichen/Perez clear-sky model for given geometry.

    All components are zero for zenith >= 90.
    """
    zenith = np.asarray(zenith, dtype=np.float64)
    day = zenith < 90.0
    cos_zen = np.where(day, np.cos(np.radians(zenith)), 0.0)
    am_abs = relative_airmass(zenith) * altitude_to_pressure(altitude) / 101325.0
    am_abs = np.where(day, am_abs, 0.0)

    tl = turbidity
    fh1 = np.exp(-altitude / 8000.0)
    fh2 = np.exp(-altitude / 1250.0)
    cg1 = 5.09e-5 * altitude + 0.868
    cg2 = 3.92e-5 * altitude + 0.0387

    ghi = cg1 * dni_extra * cos_zen * np.exp(-cg2 * am_abs * (fh1 + fh2 * (tl - 1)))
    ghi = np.maximum(ghi, 0.0)

    b = 0.664 + 0.163 / fh1
    bnci = b * np.exp(-0.09 * am_abs * (tl - 1)) * dni_extra
    with np.errstate(divide="ignore", invalid="ignore"):
        bnci_2 = (1 - (0.1 - 0.2 * np.exp(-tl)) / (0.1 + 0.882 / fh1)) / cos_zen
    bnci_2 = ghi * np.clip(np.nan_to_num(bnci_2, nan=0.0, posinf=1e20), 0.0, 1e20)
    dni = np.minimum(bnci, bnci_2)
    dhi = ghi - dni * cos_zen

    zero = np.zeros_like(ghi)
    return ClearSkyTriple(
        ghi=np.where(day, ghi, zero),
        dni=np.where(day, dni, zero),
        dhi=np.where(day, np.maximum(dhi, 0.0), zero),
    )


def clear_sky(t, meta, turbidity: float = 3.0) -> ClearSkyTriple:
    """Clear-sky GHI/DNI/DHI at a station (anything with latitude/longitude/elevation)."""
    if not 1.0 <= turbidity <= 10.0:
        raise ParameterError(f"Linke turbidity must lie in [1, 10], got {turbidity}")
    t = _as_datetime64(t)
    pos = solar_position(t, meta.latitude, meta.longitude)
    return ineichen(pos.zenith, float(meta.elevation), turbidity, extra_radiation(t))


def compose_ghi(dni, dhi, zenith):
    """GHI = DHI + DNI * cos(z), zero once the sun is below the horizon."""
    dni = np.asarray(dni, dtype=np.float64)
    dhi = np.asarray(dhi, dtype=np.float64)
    zenith = np.asarray(zenith, dtype=np.float64)
    if np.any(dni < 0) or np.any(dhi < 0):
        raise ValidationError("dni and dhi must be non-negative")
    if np.any((zenith < 0) | (zenith > 180)):
        raise ValidationError("zenith must lie in [0, 180] degrees")
    cos_zen = np.maximum(np.cos(np.radians(zenith)), 0.0)
    ghi = np.where(zenith > 90.0, 0.0, dhi + dni * cos_zen)
    return ghi if ghi.ndim else float(ghi)


def _neighbour_mean(f: np.ndarray) -> np.ndarray:
    # Horn-Schunck weighted 8-neighbour average, periodic on the last two axes
    rx = np.roll(f, 1, -1) + np.roll(f, -1, -1)
    edge = rx + np.roll(f, 1, -2) + np.roll(f, -1, -2)
    corner = np.roll(rx, 1, -2) + np.roll(rx, -1, -2)
    return edge / 6.0 + corner / 12.0


def horn_schunck(prev, nxt, alpha: float = 0.1, iterations: int = 100) -> FlowField:
    """Dense flow between frames; works on any stack of frames ``[..., H, W]``.

    Spatial gradients are central differences of the mean of both frames,
    which makes the estimate antisymmetric under swapping the frames.
    """
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise ShapeError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    if prev.ndim < 2:
        raise ShapeError("frames must have at least two dimensions")
    if not (np.isfinite(prev).all() and np.isfinite(nxt).all()):
        raise ValidationError("frames must be finite")

    mean = 0.5 * (prev + nxt)
    ix = 0.5 * (np.roll(mean, -1, -1) - np.roll(mean, 1, -1))
    iy = 0.5 * (np.roll(mean, -1, -2) - np.roll(mean, 1, -2))
    it = nxt - prev
    denom = alpha**2 + ix**2 + iy**2

    u = np.zeros_like(mean)
    v = np.zeros_like(mean)
    for _ in range(iterations):
        u_bar = _neighbour_mean(u)
        v_bar = _neighbour_mean(v)
        resid = (ix * u_bar + iy * v_bar + it) / denom
        u = u_bar - ix * resid
        v = v_bar - iy * resid
    return FlowField(u=u, v=v)


def optical_flow(prev, nxt, alpha: float = 0.1, iterations: int = 100) -> FlowField:
    """Flow field (cells per frame) moving ``prev`` onto ``nxt``.

    u runs along the column axis, v along the row axis.
    """
    prev = np.asarray(prev)
    nxt = np.asarray(nxt)
    if prev.ndim != 2:
        raise ShapeError(f"expected a single [H, W] frame, got shape {prev.shape}")
    return horn_schunck(prev, nxt, alpha=alpha, iterations=iterations)


def augment_context(cube, alpha: float = 0.1, iterations: int = 100):
    """Interleave per-channel flow (value, u, v) and append elevation.

    Flow at frame t is estimated from frames (t-1, t); frame 0 gets zeros so
    no channel ever looks ahead in time.
    """
    from .geodata import ContextCube

    frames = cube.frames
    n_t, n_c, h, w = frames.shape
    out = np.zeros((n_t, 3 * n_c + 1, h, w), dtype=np.float32)
    names = []
    for c, name in enumerate(cube.channels):
        out[:, 3 * c] = frames[:, c]
        if n_t > 1:
            flow = horn_schunck(frames[:-1, c], frames[1:, c], alpha=alpha, iterations=iterations)
            out[1:, 3 * c + 1] = flow.u
            out[1:, 3 * c + 2] = flow.v
        names += [name, f"{name}_u", f"{name}_v"]
    out[:, -1] = cube.elevation[None]
    names.append("elevation")
    return ContextCube(
        frames=out,
        lat=cube.lat,
        lon=cube.lon,
        elevation=cube.elevation,
        channels=tuple(names),
        timestamps=cube.timestamps,
    )

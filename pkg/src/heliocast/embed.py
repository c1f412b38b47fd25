"""Input encodings: cyclical time features, coordinates, axial ROPE, patches, masking."""
from __future__ import annotations

import math

import numpy as np
import torch
from einops import rearrange, repeat
from torch import nn

from .errors import ParameterError, ShapeError, ValidationError

# Period of each calendar feature; the year is not encoded.
TIME_PERIODS = {"month": 12, "day": 31, "hour": 24, "minute": 60}
TIME_FEATURES = 2 * len(TIME_PERIODS)


def calendar_fields(t) -> dict[str, np.ndarray]:
    t = np.asarray(t, dtype="datetime64[m]")
    year = t.astype("datetime64[Y]")
    month = t.astype("datetime64[M]")
    day = t.astype("datetime64[D]")
    hour = t.astype("datetime64[h]")
    return {
        "month": (month - year).astype(np.int64) + 1,
        "day": (day - month.astype("datetime64[D]")).astype(np.int64) + 1,
        "hour": (hour - day.astype("datetime64[h]")).astype(np.int64),
        "minute": (t - hour.astype("datetime64[m]")).astype(np.int64),
    }


def cyclical_time(t) -> np.ndarray:
    """``[..., 8]`` sin/cos pairs for month, day, hour and minute."""
    fields = calendar_fields(t)
    out = []
    for name, period in TIME_PERIODS.items():
        phase = 2.0 * np.pi * fields[name] / period
        out += [np.sin(phase), np.cos(phase)]
    return np.stack(out, axis=-1)


def normalize_coords(lat, lon):
    """Affine map of (lat, lon) degrees onto [-1, 1]^2."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise ValidationError("coordinates out of range")
    x_lat = 2.0 * ((lat + 90.0) / 180.0) - 1.0
    x_lon = 2.0 * ((lon + 180.0) / 360.0) - 1.0
    if x_lat.ndim == 0:
        return float(x_lat), float(x_lon)
    return x_lat, x_lon


def denormalize_coords(x_lat, x_lon):
    return (np.asarray(x_lat) + 1.0) * 90.0 - 90.0, (np.asarray(x_lon) + 1.0) * 180.0 - 180.0


def rope_scales(dim: int, max_freq: float) -> torch.Tensor:
    if dim % 4:
        raise ParameterError(f"rotary dim must be divisible by 4, got {dim}")
    return torch.linspace(1.0, max_freq / 2, dim // 4, dtype=torch.float64)


def rope_phases(coords, dim: int, max_freq: float = 128.0):
    """Axial rotary phases for tokens at normalized coordinates.

    ``coords`` is ``[..., N, 2]`` (lat, lon in [-1, 1]); returns ``(sin, cos)``
    of shape ``[..., N, dim]``. Half the width comes from each axis and every
    frequency is repeated for the two members of a rotation pair.
    """
    scales = rope_scales(dim, max_freq)
    coords = torch.as_tensor(coords)
    dtype = coords.dtype if coords.is_floating_point() else torch.float64
    coords = coords.to(dtype)
    scales = scales.to(dtype)
    ang = torch.cat(
        (coords[..., 0:1] * scales * math.pi, coords[..., 1:2] * scales * math.pi), dim=-1
    )
    ang = repeat(ang, "... n d -> ... n (d j)", j=2)
    return ang.sin(), ang.cos()


def rope_grid_phases(lat, lon, dim: int, max_freq: float = 128.0):
    """Phases for every cell of a lat x lon grid, flattened row-major."""
    lat = torch.as_tensor(lat)
    lon = torch.as_tensor(lon)
    grid = torch.stack(torch.meshgrid(lat, lon, indexing="ij"), dim=-1)
    return rope_phases(rearrange(grid, "i j c -> (i j) c"), dim, max_freq)


def rotate_pairs(x: torch.Tensor) -> torch.Tensor:
    """(x1, x2) -> (-x2, x1) on consecutive pairs of the last axis."""
    x = rearrange(x, "... (d j) -> ... d j", j=2)
    x1, x2 = x.unbind(dim=-1)
    return rearrange(torch.stack((-x2, x1), dim=-1), "... d j -> ... (d j)")


class _Rotary(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, sin, cos):
        ctx.save_for_backward(sin, cos)
        return x * cos + rotate_pairs(x) * sin

    @staticmethod
    def backward(ctx, grad):
        sin, cos = ctx.saved_tensors
        # rotation transpose: rotate by the negative angle
        grad_x = grad * cos - rotate_pairs(grad * sin)
        return grad_x, None, None


def apply_rotary(x: torch.Tensor, sin: torch.Tensor, cos: torch.Tensor) -> torch.Tensor:
    """Rotate query/key features pairwise by the given phases (norm preserving)."""
    if x.shape[-1] != sin.shape[-1] or sin.shape != cos.shape:
        raise ShapeError(f"rotary width mismatch: x {tuple(x.shape)}, phases {tuple(sin.shape)}")
    try:
        out_shape = torch.broadcast_shapes(x.shape, sin.shape)
    except RuntimeError:
        raise ShapeError(f"cannot broadcast phases {tuple(sin.shape)} onto {tuple(x.shape)}") from None
    if out_shape != x.shape:
        raise ShapeError(f"phases {tuple(sin.shape)} would broadcast x {tuple(x.shape)}")
    return _Rotary.apply(x, sin.to(x.dtype), cos.to(x.dtype))


# ------------------------------------------------------------------- patches

def patchify(frames: torch.Tensor, p: int) -> torch.Tensor:
    """``[..., C, H, W]`` -> ``[..., N_p, p*p*C]`` non-overlapping patches, row-major."""
    h, w = frames.shape[-2:]
    if p < 1 or h % p or w % p:
        raise ParameterError(f"patch size {p} does not divide frame size {h}x{w}")
    return rearrange(frames, "... c (h p1) (w p2) -> ... (h w) (p1 p2 c)", p1=p, p2=p)


def unpatchify(patches: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
    return rearrange(patches, "... (h w) (p1 p2 c) -> ... c (h p1) (w p2)", h=h // p, w=w // p,
                     p1=p, p2=p)


def patch_centers(lat, lon, p: int) -> np.ndarray:
    """Normalized (lat, lon) of each patch centre, ``[N_p, 2]`` row-major."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if len(lat) % p or len(lon) % p:
        raise ParameterError(f"patch size {p} does not divide grid {len(lat)}x{len(lon)}")
    c_lat = lat.reshape(-1, p).mean(1)
    c_lon = lon.reshape(-1, p).mean(1)
    g_lat, g_lon = np.meshgrid(c_lat, c_lon, indexing="ij")
    x_lat, x_lon = normalize_coords(g_lat.ravel(), g_lon.ravel())
    return np.stack([x_lat, x_lon], axis=-1)


class PatchEmbed(nn.Module):
    """Uniform frame sampling: every frame is cut into patches and projected."""

    def __init__(self, channels: int, patch: int, dim: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(patch * patch * channels, dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(frames, self.patch))


# ------------------------------------------------------------------- masking

def keep_count(n_tokens: int, ratio: float) -> int:
    return max(1, int(math.floor(n_tokens * (1.0 - ratio) + 1e-9)))


def mask_tokens(tokens, ratio: float, rng: np.random.Generator | None = None):
    """Drop a fraction ``ratio`` of tokens independently per frame.

    ``tokens`` is ``[F, N, d]`` (or ``[N, d]``). Returns the kept tokens and
    their (sorted) indices, ``[F, k]``, with ``k = max(1, floor(N (1 - ratio)))``.
    """
    if not 0.0 <= ratio <= 0.99:
        raise ParameterError(f"masking ratio must lie in [0, 0.99], got {ratio}")
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    n_frames, n = tokens.shape[:2]
    k = keep_count(n, ratio)
    if k == n:
        idx = np.broadcast_to(np.arange(n), (n_frames, n)).copy()
    else:
        if rng is None:
            raise ParameterError("masking with ratio > 0 needs an rng")
        idx = np.sort(np.argsort(rng.random((n_frames, n)), axis=1)[:, :k], axis=1)
    if isinstance(tokens, torch.Tensor):
        index = torch.as_tensor(idx, device=tokens.device)
        kept = torch.gather(tokens, 1, index[..., None].expand(-1, -1, tokens.shape[-1]))
    else:
        kept = np.take_along_axis(tokens, idx[..., None], axis=1)
    if squeeze:
        return kept[0], idx[0]
    return kept, idx

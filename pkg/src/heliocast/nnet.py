"""Transformer blocks and the CrossViViT forecaster.

Shapes use an explicit batch axis ``B``. Context frames are embedded one at a
time (uniform frame sampling), encoded per frame, then flattened into a single
``[B, T * k, d]`` memory that the series queries cross-attend to.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .embed import PatchEmbed, TIME_FEATURES, apply_rotary, mask_tokens, rope_phases
from .errors import NumericError, ParameterError, ShapeError

DEFAULT_QUANTILES = (0.02, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.98)


@dataclass
class ModelConfig:
    dim: int = 384
    depth: int = 16
    heads: int = 12
    dim_head: int = 64
    mlp_ratio: int = 4
    dropout: float = 0.4
    use_glu: bool = True
    decoder_dim: int = 128
    decoder_depth: int = 4
    decoder_heads: int = 6
    decoder_dim_head: int = 128
    patch_size: int = 8
    max_freq: float = 128.0
    num_mlp_heads: int = 1
    quantiles: list = field(default_factory=lambda: [0.5])
    ctx_masking_ratio: float = 0.99
    ts_masking_ratio: float = 0.0
    hist_len: int = 48
    pred_len: int = 48

    def __post_init__(self):
        if self.num_mlp_heads != len(self.quantiles) and self.num_mlp_heads > 1:
            raise ParameterError(
                f"num_mlp_heads={self.num_mlp_heads} but {len(self.quantiles)} quantiles given"
            )
        q = list(self.quantiles)
        if any(not 0.0 < a < 1.0 for a in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise ParameterError(f"quantiles must be strictly increasing in (0, 1), got {q}")
        if self.dim_head % 4:
            raise ParameterError("dim_head must be divisible by 4 for rotary encoding")
        if self.hist_len != self.pred_len:
            raise ParameterError("the decoder maps history tokens one-to-one onto forecast steps")

    @property
    def multiquantile(self) -> bool:
        return self.num_mlp_heads > 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def check_finite(x: torch.Tensor, layer: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError("non-finite activations", layer=layer)
    return x


# -------------------------------------------------------------------- blocks

class FeedForward(nn.Module):
    """GELU MLP, or its gated (GLU) variant: (a * gelu(g)) W_out."""

    def __init__(self, dim: int, mlp_ratio: int = 4, dropout: float = 0.0, use_glu: bool = True):
        super().__init__()
        hidden = mlp_ratio * dim
        self.use_glu = use_glu
        self.fc_in = nn.Linear(dim, 2 * hidden if use_glu else hidden)
        self.fc_out = nn.Linear(hidden, dim)
        self.dropout = dropout

    def forward(self, x):
        h = self.fc_in(x)
        if self.use_glu:
            a, gate = h.chunk(2, dim=-1)
            h = a * F.gelu(gate)
        else:
            h = F.gelu(h)
        h = F.dropout(h, self.dropout, self.training)
        return self.fc_out(h)


class Attention(nn.Module):
    """Multi-head attention; self-attention when ``context`` is None.

    Optional rotary phases ``(sin, cos)`` of width ``dim_head`` are applied to
    queries and keys; they broadcast over the head axis.
    """

    def __init__(self, dim: int, heads: int = 8, dim_head: int = 64, dropout: float = 0.0,
                 context_dim: int | None = None):
        super().__init__()
        inner = heads * dim_head
        self.heads, self.dim_head = heads, dim_head
        self.scale = dim_head ** -0.5
        self.to_q = nn.Linear(dim, inner)
        self.to_k = nn.Linear(context_dim or dim, inner)
        self.to_v = nn.Linear(context_dim or dim, inner)
        self.to_out = nn.Linear(inner, dim)
        self.dropout = dropout
        self.keep_weights = False
        self.last_weights = None

    def forward(self, x, context=None, q_phases=None, k_phases=None):
        context = x if context is None else context
        if context.shape[-1] != self.to_k.in_features:
            raise ShapeError(
                f"context width {context.shape[-1]} != expected {self.to_k.in_features}"
            )
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(context), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.to_v(context), "b n (h d) -> b h n d", h=self.heads)
        if q_phases is not None:
            q = apply_rotary(q, *(p.unsqueeze(-3) for p in q_phases))
        if k_phases is not None:
            k = apply_rotary(k, *(p.unsqueeze(-3) for p in k_phases))
        weights = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        weights = F.dropout(weights, self.dropout, self.training)
        out = rearrange(torch.matmul(weights, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class Block(nn.Module):
    """Pre-norm residual block: y = x + A(LN x); z = y + MLP(LN y).

    With ``cross=True`` the attention reads keys/values from a separately
    normalized context: y = x + CA(LN ctx, LN x).
    """

    def __init__(self, dim, heads, dim_head, mlp_ratio=4, dropout=0.0, use_glu=True,
                 cross=False, post_norm=False):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim) if cross else None
        self.attn = Attention(dim, heads, dim_head, dropout)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mlp_ratio, dropout, use_glu)
        self.norm_out = nn.LayerNorm(dim) if post_norm else None

    def forward(self, x, context=None, q_phases=None, k_phases=None):
        ctx = None if context is None else self.norm_ctx(context)
        y = self.attn(self.norm_attn(x), ctx, q_phases, k_phases) + x
        z = self.ff(self.norm_ff(y)) + y
        if self.norm_out is not None:
            z = self.norm_out(z)
        return z


class Stack(nn.Module):
    """``depth`` blocks applied in order; counts executed blocks in ``calls``."""

    def __init__(self, depth: int, name: str = "stack", **block_kw):
        super().__init__()
        self.name = name
        self.blocks = nn.ModuleList(Block(**block_kw) for _ in range(depth))
        self.calls = 0

    def forward(self, x, context=None, q_phases=None, k_phases=None):
        for i, block in enumerate(self.blocks):
            x = block(x, context, q_phases, k_phases)
            self.calls += 1
            check_finite(x, f"{self.name}.{i}")
        return x


def encoder_stack(tokens, stack: Stack, phases=None):
    """Self-attention encoder: L pre-norm residual blocks."""
    return stack(tokens, None, phases, phases)


def mixer_stack(z_ctx, z_ts, stack: Stack, q_phases=None, k_phases=None):
    """Cross-attention mixer.

    The first block queries the series latent, later blocks the running mixed
    latent; keys and values always come from the final context latent.
    """
    return stack(z_ts, z_ctx, q_phases, k_phases)


def decoder_stack(z_mix, stack: Stack, pos: torch.Tensor):
    """Add the decoder positional embedding then run post-normed blocks."""
    return stack(z_mix + pos)


class QuantileHead(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


# ----------------------------------------------------------------- the model

class CrossViViT(nn.Module):
    def __init__(self, cfg: ModelConfig, ts_channels: int, ctx_channels: int):
        super().__init__()
        self.cfg = cfg
        self.ts_channels, self.ctx_channels = ts_channels, ctx_channels
        d, dd = cfg.dim, cfg.decoder_dim
        common = dict(heads=cfg.heads, dim_head=cfg.dim_head, mlp_ratio=cfg.mlp_ratio,
                      dropout=cfg.dropout, use_glu=cfg.use_glu)

        self.ctx_embed = PatchEmbed(ctx_channels, cfg.patch_size, d)
        # Time features broadcast over a frame and concatenated to its channels
        # project linearly to the same additive term for every patch.
        self.ctx_time = nn.Linear(TIME_FEATURES, d, bias=False)
        self.ts_embed = nn.Linear(ts_channels + TIME_FEATURES, d)
        self.ts_pos = nn.Parameter(torch.zeros(cfg.hist_len, d))
        self.ts_mask_token = nn.Parameter(torch.zeros(d))

        self.ctx_encoder = Stack(cfg.depth, "ctx_encoder", dim=d, **common)
        self.ts_encoder = Stack(cfg.depth, "ts_encoder", dim=d, **common)
        self.mixer = Stack(cfg.depth, "mixer", dim=d, cross=True, **common)

        self.bridge = nn.Linear(d, dd)
        self.dec_pos = nn.Parameter(torch.zeros(cfg.pred_len, dd))
        self.decoder = Stack(cfg.decoder_depth, "decoder", dim=dd, heads=cfg.decoder_heads,
                             dim_head=cfg.decoder_dim_head, mlp_ratio=cfg.mlp_ratio,
                             dropout=cfg.dropout, use_glu=cfg.use_glu, post_norm=True)
        self.heads = nn.ModuleList(QuantileHead(dd) for _ in range(cfg.num_mlp_heads))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None):
        norm_params = {id(p) for m in self.modules() if isinstance(m, nn.LayerNorm)
                       for p in m.parameters()}
        with torch.no_grad():
            for name, p in self.named_parameters():
                if id(p) in norm_params:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.normal_(0.0, 0.02, generator=generator)
            # residual branches start as identity maps
            for stack in (self.ctx_encoder, self.ts_encoder, self.mixer, self.decoder):
                for block in stack.blocks:
                    block.attn.to_out.weight.zero_()
                    block.ff.fc_out.weight.zero_()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, ts, ts_time, ctx, ctx_time, ctx_coords, station_coords,
                ctx_mask_ratio: float = 0.0, ts_mask_ratio: float = 0.0,
                rng: np.random.Generator | None = None, zero_context: bool = False):
        """Forecast ``[B, pred_len, Q]`` in normalized target units.

        ts:             [B, T, C_ts] series channels
        ts_time:        [B, T, 8] cyclical time features of the history
        ctx:            [B, T, C_ctx, H, W] context frames
        ctx_time:       [B, T, 8] (same stamps as ``ts_time`` for aligned data)
        ctx_coords:     [N_p, 2] normalized patch-centre coordinates
        station_coords: [B, 2] normalized station coordinates

        Masking ratios are honoured in training mode only.
        """
        cfg = self.cfg
        if not self.training:
            # inference never masks
            ctx_mask_ratio = ts_mask_ratio = 0.0
        b, t = ts.shape[:2]
        if t != cfg.hist_len or ctx.shape[1] != t:
            raise ShapeError(f"expected {cfg.hist_len} history steps, got ts {t}, ctx {ctx.shape[1]}")
        check_finite(ts, "input.ts")
        check_finite(ctx, "input.ctx")

        # context tokens: every frame embedded independently
        frames = rearrange(ctx, "b t c h w -> (b t) c h w")
        z_ctx = self.ctx_embed(frames) + rearrange(self.ctx_time(ctx_time), "b t d -> (b t) 1 d")
        coords = torch.as_tensor(ctx_coords, dtype=z_ctx.dtype)
        coords = coords.expand(b * t, -1, -1)
        if ctx_mask_ratio > 0:
            z_ctx, idx = mask_tokens(z_ctx, ctx_mask_ratio, rng)
            index = torch.as_tensor(idx)[..., None].expand(-1, -1, 2)
            coords = torch.gather(coords, 1, index)
        ctx_phases = rope_phases(coords, cfg.dim_head, cfg.max_freq)
        z_ctx = encoder_stack(z_ctx, self.ctx_encoder, ctx_phases)
        z_ctx = rearrange(z_ctx, "(b t) n d -> b (t n) d", b=b)
        if zero_context:
            z_ctx = torch.zeros_like(z_ctx)

        # series tokens
        z_ts = self.ts_embed(torch.cat([ts, ts_time.to(ts.dtype)], dim=-1))
        if ts_mask_ratio > 0:
            keep = torch.zeros(b, t, dtype=torch.bool)
            _, idx = mask_tokens(np.zeros((b, t, 1)), ts_mask_ratio, rng)
            keep[torch.arange(b)[:, None], torch.as_tensor(idx)] = True
            z_ts = torch.where(keep[..., None], z_ts, self.ts_mask_token.to(z_ts.dtype))
        z_ts = z_ts + self.ts_pos
        z_ts = encoder_stack(z_ts, self.ts_encoder)

        # mixing: station position against patch positions
        k_phases = tuple(rearrange(p, "(b t) n d -> b (t n) d", b=b) for p in ctx_phases)
        q_phases = rope_phases(torch.as_tensor(station_coords, dtype=z_ts.dtype)[:, None, :],
                               cfg.dim_head, cfg.max_freq)
        z_mix = mixer_stack(z_ctx, z_ts, self.mixer, q_phases, k_phases)

        z = decoder_stack(self.bridge(z_mix), self.decoder, self.dec_pos)
        out = torch.cat([head(z) for head in self.heads], dim=-1)
        return check_finite(out, "heads")


def build_model(cfg: ModelConfig, ts_channels: int, ctx_channels: int,
                seed: int | None = None) -> CrossViViT:
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
    model = CrossViViT(cfg, ts_channels, ctx_channels)
    model.reset_parameters(gen)
    return model

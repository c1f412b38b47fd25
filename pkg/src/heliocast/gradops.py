"""Standard differentiable ops registered for finite-difference gradient checks.

Every factory takes a ``torch.Generator`` and returns ``(fn, tensors)`` where
``fn()`` evaluates a scalar from the float64 ``tensors`` (inputs and the
parameters of the op). Parameters are drawn away from their identity-style
initial values so no gradient is trivially zero.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .embed import PatchEmbed, apply_rotary, rope_phases, rotate_pairs
from .nnet import Attention, Block, CrossViViT, FeedForward, ModelConfig, QuantileHead, Stack
from .train import mql_loss, quantile_loss, register_op

D = torch.float64


def _randn(gen, *shape, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=D) * scale).requires_grad_(True)


def _weights(gen, shape):
    # fixed random projection turning a tensor output into a scalar
    return torch.randn(*shape, generator=gen, dtype=D)


def _module_op(module: nn.Module, gen, inputs: dict, call, scale=0.3):
    module = module.double().eval()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=D) * scale)
    tensors = dict(inputs)
    tensors.update({f"param.{n}": p for n, p in module.named_parameters()})
    out_w = {}

    def fn():
        out = call(module, **inputs)
        if "w" not in out_w:
            out_w["w"] = _weights(gen, out.shape)
        return (out * out_w["w"]).sum()

    return fn, tensors


@register_op("linear")
def _linear(gen):
    return _module_op(nn.Linear(5, 3), gen, {"x": _randn(gen, 4, 5)}, lambda m, x: m(x))


@register_op("layer_norm")
def _layer_norm(gen):
    return _module_op(nn.LayerNorm(6), gen, {"x": _randn(gen, 3, 6)}, lambda m, x: m(x))


@register_op("gelu")
def _gelu(gen):
    x = _randn(gen, 12, scale=2.0)
    w = _weights(gen, (12,))
    return (lambda: (F.gelu(x) * w).sum()), {"x": x}


@register_op("softmax")
def _softmax(gen):
    x = _randn(gen, 3, 5)
    w = _weights(gen, (3, 5))
    return (lambda: (torch.softmax(x, -1) * w).sum()), {"x": x}


@register_op("rotary")
def _rotary(gen):
    x = _randn(gen, 2, 5, 8)
    coords = torch.rand(5, 2, generator=gen, dtype=D) * 2 - 1
    sin, cos = rope_phases(coords, 8, 16.0)
    w = _weights(gen, (2, 5, 8))
    return (lambda: (apply_rotary(x, sin, cos) * w).sum()), {"x": x}


@register_op("patch_embed")
def _patch_embed(gen):
    return _module_op(PatchEmbed(2, 2, 4), gen, {"frames": _randn(gen, 1, 2, 4, 4)},
                      lambda m, frames: m(frames))


@register_op("feed_forward")
def _feed_forward(gen):
    return _module_op(FeedForward(4, 2, use_glu=True), gen, {"x": _randn(gen, 2, 3, 4)},
                      lambda m, x: m(x))


@register_op("self_attention")
def _self_attention(gen):
    coords = torch.rand(5, 2, generator=gen, dtype=D) * 2 - 1
    phases = rope_phases(coords, 4, 16.0)
    return _module_op(Attention(8, heads=2, dim_head=4), gen, {"x": _randn(gen, 2, 5, 8)},
                      lambda m, x: m(x, None, phases, phases))


@register_op("cross_attention")
def _cross_attention(gen):
    return _module_op(Attention(8, heads=2, dim_head=4), gen,
                      {"x": _randn(gen, 2, 3, 8), "ctx": _randn(gen, 2, 6, 8)},
                      lambda m, x, ctx: m(x, ctx))


@register_op("encoder_stack")
def _encoder_stack(gen):
    stack = Stack(2, "enc", dim=16, heads=2, dim_head=8, mlp_ratio=2)
    return _module_op(stack, gen, {"x": _randn(gen, 1, 4, 16)}, lambda m, x: m(x), scale=0.2)


@register_op("decoder_block")
def _decoder_block(gen):
    block = Block(8, 2, 4, mlp_ratio=2, post_norm=True)
    return _module_op(block, gen, {"x": _randn(gen, 1, 4, 8)}, lambda m, x: m(x))


@register_op("quantile_head")
def _quantile_head(gen):
    return _module_op(QuantileHead(6), gen, {"x": _randn(gen, 3, 6)}, lambda m, x: m(x))


@register_op("quantile_loss")
def _quantile_loss(gen):
    y = torch.randn(20, generator=gen, dtype=D)
    y_hat = _randn(gen, 20)
    return (lambda: quantile_loss(y, y_hat, 0.3)), {"y_hat": y_hat}


@register_op("mql_loss")
def _mql_loss(gen):
    levels = [0.1, 0.5, 0.9]
    y = torch.randn(6, generator=gen, dtype=D)
    fan = _randn(gen, 6, 3)
    return (lambda: mql_loss(y, fan, levels)), {"fan": fan}


def micro_model_config(**overrides) -> ModelConfig:
    base = dict(dim=16, depth=2, heads=2, dim_head=8, mlp_ratio=2, dropout=0.0,
                decoder_dim=16, decoder_depth=1, decoder_heads=2, decoder_dim_head=8,
                patch_size=2, max_freq=16.0, hist_len=4, pred_len=4)
    base.update(overrides)
    return ModelConfig(**base)


@register_op("crossvivit")
def _crossvivit(gen):
    cfg = micro_model_config()
    b, t, c_ts, c_ctx, hw = 1, 4, 3, 2, 4
    model = CrossViViT(cfg, c_ts, c_ctx)
    coords = torch.rand(4, 2, generator=gen, dtype=D) * 2 - 1
    inputs = {
        "ts": _randn(gen, b, t, c_ts),
        "ts_time": torch.randn(b, t, 8, generator=gen, dtype=D),
        "ctx": _randn(gen, b, t, c_ctx, hw, hw),
        "ctx_time": torch.randn(b, t, 8, generator=gen, dtype=D),
    }
    station = torch.rand(b, 2, generator=gen, dtype=D) * 2 - 1

    def call(m, ts, ts_time, ctx, ctx_time):
        return m(ts, ts_time, ctx, ctx_time, coords, station)

    return _module_op(model, gen, inputs, call, scale=0.2)


# ---------------------------------------------------------- negative control

class _BrokenRotary(torch.autograd.Function):
    """Rotary op whose backward forgets the transpose (a sign slip)."""

    @staticmethod
    def forward(ctx, x, sin, cos):
        ctx.save_for_backward(sin, cos)
        return x * cos + rotate_pairs(x) * sin

    @staticmethod
    def backward(ctx, grad):
        sin, cos = ctx.saved_tensors
        return grad * cos + rotate_pairs(grad * sin), None, None


NEGATIVE_CONTROL = "broken_rotary"


def register_negative_control() -> str:
    """Register an op with a deliberately wrong backward; returns its name."""

    @register_op(NEGATIVE_CONTROL)
    def _broken(gen):
        x = _randn(gen, 2, 5, 8)
        coords = torch.rand(5, 2, generator=gen, dtype=D) * 2 - 1
        sin, cos = rope_phases(coords, 8, 16.0)
        w = _weights(gen, (2, 5, 8))
        return (lambda: (_BrokenRotary.apply(x, sin, cos) * w).sum()), {"x": x}

    return NEGATIVE_CONTROL

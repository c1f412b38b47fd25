"""Losses, optimizer, learning-rate schedule, training loop and gradient checks."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericError, ParameterError, ShapeError
from .nnet import CrossViViT, ModelConfig, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HELIOCAST-CKPT-1\n"


# -------------------------------------------------------------------- losses

def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def quantile_loss(y, y_hat, alpha: float):
    """mean(max(alpha (y_hat - y), (1 - alpha) (y - y_hat))).

    Note this is the textbook pinball loss at level ``1 - alpha``: the head
    trained with ``alpha`` estimates the ``1 - alpha`` quantile.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"quantile level must lie in (0, 1), got {alpha}")
    numpy_in = not isinstance(y_hat, torch.Tensor)
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    diff = y_hat - y
    loss = torch.maximum(alpha * diff, (alpha - 1.0) * diff).mean()
    return float(loss) if numpy_in else loss


def pinball(y, y_hat, tau: float):
    """Textbook quantile (pinball) loss, averaged."""
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    e = y - y_hat
    return torch.maximum(tau * e, (tau - 1.0) * e).mean()


def mql_loss(y, fan, levels: Sequence[float]):
    """Sum over quantile levels of the per-level loss; ``fan`` is ``[..., T, Q]``."""
    numpy_in = not isinstance(fan, torch.Tensor)
    y, fan = _as_tensor(y), _as_tensor(fan)
    if fan.shape[-1] != len(levels):
        raise ShapeError(f"fan has {fan.shape[-1]} columns for {len(levels)} quantile levels")
    if y.shape == fan.shape[:-1] + (1,):
        y = y[..., 0]
    if y.shape != fan.shape[:-1]:
        raise ShapeError(f"target {tuple(y.shape)} does not match fan {tuple(fan.shape)}")
    total = sum(quantile_loss(y, fan[..., i], a) for i, a in enumerate(levels))
    return float(total) if numpy_in else total


# ------------------------------------------------------- optimizer, schedule

@dataclass
class TrainConfig:
    lr_peak: float = 0.0016
    warmup_epochs: float = 5
    weight_decay: float = 0.05
    batch_size: int = 20
    max_epochs: int = 17
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    train_stride: int = 1
    eval_stride: int = 48
    samples_per_epoch: int | None = None
    strict: bool = False

    def __post_init__(self):
        for name in ("lr_peak", "batch_size", "max_epochs", "train_stride", "eval_stride"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.max_epochs:
            raise ConfigError("warmup_epochs must be non-negative and below max_epochs")
        if self.weight_decay < 0 or self.patience < 1:
            raise ConfigError("weight_decay must be >= 0 and patience >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, warmup_steps: int, total_steps: int, lr_peak: float) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ParameterError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_peak * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: list | None = None
    v: list | None = None


def optimizer_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
                   state: AdamState, lr: float, weight_decay: float = 0.05,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                   decay_mask: Sequence[bool] | None = None) -> AdamState:
    """Adaptive-moment step with decoupled weight decay, updating ``params`` in place.

    The decay term shrinks weights by ``lr * weight_decay`` independently of
    the gradient moments. Raises before touching anything if a gradient is
    not finite.
    """
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient; step refused")
    if state.m is None:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    decay_mask = decay_mask or [True] * len(params)
    with torch.no_grad():
        for p, g, m, v, decay in zip(params, grads, state.m, state.v, decay_mask):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            if decay and weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            p.addcdiv_(m / bc1, (v / bc2).sqrt_().add_(eps), value=-lr)
    return state


def clip_grad_norm(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


def decays(name: str, p: torch.Tensor) -> bool:
    return p.ndim >= 2 and not name.endswith("_pos")


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Single-file container: magic line, JSON header, raw little-endian tensors."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": str(t.dtype).replace("torch.", ""),
                        "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({**meta, "tensors": entries}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path} is not a HELIOCAST-CKPT-1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", data[pos : pos + 8])
    header = json.loads(data[pos + 8 : pos + 8 + n])
    base = pos + 8 + n
    tensors = {}
    for e in header.pop("tensors"):
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(data, dtype=dtype, count=e["nbytes"] // dtype.itemsize,
                            offset=base + e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).clone()
    return tensors, header


# ------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: CrossViViT
    history: list[EpochRecord]
    best_val: float
    best_epoch: int
    best_path: Path | None = None
    last_path: Path | None = None


def set_strict(strict: bool) -> None:
    """Single-threaded, deterministic-kernel numerics for bitwise reproducibility."""
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _rng_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def forward_batch(model: CrossViViT, batch: dict, ctx_ratio=0.0, ts_ratio=0.0, rng=None,
                  zero_context=False):
    return model(batch["ts"], batch["ts_time"], batch["ctx"], batch["ctx_time"],
                 batch["ctx_coords"], batch["station_coords"], ctx_mask_ratio=ctx_ratio,
                 ts_mask_ratio=ts_ratio, rng=rng, zero_context=zero_context)


def batch_loss(model: CrossViViT, out: torch.Tensor, target: torch.Tensor):
    if model.cfg.multiquantile:
        return mql_loss(target, out, model.cfg.quantiles)
    return (out - target).abs().mean()


class Trainer:
    """Owns the model, optimizer state and rng streams of one training run."""

    def __init__(self, prepared, model_cfg: ModelConfig, cfg: TrainConfig, train_samples,
                 val_samples, out_dir=None, zero_context: bool = False, extra_meta=None):
        if not train_samples:
            raise ConfigError("training designation produced no samples")
        if not val_samples:
            raise ConfigError("validation designation produced no samples")
        if cfg.strict:
            set_strict(True)
        self.prepared, self.model_cfg, self.cfg = prepared, model_cfg, cfg
        self.train_samples, self.val_samples = train_samples, val_samples
        self.out_dir = Path(out_dir) if out_dir else None
        self.zero_context = zero_context
        self.extra_meta = extra_meta or {}

        torch.manual_seed(cfg.seed)
        self.model = build_model(model_cfg, prepared.n_ts_inputs, prepared.n_ctx_inputs,
                                 seed=cfg.seed)
        self.names = [n for n, _ in self.model.named_parameters()]
        self.params = [p for _, p in self.model.named_parameters()]
        self.decay_mask = [decays(n, p) for n, p in self.model.named_parameters()]
        self.opt = AdamState()
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.step = 0
        self.history: list[EpochRecord] = []
        self.best_val = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

        n = len(train_samples) if cfg.samples_per_epoch is None \
            else min(cfg.samples_per_epoch, len(train_samples))
        self.steps_per_epoch = math.ceil(n / cfg.batch_size)
        self.warmup_steps = int(round(cfg.warmup_epochs * self.steps_per_epoch))
        self.total_steps = cfg.max_epochs * self.steps_per_epoch

    # -- state --------------------------------------------------------------
    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"model.{n}": p.detach() for n, p in zip(self.names, self.params)}
        if self.opt.m is not None:
            for n, m, v in zip(self.names, self.opt.m, self.opt.v):
                out[f"opt.m.{n}"] = m
                out[f"opt.v.{n}"] = v
        out["rng.torch"] = torch.get_rng_state()
        return out

    def meta(self) -> dict:
        from .pipeline import norm_to_json
        return {
            "format": CHECKPOINT_MAGIC.decode().strip(),
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "norm": norm_to_json(self.prepared.norm),
            "inputs": {"ts_channels": list(self.prepared.ts_channels),
                       "ctx_channels": list(self.prepared.ctx_channels),
                       "patch_size": self.prepared.patch_size},
            "zero_context": self.zero_context,
            "rng": {"numpy": _rng_to_json(self.rng)},
            "train_state": {
                "epoch": self.epoch, "step": self.step, "opt_step": self.opt.step,
                "best_val": self.best_val if math.isfinite(self.best_val) else None,
                "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs,
                "history": [asdict(h) for h in self.history],
            },
            **self.extra_meta,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.state_tensors(), self.meta())

    def restore(self, path) -> None:
        tensors, meta = load_checkpoint(path)
        with torch.no_grad():
            for n, p in zip(self.names, self.params):
                p.copy_(tensors[f"model.{n}"])
        if f"opt.m.{self.names[0]}" in tensors:
            self.opt.m = [tensors[f"opt.m.{n}"].clone() for n in self.names]
            self.opt.v = [tensors[f"opt.v.{n}"].clone() for n in self.names]
        st = meta["train_state"]
        self.opt.step = st["opt_step"]
        self.epoch, self.step = st["epoch"], st["step"]
        self.best_val = math.inf if st["best_val"] is None else st["best_val"]
        self.best_epoch, self.bad_epochs = st["best_epoch"], st["bad_epochs"]
        self.history = [EpochRecord(**h) for h in st["history"]]
        self.rng = _rng_from_json(meta["rng"]["numpy"])
        torch.set_rng_state(tensors["rng.torch"])

    # -- loop ---------------------------------------------------------------
    def train_epoch(self) -> float:
        cfg = self.cfg
        self.model.train()
        order = self.rng.permutation(len(self.train_samples))
        if cfg.samples_per_epoch is not None:
            order = order[: cfg.samples_per_epoch]
        total, count = 0.0, 0
        lr = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = self.prepared.batch([self.train_samples[i] for i in idx])
            ctx_ratio = float(self.rng.uniform(0.0, self.model_cfg.ctx_masking_ratio))
            ts_ratio = float(self.rng.uniform(0.0, self.model_cfg.ts_masking_ratio)) \
                if self.model_cfg.ts_masking_ratio > 0 else 0.0
            out = forward_batch(self.model, batch, ctx_ratio, ts_ratio, self.rng,
                                zero_context=self.zero_context)
            loss = batch_loss(self.model, out, batch["target"])
            grads = torch.autograd.grad(loss, self.params, allow_unused=True)
            # the series mask token is unused when series masking is off
            grads = [torch.zeros_like(p) if g is None else g.clone()
                     for p, g in zip(self.params, grads)]
            clip_grad_norm(grads, cfg.grad_clip)
            lr = lr_schedule(self.step, self.warmup_steps, self.total_steps, cfg.lr_peak)
            optimizer_step(self.params, grads, self.opt, lr, cfg.weight_decay, cfg.beta1,
                           cfg.beta2, cfg.eps, self.decay_mask)
            self.step += 1
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        self._last_lr = lr
        return total / count

    @torch.no_grad()
    def validate(self) -> float:
        self.model.eval()
        total, count = 0.0, 0
        for start in range(0, len(self.val_samples), 64):
            chunk = self.val_samples[start : start + 64]
            batch = self.prepared.batch(chunk)
            out = forward_batch(self.model, batch, zero_context=self.zero_context)
            total += float(batch_loss(self.model, out, batch["target"])) * len(chunk)
            count += len(chunk)
        return total / count

    def run(self, epochs: int | None = None, on_epoch: Callable | None = None) -> TrainResult:
        """Train until max_epochs or early stop; ``epochs`` caps this call."""
        cfg = self.cfg
        done = 0
        while self.epoch < cfg.max_epochs and self.bad_epochs < cfg.patience:
            if epochs is not None and done >= epochs:
                break
            t0 = time.perf_counter()
            train_loss = self.train_epoch()
            val_loss = self.validate()
            self.epoch += 1
            done += 1
            self.history.append(EpochRecord(self.epoch, train_loss, val_loss, self._last_lr))
            improved = val_loss < self.best_val
            if improved:
                self.best_val, self.best_epoch, self.bad_epochs = val_loss, self.epoch, 0
            else:
                self.bad_epochs += 1
            logger.info("epoch %d train %.5f val %.5f (%.1fs)%s", self.epoch, train_loss,
                        val_loss, time.perf_counter() - t0, " *" if improved else "")
            if self.out_dir is not None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                if improved:
                    self.save(self.out_dir / "best.ckpt")
                self.save(self.out_dir / "last.ckpt")
                write_history(self.out_dir / "history.csv", self.history)
            elif improved:
                self._best_state = {k: v.clone() for k, v in self.state_tensors().items()}
            if on_epoch:
                on_epoch(self)
        return self.result()

    def result(self) -> TrainResult:
        best_path = last_path = None
        model = self.model
        if self.out_dir is not None and (self.out_dir / "best.ckpt").exists():
            best_path, last_path = self.out_dir / "best.ckpt", self.out_dir / "last.ckpt"
            model = load_model(best_path)[0]
        elif getattr(self, "_best_state", None) is not None:
            model = build_model(self.model_cfg, self.prepared.n_ts_inputs,
                                self.prepared.n_ctx_inputs)
            with torch.no_grad():
                for n, p in model.named_parameters():
                    p.copy_(self._best_state[f"model.{n}"])
        model.eval()
        return TrainResult(model, list(self.history), self.best_val, self.best_epoch,
                           best_path, last_path)


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.lr)])


def train(prepared, model_cfg: ModelConfig, cfg: TrainConfig, train_samples, val_samples,
          out_dir=None, zero_context: bool = False, resume=None, extra_meta=None,
          stop_after: int | None = None) -> TrainResult:
    """Train (or continue from ``resume``); ``stop_after`` pauses after that many epochs
    without changing the schedule, so a later resume matches an uninterrupted run."""
    trainer = Trainer(prepared, model_cfg, cfg, train_samples, val_samples, out_dir,
                      zero_context, extra_meta)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run(epochs=stop_after)


def load_model(path) -> tuple[CrossViViT, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    inputs = meta["inputs"]
    model = build_model(cfg, len(inputs["ts_channels"]) + 1, len(inputs["ctx_channels"]))
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(tensors[f"model.{n}"])
    model.eval()
    return model, meta


@torch.no_grad()
def predict(model: CrossViViT, prepared, samples, zero_context: bool = False,
            batch_size: int = 64) -> np.ndarray:
    """Forecast fan in W/m^2, ``[N, pred_len, Q]``; quantile columns sorted."""
    model.eval()
    outs = []
    for start in range(0, len(samples), batch_size):
        batch = prepared.batch(samples[start : start + batch_size])
        out = forward_batch(model, batch, zero_context=zero_context)
        outs.append(out.double().numpy())
    fan = prepared.to_wm2(np.concatenate(outs, axis=0))
    return np.sort(fan, axis=-1)


# ------------------------------------------------------------- grad checking

@dataclass
class TensorCheck:
    name: str
    rel_error: float


@dataclass
class GradCheckReport:
    op: str
    checks: list[TensorCheck]
    tolerance: float
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.checks:
            return None
        return max(self.checks, key=lambda c: c.rel_error).name

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


GRAD_OPS: dict[str, Callable] = {}


def register_op(name: str):
    """Register a factory returning ``(fn, {name: tensor})``; fn() -> scalar."""
    def deco(factory):
        GRAD_OPS[name] = factory
        return factory
    return deco


def grad_check(op: str, trials: int = 2, tolerance: float = 1e-4, eps: float = 1e-5,
               seed: int = 0, elementwise_limit: int = 16) -> GradCheckReport:
    """Compare autograd gradients with central finite differences (float64).

    Small tensors are checked element by element, larger ones along random
    unit directions (``trials`` per tensor). The relative error of a pair
    ``(a, n)`` is ``|a - n| / max(|a|, |n|, floor)`` where the floor,
    ``1e-6 * max(1, |f|)``, keeps mathematically zero gradients (for example
    a key bias under softmax) from turning rounding noise into failures.
    """
    if op not in GRAD_OPS:
        raise LookupError(f"no gradient check registered for '{op}'")
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    fn, tensors = GRAD_OPS[op](gen)
    for x in tensors.values():
        x.requires_grad_(True)
    loss = fn()
    floor = 1e-6 * max(1.0, abs(float(loss.detach())))
    analytic = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    checks = []
    for (name, x), g in zip(tensors.items(), analytic):
        g = torch.zeros_like(x) if g is None else g
        if x.numel() <= elementwise_limit:
            directions = [torch.zeros(x.numel(), dtype=x.dtype).index_fill_(0, torch.tensor([i]), 1.0)
                          .view_as(x) for i in range(x.numel())]
        else:
            directions = []
            for _ in range(trials):
                d = torch.randn(x.shape, dtype=x.dtype, generator=gen)
                directions.append(d / d.norm())
        err = 0.0
        for d in directions:
            a = float((g * d).sum())
            n = _directional(fn, x, d, eps)
            err = max(err, abs(a - n) / max(abs(a), abs(n), floor))
        checks.append(TensorCheck(name, err))
    return GradCheckReport(op, checks, tolerance, time.perf_counter() - t0)


@torch.no_grad()
def _directional(fn, x: torch.Tensor, d: torch.Tensor, eps: float) -> float:
    orig = x.detach().clone()
    x.copy_(orig + eps * d)
    up = float(fn())
    x.copy_(orig - eps * d)
    down = float(fn())
    x.copy_(orig)
    return (up - down) / (2 * eps)


def grad_check_all(tolerance: float = 1e-4, ops: Sequence[str] | None = None):
    from . import gradops  # noqa: F401  registers the standard ops
    return [grad_check(op, tolerance=tolerance) for op in (ops or list(GRAD_OPS))]

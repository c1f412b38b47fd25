"""End-to-end runs on a synthetic world: generate, prepare, train, score.

Shared by the acceptance suite and the scripts in ``scripts/``; the CLI runs the
same steps through files on disk.
"""
from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .evaluation import EvalReport, Forecast, evaluate
from .pipeline import Prepared, RawDataset
from .synth import SynthWorld, generate
from .train import TrainResult, predict, train


@dataclass
class Scored:
    report: EvalReport
    forecast: Forecast
    result: TrainResult


def prepare(cfg: RunConfig, world: SynthWorld | None = None) -> Prepared:
    world = world if world is not None else generate(cfg.synth)
    return Prepared(RawDataset(world.stations, world.cube), fit_on=cfg.data.designation("train"),
                    patch_size=cfg.model.patch_size, flow_alpha=cfg.data.flow_alpha,
                    flow_iterations=cfg.data.flow_iterations)


def fit(cfg: RunConfig, prep: Prepared, zero_context: bool = False, out_dir=None) -> TrainResult:
    m = cfg.model
    tr = prep.windows(cfg.data.designation("train"), cfg.train.train_stride, m.hist_len, m.pred_len)
    va = prep.windows(cfg.data.designation("val"), cfg.train.eval_stride, m.hist_len, m.pred_len)
    return train(prep, m, cfg.train, tr, va, out_dir=out_dir, zero_context=zero_context)


def score(cfg: RunConfig, prep: Prepared, result: TrainResult, name: str = "CrossViViT",
          zero_context: bool = False) -> Scored:
    """Evaluate the trained model on the test designation (W/m^2, All/Easy/Hard)."""
    m, test = cfg.model, cfg.data.designation("test")
    samples = prep.windows(test, cfg.data.eval_stride, m.hist_len, m.pred_len)
    raw = prep.raw_windows(test, cfg.data.eval_stride, m.hist_len, m.pred_len)
    fan = predict(result.model, prep, samples, zero_context=zero_context)
    levels = m.quantiles if m.multiquantile else None
    report, forecast = evaluate(None, raw, name, daylight_only=cfg.eval.daylight_only,
                                pooling=cfg.eval.pooling, forecast=Forecast(fan, levels))
    return Scored(report, forecast, result)


def run(cfg: RunConfig, zero_context: bool = False, prep: Prepared | None = None,
        name: str = "CrossViViT") -> Scored:
    prep = prep if prep is not None else prepare(cfg)
    result = fit(cfg, prep, zero_context)
    return score(cfg, prep, result, name, zero_context)

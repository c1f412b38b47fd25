"""``heliocast`` command line: synth, train, evaluate, forecast, gradcheck, report.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .config import RunConfig, load_config, parse_override, deep_merge
from .errors import ConfigError, HeliocastError
from .geodata import format_timestamp, parse_timestamp
from .nnet import DEFAULT_QUANTILES

logger = logging.getLogger("heliocast")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- helpers

def configure_threads(strict: bool) -> None:
    from .train import set_strict
    threads = os.environ.get("HELIOCAST_THREADS")
    if strict:
        set_strict(True)
    elif threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            raise UsageError(f"HELIOCAST_THREADS must be an integer, got '{threads}'") from None


def resolve_config(args) -> RunConfig:
    """Config file (or a previous run.json) plus ``--set`` overrides."""
    overrides = list(getattr(args, "set", None) or [])
    path = getattr(args, "config", None)
    if path and Path(path).suffix == ".json" and Path(path).is_file():
        doc = json.loads(Path(path).read_text())
        doc = doc.get("config", doc)
        for o in overrides:
            doc = deep_merge(doc, parse_override(o))
        return RunConfig.from_dict(doc)
    return load_config(path, overrides)


def write_run_json(out_dir: Path, command: str, cfg: RunConfig | None, args) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command,
              "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"}}
    if cfg is not None:
        record["config"] = cfg.to_dict()
        record["seed"] = cfg.seed
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _designation(cfg: RunConfig, name: str, args=None):
    from .pipeline import Designation
    d = getattr(cfg.data, name)
    stations = getattr(args, "stations", None) if args is not None else None
    days = getattr(args, "days", None) if args is not None else None
    if d is None and stations is None:
        return None
    d = dict(d or {})
    if stations:
        d["stations"] = stations.split(",")
    if days:
        lo, _, hi = days.partition(":")
        d["days"] = [int(lo or 0), int(hi) if hi else None]
    return Designation.from_dict(d)


def _data_root(args, cfg: RunConfig) -> Path:
    root = getattr(args, "data", None) or cfg.data.root
    if root is None:
        raise UsageError("no dataset given (use --data or data.root)")
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    return root


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    from .synth import generate, label_audit, write_dataset
    cfg = resolve_config(args)
    world = generate(cfg.synth)
    out = write_dataset(world, args.out)
    write_run_json(Path(out), "synth", cfg, args)
    audit = label_audit(world)
    print(f"wrote {len(world.stations)} stations and a {world.cube.shape} cube to {out}")
    print(f"split audit: All {audit['All']}  Easy {audit['Easy']}  Hard {audit['Hard']}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import Prepared, load_dataset
    from .train import train
    cfg = resolve_config(args)
    if args.mode == "multiquantile" and not cfg.model.multiquantile:
        cfg.model.num_mlp_heads = len(DEFAULT_QUANTILES)
        cfg.model.quantiles = list(DEFAULT_QUANTILES)
    elif args.mode == "deterministic" and cfg.model.multiquantile:
        cfg.model.num_mlp_heads, cfg.model.quantiles = 1, [0.5]
    if args.epochs is not None:
        cfg.train.max_epochs = args.epochs
        cfg.train.warmup_epochs = min(cfg.train.warmup_epochs, args.epochs - 1)
    cfg.train.strict = cfg.train.strict or args.strict_deterministic
    configure_threads(cfg.train.strict)

    tr, va = _designation(cfg, "train"), _designation(cfg, "val")
    if tr is None or va is None:
        raise ConfigError("train needs data.train and data.val designations")
    if tr.overlaps(va):
        raise ConfigError("train and validation designations overlap (shared station and days)")
    root = _data_root(args, cfg)
    cfg.data.root = str(root)
    raw = load_dataset(root, impute=cfg.data.impute)
    prep = Prepared(raw, fit_on=tr, patch_size=cfg.model.patch_size,
                    flow_alpha=cfg.data.flow_alpha, flow_iterations=cfg.data.flow_iterations)
    m = cfg.model
    train_samples = prep.windows(tr, cfg.train.train_stride, m.hist_len, m.pred_len)
    val_samples = prep.windows(va, cfg.train.eval_stride, m.hist_len, m.pred_len)
    out = Path(args.out)
    write_run_json(out, "train", cfg, args)
    result = train(prep, m, cfg.train, train_samples, val_samples, out_dir=out,
                   zero_context=args.zero_context, resume=args.resume,
                   extra_meta={"run": cfg.to_dict()}, stop_after=args.stop_after)
    print(f"trained {len(result.history)} epochs on {len(train_samples)} windows; "
          f"best val loss {result.best_val:.6f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.best_path}")
    return EXIT_OK


def _load_checkpoint_prepared(ckpt: Path, root: Path, run_cfg: RunConfig):
    from .pipeline import Prepared, load_dataset, norm_from_json
    from .train import load_model
    model, meta = load_model(ckpt)
    raw = load_dataset(root, impute=run_cfg.data.impute)
    inputs = meta["inputs"]
    prep = Prepared(raw, norm=norm_from_json(meta["norm"]), patch_size=inputs["patch_size"],
                    flow_alpha=run_cfg.data.flow_alpha,
                    flow_iterations=run_cfg.data.flow_iterations)
    if list(prep.ts_channels) != inputs["ts_channels"] or \
            list(prep.ctx_channels) != inputs["ctx_channels"]:
        raise ConfigError("dataset channels do not match the checkpoint "
                          f"(checkpoint ts {inputs['ts_channels']}, ctx {inputs['ctx_channels']}; "
                          f"data ts {list(prep.ts_channels)}, ctx {list(prep.ctx_channels)})")
    return model, meta, prep


def _checkpoint_config(args) -> tuple[RunConfig, dict | None]:
    if getattr(args, "checkpoint", None) is None:
        return resolve_config(args), None
    from .train import load_checkpoint
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    _, meta = load_checkpoint(ckpt)
    if args.config is None and "run" in meta:
        doc = meta["run"]
        for o in args.set or []:
            doc = deep_merge(doc, parse_override(o))
        cfg = RunConfig.from_dict(doc)
    else:
        cfg = resolve_config(args)
    if cfg.model.to_dict() != meta["model_config"]:
        raise ConfigError("config model section does not match the checkpoint")
    return cfg, meta


def _parse_baseline(name: str, turbidity: float):
    if name == "persistence":
        return "Persistence", ev.persistence_forecaster()
    if name in ("clearsky", "clear-sky"):
        return "Clear Sky", ev.clear_sky_forecaster(turbidity)
    if name.startswith("fourier"):
        _, _, k = name.partition(":")
        try:
            k = int(k or 4)
        except ValueError:
            raise UsageError(f"bad Fourier mode count in '{name}'") from None
        return f"Fourier{k}", ev.fourier_forecaster(k)
    raise UsageError(f"unknown baseline '{name}' (persistence, clearsky, fourier:k)")


def cmd_evaluate(args) -> int:
    from .pipeline import Designation, load_dataset
    from .train import predict
    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("give exactly one of --checkpoint or --baseline")
    cfg, meta = _checkpoint_config(args)
    root = _data_root(args, cfg)
    stride = args.stride or cfg.data.eval_stride
    daylight = args.daylight_only or cfg.eval.daylight_only
    pooling = args.pooling or cfg.eval.pooling

    if args.checkpoint is not None:
        model, meta, prep = _load_checkpoint_prepared(Path(args.checkpoint), root, cfg)
        des = _designation(cfg, "test", args) or Designation(tuple(prep.raw.stations), (0, None))
        m = cfg.model
        samples = prep.windows(des, stride, m.hist_len, m.pred_len)
        raw_samples = prep.raw_windows(des, stride, m.hist_len, m.pred_len)
        levels = list(m.quantiles) if m.multiquantile else None
        zero = bool(meta.get("zero_context", False))
        fan = predict(model, prep, samples, zero_context=zero) if samples else np.zeros((0, 48, 1))
        name = args.name or ("Multi-Quantile CrossViViT" if levels else "CrossViViT")
        forecast = ev.Forecast(fan, levels)
        report, _ = ev.evaluate(None, raw_samples, name, daylight_only=daylight,
                                pooling=pooling, forecast=forecast)
    else:
        raw = load_dataset(root, impute=cfg.data.impute)
        des = _designation(cfg, "test", args) or Designation(tuple(raw.stations), (0, None))
        name, forecaster = _parse_baseline(args.baseline, cfg.data.turbidity)
        raw_samples = _raw_windows(raw, des, stride)
        report, forecast = ev.evaluate(forecaster, raw_samples, args.name or name,
                                       daylight_only=daylight, pooling=pooling)

    out = Path(args.out)
    write_run_json(out, "evaluate", cfg, args)
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.table())
    if raw_samples:
        ev.write_forecast_csv(out / "forecast.csv", raw_samples, forecast)
    print(report.table(), end="")
    return EXIT_OK


def _raw_windows(raw, des, stride):
    from .geodata import make_windows, slice_series
    from .pipeline import _day_rows
    out = []
    for name in des.stations:
        if name not in raw.stations:
            raise ConfigError(f"unknown station '{name}'")
        s = raw.stations[name]
        lo, hi = _day_rows(des.days, len(s))
        out.extend(make_windows(slice_series(s, lo, hi), None, stride=stride))
    return out


def cmd_forecast(args) -> int:
    from .train import predict
    cfg, meta = _checkpoint_config(args)
    window = {}
    if args.window:
        try:
            window = json.loads(Path(args.window).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read window file: {exc}") from None
    station = args.station or window.get("station")
    start = args.start or window.get("start")
    data = args.data or window.get("data")
    if not (station and start and data):
        raise UsageError("a window needs a dataset, a station and a history start time")
    args.data = data
    model, meta, prep = _load_checkpoint_prepared(Path(args.checkpoint), _data_root(args, cfg), cfg)
    levels = list(cfg.model.quantiles) if cfg.model.multiquantile else None
    wanted = None
    if args.levels:
        if levels is None:
            raise ConfigError("checkpoint has no quantile heads (deterministic model)")
        wanted = [float(x) for x in args.levels.split(",")]
        missing = [q for q in wanted if all(abs(q - a) > 1e-9 for a in levels)]
        if missing:
            raise ConfigError(f"checkpoint has no quantile head for {missing}")

    series = prep.series[station] if station in prep.series else None
    if series is None:
        raise ConfigError(f"unknown station '{station}'")
    t0 = parse_timestamp(start)
    idx = int(np.searchsorted(series.timestamps, t0))
    if idx >= len(series) or series.timestamps[idx] != t0:
        raise ConfigError(f"{start} is not a timestamp of station '{station}'")
    m = cfg.model
    sample = prep.history_sample(station, idx, m.hist_len, m.pred_len)
    fan = predict(model, prep, [sample], zero_context=bool(meta.get("zero_context")))[0]
    if not np.all(np.diff(fan, axis=-1) >= 0):
        raise AssertionError("forecast fan is not monotone")
    cols = ["pred"] if levels is None else [ev.quantile_column(q) for q in levels]
    keep = list(range(len(cols)))
    if wanted is not None:
        keep = [min(range(len(levels)), key=lambda i: abs(levels[i] - q)) for q in wanted]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *(cols[i] for i in keep)])
        for t, row in zip(sample.target_times, fan):
            w.writerow([format_timestamp(t), *(f"{row[i]:.6g}" for i in keep)])
    write_run_json(out.parent, "forecast", cfg, args)
    print(f"wrote {len(sample.target_times)} forecast rows to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradops
    from .train import GRAD_OPS
    configure_threads(True)
    control = gradops.register_negative_control() if args.inject_bug else None
    try:
        return _run_gradcheck(args)
    finally:
        if control is not None:
            GRAD_OPS.pop(control, None)


def _run_gradcheck(args) -> int:
    from .train import GRAD_OPS, grad_check
    ops = args.ops.split(",") if args.ops else list(GRAD_OPS)
    unknown = [o for o in ops if o not in GRAD_OPS]
    if unknown:
        raise UsageError(f"unregistered ops: {unknown}; known: {sorted(GRAD_OPS)}")
    width = max(len(o) for o in ops)
    print(f"{'op'.ljust(width)}  {'max rel err':>11}  {'status':6}  worst tensor")
    failed = []
    for op in ops:
        r = grad_check(op, trials=args.trials, tolerance=args.tolerance)
        status = "pass" if r.passed else "FAIL"
        if not r.passed:
            failed.append(op)
        print(f"{op.ljust(width)}  {r.max_error:11.3e}  {status:6}  {r.worst}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(ops)} ops pass (tolerance {args.tolerance:g})")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for p in args.reports:
        try:
            reports.append(ev.EvalReport.from_json(json.loads(Path(p).read_text())))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read report {p}: {exc}") from None
    table = ev.format_table(reports)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heliocast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run config (YAML, or a previous run.json)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key, e.g. model.depth=2")
        p.add_argument("--strict-deterministic", action="store_true",
                       help="single-threaded deterministic numerics")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["deterministic", "multiquantile"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--stop-after", type=int, metavar="N",
                   help="pause after N epochs, keeping the full schedule (resume later)")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--zero-context", action="store_true", help="ablation: zero the context latent")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint or baseline")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="persistence | clearsky | fourier:k")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--stations", help="comma-separated stations (default: data.test)")
    p.add_argument("--days", help="day range start:end")
    p.add_argument("--stride", type=int)
    p.add_argument("--daylight-only", action="store_true")
    p.add_argument("--pooling", choices=["timesteps", "windows"])
    p.add_argument("--name", help="model name in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("forecast", help="forecast one window")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", help="JSON file with data, station and start")
    p.add_argument("--data")
    p.add_argument("--station")
    p.add_argument("--start", help="first history timestamp (ISO 8601, UTC)")
    p.add_argument("--levels", help="comma-separated quantile levels to emit")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p, config=False)
    p.add_argument("--ops", help="comma-separated op names (default: all)")
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-bug", action="store_true",
                   help="also run an op with a deliberately broken backward")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="combine report.json files into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "strict_deterministic", False):
        configure_threads(True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"heliocast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HeliocastError, ValueError) as exc:
        # configuration, validation and format problems are usage errors
        print(f"heliocast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as exc:
        print(f"heliocast: check failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

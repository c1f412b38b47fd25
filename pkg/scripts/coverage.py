"""Train the multi-quantile microconfig on the default synthetic world and
report the [q0.02, q0.98] coverage p_t on the held-out test station.

    python3 scripts/coverage.py --seeds 0 1 2
"""
import argparse
import logging
import time

from heliocast.config import load_config
from heliocast.evaluation import format_table
from heliocast.experiment import prepare, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="micro_multiquantile")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--set", action="append", default=[], help="override, e.g. train.max_epochs=8")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    for seed in args.seeds:
        cfg = load_config(args.config, [f"seed={seed}", *args.set])
        t0 = time.perf_counter()
        scored = run(cfg, prep=prepare(cfg), name=f"MQ seed {seed}")
        print(format_table([scored.report]))
        p_t = scored.report.splits["All"].p_t
        print(f"seed {seed}: p_t {p_t:.3f}  best epoch {scored.result.best_epoch}  "
              f"{time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()

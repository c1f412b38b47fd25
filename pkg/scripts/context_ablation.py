"""Context ablation on the default synthetic world through the CLI.

For each seed, trains the microconfig CrossViViT twice (real context and
context zeroed), evaluates both on the test station and prints the combined
table plus the seed-averaged Easy/Hard comparison.

    python3 scripts/context_ablation.py --work /tmp/ablation --seeds 0 1 2
"""
import argparse
import json
from pathlib import Path

import numpy as np

from heliocast.cli import main as heliocast


def run(*args):
    code = heliocast([str(a) for a in args])
    if code != 0:
        raise SystemExit(f"heliocast {' '.join(map(str, args))} exited with {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, required=True)
    ap.add_argument("--config", default="micro")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    data = args.work / "data"
    if not (data / "dataset.json").is_file():
        run("synth", "--config", args.config, "--out", data)

    reports, mae = [], {}
    for seed in args.seeds:
        for arm in ("context", "zeroed"):
            out = args.work / f"{arm}-s{seed}"
            extra = ["--zero-context"] if arm == "zeroed" else []
            run("train", "--config", args.config, "--set", f"seed={seed}", "--data", data,
                "--out", out, *extra)
            run("evaluate", "--checkpoint", out / "best.ckpt", "--data", data,
                "--out", out / "eval", "--name", f"{arm} s{seed}")
            reports.append(out / "eval" / "report.json")
            splits = json.loads((out / "eval" / "report.json").read_text())["splits"]
            for split in ("Easy", "Hard"):
                mae.setdefault((arm, split), []).append(splits[split]["mae"])

    run("report", *reports, "--out", args.work / "table.txt")
    for split in ("Easy", "Hard"):
        ctx, zero = np.mean(mae["context", split]), np.mean(mae["zeroed", split])
        print(f"{split}: context {ctx:.2f}  zeroed {zero:.2f}  "
              f"relative {(ctx - zero) / zero:+.1%}")


if __name__ == "__main__":
    main()

"""Overfit 4 contents x 4 styles at 64x64 and report whether training works.

    python scripts/overfit.py --out runs/overfit [--steps 300]

Prints the smoothed-loss drop and the per-pair style-loss comparison and
writes a JSON summary next to the metrics.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from scinst.experiments import overfit_report
from scinst.toydata import write_toy_dataset
from scinst.training import TrainConfig, run_training


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    content_dir, style_dir = write_toy_dataset(out / "data", seed=args.seed)
    cfg = TrainConfig(content_dir=str(content_dir), style_dir=str(style_dir), out_dir=str(out),
                      steps=args.steps, seed=args.seed, checkpoint_every=max(args.steps, 1))
    (out / "metrics.jsonl").unlink(missing_ok=True)
    t0 = time.perf_counter()
    state, records = run_training(cfg)
    elapsed = time.perf_counter() - t0
    report = overfit_report(state, records)
    report["seconds"] = elapsed
    print(json.dumps(report, indent=2))
    (out / "overfit.json").write_text(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()

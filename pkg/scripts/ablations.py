"""Train each ablation variant on the toy set and tabulate the outcome.

    python scripts/ablations.py --out runs/ablations --steps 150

Variants: full model, no adversarial loss, no contrastive loss, no SCIN,
frozen-VGG style encoder, learnable-VGG style encoder, and the literal
literal forms of the contrastive and identity losses.
"""
import argparse
import json
from pathlib import Path

from scinst.experiments import overfit_report
from scinst.toydata import write_toy_dataset
from scinst.training import TrainConfig, run_training

VARIANTS = {
    "full": {},
    "no_adv": {"no_adv": True},
    "no_icl": {"no_icl": True},
    "no_scin": {"no_scin": True},
    "fixed_vgg": {"style_encoder": "fixed_vgg"},
    "learnable_vgg": {"style_encoder": "learnable_vgg"},
    "literal_icl": {"literal_icl": True},
    "literal_identity": {"literal_identity": True},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--only", nargs="*", choices=sorted(VARIANTS))
    args = ap.parse_args()

    out = Path(args.out)
    content_dir, style_dir = write_toy_dataset(out / "data")
    rows = {}
    for name, flags in VARIANTS.items():
        if args.only and name not in args.only:
            continue
        run_dir = out / name
        (run_dir / "metrics.jsonl").unlink(missing_ok=True)
        cfg = TrainConfig(content_dir=str(content_dir), style_dir=str(style_dir), out_dir=str(run_dir),
                          steps=args.steps, checkpoint_every=args.steps, **flags)
        state, records = run_training(cfg)
        rep = overfit_report(state, records)
        last = records[-1]
        rows[name] = {"style": last["style"], "content": last["content"], "identity": last["identity"],
                      "drop": rep["total_drop"], "pairs_improved": rep["pairs_improved"]}
        print(f"{name:<17} style {last['style']:.4f}  content {last['content']:.4f}  "
              f"identity {last['identity']:.3f}  pairs {rep['pairs_improved']}/16", flush=True)
    (out / "ablations.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()

"""Gradient-masking case study: the ingredient ladder on a hardened toy.

Trains a gradient-diversified ensemble with single-step adversarial
training, then attacks it well beyond the training radius. The formed loss
surface there misleads fixed-step sign ascent, so plain PGD overestimates
robustness; walking the ladder shows which attack ingredients close the
gap. Expect the pgd rung to sit far above the final rung and the robust
accuracy to drop sharply once sub-model logits enter the objective.
"""

import argparse
import json
import sys
from pathlib import Path

from mora.cli import main


def write(path: Path, obj) -> str:
    path.write_text(json.dumps(obj, indent=2))
    return str(path)


def run(argv) -> None:
    if main([str(a) for a in argv]) != 0:
        sys.exit(f"step failed: {' '.join(map(str, argv))}")


def cli() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/masked_ladder"))
    ap.add_argument("--train-epsilon", type=float, default=0.15)
    ap.add_argument("--attack-epsilon", type=float, default=0.25)
    ap.add_argument("--max-samples", type=int, default=100)
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    dataset = {
        "generator": "blobs", "d": 8, "k": 2,
        "samples": 560, "noise": 0.25, "seed": args.seed,
    }
    run(["gen-data", "--config",
         write(out / "data.json", {"schema_version": 1, **dataset}),
         "--out", out / "data"])

    train = {
        "schema_version": 1, "dataset": dataset, "num_models": 3,
        "hidden": [16, 16], "epochs": 60, "learning_rate": 0.3,
        "batch_size": 32, "mode": "softmax", "regularizer": "grad_align",
        "reg_lambda": 2.0,
        "adversarial": {"epsilon": args.train_epsilon, "steps": 1},
        "seed": args.seed,
    }
    run(["train", "--config", write(out / "train.json", train),
         "--out", out / "model"])

    ladder = {
        "schema_version": 1,
        "dataset": str(out / "data" / "dataset.npz"),
        "model": str(out / "model" / "model.json"),
        "attack": {"epsilon": args.attack_epsilon, "iterations": 100,
                   "per_beta_iterations": 100, "restarts": 5},
        "max_samples": args.max_samples, "seed": args.seed,
    }
    run(["ablate", "--config", write(out / "ladder.json", ladder),
         "--out", out / "ladder", "--threads", args.threads])

    surface = {
        "schema_version": 1,
        "dataset": str(out / "data" / "dataset.npz"),
        "model": str(out / "model" / "model.json"),
        "epsilon": args.attack_epsilon, "resolution": 21,
        "averaged": True, "max_samples": args.max_samples, "seed": args.seed,
    }
    run(["surface", "--config", write(out / "surface.json", surface),
         "--out", out / "surface"])

    report = {
        "schema_version": 1,
        "inputs": [str(out / "ladder" / "ladder.csv")],
    }
    run(["report", "--config", write(out / "report.json", report),
         "--out", out / "report"])
    print(f"done; ladder in {out / 'ladder' / 'ladder.csv'},"
          f" report in {out / 'report' / 'report.md'}")


if __name__ == "__main__":
    cli()

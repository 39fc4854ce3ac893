"""End-to-end demo: generate a toy, train a diversified ensemble, run all
four attacks, sweep the budget, and render the markdown report.

Everything goes through the CLI verbs, so the outputs under --out are the
same CSV/manifest artifacts a real experiment would archive.
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
    ap.add_argument("--out", type=Path, default=Path("results/pipeline"))
    ap.add_argument("--epsilon", type=float, default=0.12)
    ap.add_argument("--samples", type=int, default=400)
    ap.add_argument("--max-samples", type=int, default=60)
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    dataset = {
        "generator": "blobs", "d": 2, "k": 2,
        "samples": args.samples, "noise": 0.25, "seed": args.seed,
    }
    run(["gen-data", "--config",
         write(out / "data.json", {"schema_version": 1, **dataset}),
         "--out", out / "data"])

    train = {
        "schema_version": 1, "dataset": dataset, "num_models": 3,
        "hidden": [8], "epochs": 30, "learning_rate": 0.5, "batch_size": 32,
        "mode": "softmax", "regularizer": "grad_align", "reg_lambda": 2.0,
        "seed": args.seed,
    }
    run(["train", "--config", write(out / "train.json", train),
         "--out", out / "model"])

    attack = {
        "epsilon": args.epsilon, "iterations": 100,
        "per_beta_iterations": 100, "restarts": 5,
    }
    evaluate = {
        "schema_version": 1,
        "dataset": str(out / "data" / "dataset.npz"),
        "models": [str(out / "model" / "model.json")],
        "attacks": ["pgd", "cw", "mora", "mora-mt"],
        "attack": attack, "max_samples": args.max_samples, "seed": args.seed,
    }
    run(["eval", "--config", write(out / "eval.json", evaluate),
         "--out", out / "eval", "--threads", args.threads])

    sweep = {
        "schema_version": 1,
        "dataset": str(out / "data" / "dataset.npz"),
        "model": str(out / "model" / "model.json"),
        "attacks": ["pgd", "mora"],
        "epsilons": [0.05, 0.1, 0.15, 0.2, 0.3],
        "attack": attack, "max_samples": args.max_samples, "seed": args.seed,
    }
    run(["sweep-epsilon", "--config", write(out / "sweep.json", sweep),
         "--out", out / "sweep", "--threads", args.threads])

    report = {
        "schema_version": 1,
        "inputs": [str(out / "eval" / "eval.csv"),
                   str(out / "sweep" / "sweep_epsilon.csv")],
    }
    run(["report", "--config", write(out / "report.json", report),
         "--out", out / "report"])
    print(f"done; see {out / 'report' / 'report.md'}")


if __name__ == "__main__":
    cli()

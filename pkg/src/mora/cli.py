"""Command-line harness: data generation, training, attacks, sweeps,
surfaces, and reports.

Every run writes a manifest.json carrying a deterministic run identifier
(a digest of command, effective config, seed, and tool version); every
CSV row references it. Timestamps live only in the manifest, so re-running
a verb with the same config and seed reproduces each CSV byte for byte,
regardless of --threads. Per-sample work draws from
default_rng((seed, sample_index)), which keeps outcomes independent of
scheduling order.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 violated contract.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .ablation import (
    ATTACKS,
    RUNGS,
    attack_budget,
    evaluate_attack,
    ladder_budgets,
    run_attack,
    run_rung,
)
from .attacks import AttackConfig, mora_attack, pgd_attack, project
from .defense import AdversarialTrainingSpec, DatasetSpec, TrainConfig, generate_dataset, train_ensemble
from .errors import ConfigError, ContractViolation, IOFormatError, MoraError
from .models import Ensemble, form_expr, form_values, load_ensemble, save_ensemble
from .objectives import dl_value, sce

CONFIG_SCHEMA_VERSION = 1
FEASIBILITY_SLACK = 1e-9

EVAL_HEADER = (
    "run_id", "defense", "num_models", "mode", "attack", "epsilon", "budget",
    "clean_accuracy_pct", "robust_accuracy_pct",
    "mean_iterations_to_success", "mean_sub_fooled_at_success",
)
SAMPLES_HEADER = (
    "run_id", "defense", "attack", "sample", "clean_correct", "success",
    "iterations_used", "sub_fooled",
)
TRACES_HEADER = (
    "run_id", "defense", "attack", "sample", "iteration", "loss", "dl_e",
    "sub_fooled", "step_size",
)
LADDER_HEADER = (
    "run_id", "rung", "budget", "clean_accuracy_pct", "robust_accuracy_pct",
    "successes", "mean_iterations_to_success",
)
SURFACE_HEADER = ("run_id", "row", "col", "eps_adv", "eps_rand", "loss")
EPS_SWEEP_HEADER = (
    "run_id", "defense", "attack", "epsilon", "clean_accuracy_pct",
    "robust_accuracy_pct", "successes", "reused_successes",
)
TAU_SWEEP_HEADER = (
    "run_id", "defense", "attack_tau", "clean_accuracy_pct",
    "robust_accuracy_pct", "successes",
)
BETA_SWEEP_HEADER = (
    "run_id", "defense", "beta", "clean_accuracy_pct", "robust_accuracy_pct",
    "successes",
)
TRAIN_LOG_HEADER = ("run_id", "epoch", "loss", "accuracy", "regularizer_value")
HISTOGRAM_HEADER = ("run_id", "sub_fooled", "successes")

# Published full-scale reference numbers for one diversity-trained ensemble
# (three sub-models, softmax forming). They come from training runs far
# beyond this toolkit's desk scale and are NOT reproduced by it; reports
# include them only to show the qualitative ordering the toy runs mirror.
REFERENCE_SHEET = (
    ("defense", "mode", "clean_pct", "baseline_attack_pct", "reweighed_pct", "reweighed_mt_pct"),
    ("ADP-3", "softmax", "92.88", "29.12", "0.59", "0.34"),
)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    return _sha256_bytes(Path(path).read_bytes())


def _load_config(path, allowed: set[str], required: set[str]) -> dict:
    path = Path(path)
    if not path.exists():
        raise IOFormatError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise IOFormatError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise IOFormatError(f"config file {path} must hold a JSON object")
    if doc.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config {path} must declare schema_version {CONFIG_SCHEMA_VERSION}, "
            f"got {doc.get('schema_version')!r}"
        )
    allowed = allowed | {"schema_version", "seed"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise ConfigError(f"config {path} is missing keys: {sorted(missing)}")
    return doc


def _resolve_seed(args, doc: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(doc.get("seed", 0))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_manifest(
    out: Path, command: str, doc: dict, seed: int, *, inputs=(), outputs=(), threads=1
) -> str:
    config = {k: v for k, v in doc.items() if k != "schema_version"}
    config.pop("seed", None)
    run_id = _sha256_bytes(
        f"{command}|{seed}|{__version__}|{_canonical(config)}".encode()
    )[:16]
    manifest = {
        "run_id": run_id,
        "tool": "mora",
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config": config,
        "input_digests": {str(p): _sha256_file(p) for p in inputs},
        "outputs": sorted(str(o) for o in outputs),
        "threads": threads,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_id


def _attack_config(doc: dict, seed: int) -> AttackConfig:
    fields = dict(doc.get("attack", {}))
    if "beta_schedule" in fields:
        fields["beta_schedule"] = tuple(fields["beta_schedule"])
    if isinstance(fields.get("mt_targets"), list):
        fields["mt_targets"] = tuple(fields["mt_targets"])
    fields["seed"] = seed
    try:
        return AttackConfig(**fields)
    except TypeError as e:
        raise ConfigError(f"bad attack config: {e}") from e


def _dataset_spec(doc: dict) -> DatasetSpec:
    try:
        return DatasetSpec(**doc)
    except TypeError as e:
        raise ConfigError(f"bad dataset spec: {e}") from e


def _load_dataset(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise IOFormatError(f"dataset file not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise IOFormatError(f"cannot read dataset {path}: {e}") from e
    for key in ("x_train", "y_train", "x_test", "y_test"):
        if key not in data:
            raise IOFormatError(f"dataset {path} is missing array {key!r}")
    return data["x_train"], data["y_train"], data["x_test"], data["y_test"]


def _load_model(path) -> Ensemble:
    path = Path(path)
    if not path.exists():
        raise IOFormatError(f"model file not found: {path}")
    return load_ensemble(path)


def _test_slice(doc, x_test, y_test):
    limit = doc.get("max_samples")
    if limit is not None:
        if not isinstance(limit, int) or limit < 1:
            raise ConfigError(f"max_samples must be a positive integer, got {limit!r}")
        return x_test[:limit], y_test[:limit]
    return x_test, y_test


def _pool_map(threads: int):
    if threads < 1:
        raise ConfigError(f"--threads must be at least 1, got {threads}")
    if threads == 1:
        return None, map
    pool = ThreadPoolExecutor(max_workers=threads)
    return pool, pool.map


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def _batch_sce(ens: Ensemble, points: np.ndarray, y: int) -> np.ndarray:
    z_e = form_values(ens.forward_subs(points), ens.mode, ens.vote_tau)
    return _logsumexp_rows(z_e) - z_e[:, y]


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args) -> None:
    doc = _load_config(
        args.config,
        allowed={"generator", "d", "k", "samples", "noise", "test_fraction"},
        required={"generator"},
    )
    seed = _resolve_seed(args, doc)
    spec_doc = {k: v for k, v in doc.items() if k != "schema_version"}
    spec_doc["seed"] = seed
    spec = _dataset_spec(spec_doc)
    data = generate_dataset(spec)
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "gen-data", doc, seed, inputs=[args.config], outputs=["dataset.npz"]
    )
    np.savez(
        out / "dataset.npz",
        x_train=data.x_train,
        y_train=data.y_train,
        x_test=data.x_test,
        y_test=data.y_test,
        run_id=np.array(run_id),
    )
    print(f"{run_id} gen-data: {data.x_train.shape[0]} train / {data.x_test.shape[0]} test")


def cmd_train(args) -> None:
    doc = _load_config(
        args.config,
        allowed={
            "dataset", "num_models", "hidden", "epochs", "learning_rate",
            "batch_size", "mode", "vote_tau", "regularizer", "reg_lambda",
            "adversarial",
        },
        required={"dataset"},
    )
    seed = _resolve_seed(args, doc)
    adversarial = None
    if doc.get("adversarial"):
        try:
            adversarial = AdversarialTrainingSpec(**doc["adversarial"])
        except TypeError as e:
            raise ConfigError(f"bad adversarial training spec: {e}") from e
    kwargs = {
        k: v
        for k, v in doc.items()
        if k not in ("schema_version", "seed", "dataset", "adversarial")
    }
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(kwargs["hidden"])
    try:
        cfg = TrainConfig(
            dataset=_dataset_spec(doc["dataset"]),
            adversarial=adversarial,
            seed=seed,
            **kwargs,
        )
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from e
    result = train_ensemble(cfg)
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "train", doc, seed,
        inputs=[args.config],
        outputs=["model.json", "training_log.csv"],
    )
    save_ensemble(result.ensemble, out / "model.json")
    model_doc = json.loads((out / "model.json").read_text())
    model_doc["run_id"] = run_id
    (out / "model.json").write_text(json.dumps(model_doc) + "\n")
    _write_csv(
        out / "training_log.csv",
        TRAIN_LOG_HEADER,
        [[run_id, r.epoch, r.loss, r.accuracy, r.regularizer_value] for r in result.log],
    )
    final = result.log[-1]
    print(f"{run_id} train: epoch {final.epoch} loss {final.loss:.4f} acc {final.accuracy:.4f}")


@dataclass(frozen=True)
class EvalRow:
    """One defense/attack aggregate; accuracies are percentages."""

    run_id: str
    defense: str
    num_models: int
    mode: str
    attack: str
    epsilon: float
    budget: int
    clean_accuracy_pct: float
    robust_accuracy_pct: float
    mean_iterations_to_success: float
    mean_sub_fooled_at_success: float

    def __post_init__(self):
        for name in ("clean_accuracy_pct", "robust_accuracy_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ContractViolation(f"{name}={v} outside [0, 100]")
        if self.robust_accuracy_pct > self.clean_accuracy_pct + 1e-9:
            raise ContractViolation(
                f"robust accuracy {self.robust_accuracy_pct} exceeds clean "
                f"{self.clean_accuracy_pct}"
            )

    def row(self) -> list:
        return [
            self.run_id, self.defense, self.num_models, self.mode, self.attack,
            self.epsilon, self.budget, self.clean_accuracy_pct,
            self.robust_accuracy_pct, self.mean_iterations_to_success,
            self.mean_sub_fooled_at_success,
        ]


def _success_means(outcomes) -> tuple[float, float]:
    iters = [o.iterations_used for o in outcomes if o.success]
    fooled = [o.sub_fooled for o in outcomes if o.success]
    if not iters:
        return float("nan"), float("nan")
    return float(np.mean(iters)), float(np.mean(fooled))


def _verify_stored_examples(ens, x, y, epsilon, outcomes, archive: Path, key_fn) -> None:
    """Reload every stored success and re-check the adversarial invariant."""
    with np.load(archive, allow_pickle=False) as data:
        for o in outcomes:
            if not o.success:
                continue
            adv = data[key_fn(o.index)]
            clean = x[o.index]
            if adv.min() < 0.0 or adv.max() > 1.0:
                raise ContractViolation(f"stored example {o.index} left the unit box")
            if np.max(np.abs(adv - clean)) > epsilon + FEASIBILITY_SLACK:
                raise ContractViolation(f"stored example {o.index} left the epsilon ball")
            if ens.hard_decision(adv, true_label=int(y[o.index])) == int(y[o.index]):
                raise ContractViolation(f"stored example {o.index} no longer fools the model")


def _verify_accounting(csv_path: Path, eval_rows: list[EvalRow]) -> None:
    """Recompute each aggregate row from the written per-sample records."""
    with open(csv_path, newline="") as fh:
        records = list(csv.DictReader(fh))
    for row in eval_rows:
        mine = [
            r for r in records
            if r["defense"] == row.defense and r["attack"] == row.attack
        ]
        total = len(mine)
        clean = sum(r["clean_correct"] == "1" for r in mine)
        wins = sum(r["success"] == "1" for r in mine)
        clean_pct = 100.0 * clean / total
        robust_pct = 100.0 * (clean - wins) / total
        if abs(clean_pct - row.clean_accuracy_pct) > 1e-6 or abs(
            robust_pct - row.robust_accuracy_pct
        ) > 1e-6:
            raise ContractViolation(
                f"accounting mismatch for {row.defense}/{row.attack}: per-sample "
                f"records give clean {clean_pct} robust {robust_pct}, aggregate row "
                f"says {row.clean_accuracy_pct}/{row.robust_accuracy_pct}"
            )


def cmd_eval(args) -> None:
    doc = _load_config(
        args.config,
        allowed={"dataset", "models", "attacks", "attack", "max_samples", "pgd_objective"},
        required={"dataset", "models", "attacks"},
    )
    seed = _resolve_seed(args, doc)
    cfg = _attack_config(doc, seed)
    pgd_objective = doc.get("pgd_objective", "sce")
    attacks = list(doc["attacks"])
    for name in attacks:
        if name not in ATTACKS:
            raise ConfigError(f"unknown attack {name!r}, use one of {ATTACKS}")
    _, _, x_test, y_test = _load_dataset(doc["dataset"])
    x_test, y_test = _test_slice(doc, x_test, y_test)
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "eval", doc, seed,
        inputs=[args.config, doc["dataset"], *doc["models"]],
        outputs=["eval.csv", "samples.csv", "traces.csv", "adversarial.npz"],
        threads=args.threads,
    )
    pool, map_fn = _pool_map(args.threads)
    eval_rows: list[EvalRow] = []
    sample_rows = []
    trace_rows = []
    stored: dict[str, np.ndarray] = {}
    all_outcomes = []
    try:
        for model_path in doc["models"]:
            ens = _load_model(model_path)
            defense = Path(model_path).stem
            for name in attacks:
                runner = lambda e, xi, yi, c, rng, n=name: run_attack(
                    n, e, xi, yi, c, rng, pgd_objective=pgd_objective
                )
                summary, outcomes = evaluate_attack(
                    runner, ens, x_test, y_test, cfg, map_fn=map_fn
                )
                mean_iters, mean_fooled = _success_means(outcomes)
                eval_rows.append(
                    EvalRow(
                        run_id=run_id,
                        defense=defense,
                        num_models=ens.num_models,
                        mode=ens.mode,
                        attack=name,
                        epsilon=cfg.epsilon,
                        budget=attack_budget(name, ens, cfg),
                        clean_accuracy_pct=100.0 * summary.clean_accuracy,
                        robust_accuracy_pct=100.0 * summary.robust_accuracy,
                        mean_iterations_to_success=mean_iters,
                        mean_sub_fooled_at_success=mean_fooled,
                    )
                )
                for o in outcomes:
                    sample_rows.append(
                        [run_id, defense, name, o.index, o.clean_correct, o.success,
                         o.iterations_used, o.sub_fooled]
                    )
                    for t in o.trace:
                        trace_rows.append(
                            [run_id, defense, name, o.index, t.iteration, t.loss,
                             t.dl_e, t.sub_fooled, t.step_size]
                        )
                    if o.success:
                        stored[f"{defense}__{name}__{o.index}"] = o.adversarial_example
                all_outcomes.append((ens, defense, name, outcomes))
    finally:
        if pool is not None:
            pool.shutdown()
    _write_csv(out / "eval.csv", EVAL_HEADER, [r.row() for r in eval_rows])
    _write_csv(out / "samples.csv", SAMPLES_HEADER, sample_rows)
    _write_csv(out / "traces.csv", TRACES_HEADER, trace_rows)
    np.savez(out / "adversarial.npz", run_id=np.array(run_id), **stored)
    _verify_accounting(out / "samples.csv", eval_rows)
    for ens, defense, name, outcomes in all_outcomes:
        _verify_stored_examples(
            ens, x_test, y_test, cfg.epsilon, outcomes, out / "adversarial.npz",
            key_fn=lambda i, d=defense, n=name: f"{d}__{n}__{i}",
        )
    for r in eval_rows:
        print(
            f"{run_id} eval: {r.defense} {r.attack} clean {r.clean_accuracy_pct:.2f}% "
            f"robust {r.robust_accuracy_pct:.2f}%"
        )


def cmd_attack(args) -> None:
    doc = _load_config(
        args.config,
        allowed={"dataset", "model", "attack_name", "attack", "max_samples", "pgd_objective"},
        required={"dataset", "model", "attack_name"},
    )
    seed = _resolve_seed(args, doc)
    cfg = _attack_config(doc, seed)
    name = doc["attack_name"]
    if name not in ATTACKS:
        raise ConfigError(f"unknown attack {name!r}, use one of {ATTACKS}")
    pgd_objective = doc.get("pgd_objective", "sce")
    ens = _load_model(doc["model"])
    _, _, x_test, y_test = _load_dataset(doc["dataset"])
    x_test, y_test = _test_slice(doc, x_test, y_test)
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "attack", doc, seed,
        inputs=[args.config, doc["dataset"], doc["model"]],
        outputs=["samples.csv", "traces.csv", "sub_fooled_histogram.csv", "adversarial.npz"],
        threads=args.threads,
    )
    pool, map_fn = _pool_map(args.threads)
    try:
        runner = lambda e, xi, yi, c, rng: run_attack(
            name, e, xi, yi, c, rng, pgd_objective=pgd_objective
        )
        summary, outcomes = evaluate_attack(runner, ens, x_test, y_test, cfg, map_fn=map_fn)
    finally:
        if pool is not None:
            pool.shutdown()
    defense = Path(doc["model"]).stem
    _write_csv(
        out / "samples.csv",
        SAMPLES_HEADER,
        [[run_id, defense, name, o.index, o.clean_correct, o.success,
          o.iterations_used, o.sub_fooled] for o in outcomes],
    )
    _write_csv(
        out / "traces.csv",
        TRACES_HEADER,
        [[run_id, defense, name, o.index, t.iteration, t.loss, t.dl_e,
          t.sub_fooled, t.step_size] for o in outcomes for t in o.trace],
    )
    counts = np.bincount(
        [o.sub_fooled for o in outcomes if o.success], minlength=ens.num_models + 1
    )
    _write_csv(
        out / "sub_fooled_histogram.csv",
        HISTOGRAM_HEADER,
        [[run_id, k, int(c)] for k, c in enumerate(counts)],
    )
    stored = {
        f"{defense}__{name}__{o.index}": o.adversarial_example
        for o in outcomes
        if o.success
    }
    np.savez(out / "adversarial.npz", run_id=np.array(run_id), **stored)
    _verify_stored_examples(
        ens, x_test, y_test, cfg.epsilon, outcomes, out / "adversarial.npz",
        key_fn=lambda i: f"{defense}__{name}__{i}",
    )
    print(
        f"{run_id} attack: {name} broke {summary.attack_successes} of "
        f"{summary.clean_correct} clean-correct samples"
    )


def cmd_ablate(args) -> None:
    doc = _load_config(
        args.config,
        allowed={"dataset", "model", "attack", "max_samples", "rungs"},
        required={"dataset", "model"},
    )
    seed = _resolve_seed(args, doc)
    cfg = _attack_config(doc, seed)
    rungs = tuple(doc.get("rungs", RUNGS))
    for rung in rungs:
        if rung not in RUNGS:
            raise ConfigError(f"unknown rung {rung!r}, use one of {RUNGS}")
    ens = _load_model(doc["model"])
    _, _, x_test, y_test = _load_dataset(doc["dataset"])
    x_test, y_test = _test_slice(doc, x_test, y_test)
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "ablate", doc, seed,
        inputs=[args.config, doc["dataset"], doc["model"]],
        outputs=["ladder.csv"],
        threads=args.threads,
    )
    budgets = ladder_budgets(ens, cfg)
    pool, map_fn = _pool_map(args.threads)
    rows = []
    try:
        for rung in rungs:
            runner = lambda e, xi, yi, c, rng, r=rung: run_rung(r, e, xi, yi, c, rng)
            summary, outcomes = evaluate_attack(
                runner, ens, x_test, y_test, cfg, map_fn=map_fn
            )
            rows.append(
                [run_id, rung, budgets[rung], 100.0 * summary.clean_accuracy,
                 100.0 * summary.robust_accuracy, summary.attack_successes,
                 _success_means(outcomes)[0]]
            )
    finally:
        if pool is not None:
            pool.shutdown()
    _write_csv(out / "ladder.csv", LADDER_HEADER, rows)
    for row in rows:
        print(f"{run_id} ablate: {row[1]:>13s} robust {row[4]:.2f}%")


def _surface_direction(ens, x, y, epsilon, steps, rng):
    """Accumulated sign-gradient direction and a seeded orthogonal axis."""
    xhat = x.copy()
    acc = np.zeros_like(x)
    for _ in range(steps):
        node = ad.leaf(xhat)
        loss = sce(form_expr(ens.sub_exprs(node), ens.mode, ens.vote_tau), y)
        g = np.sign(ad.grad(loss, node))
        acc += g
        xhat = project(xhat + (epsilon / steps) * g, x, epsilon)
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        raise ContractViolation("sign gradients cancelled; no adversarial direction")
    g_adv = acc / norm
    for _ in range(16):
        r = rng.standard_normal(x.size)
        r -= (r @ g_adv) * g_adv
        rn = np.linalg.norm(r)
        if rn > 1e-9:
            return g_adv, r / rn
    raise ContractViolation("could not draw a direction orthogonal to the adversarial one")


def _surface_grid(ens, x, y, g_adv, g_perp, epsilon, resolution):
    half = (resolution - 1) // 2
    offs = epsilon * np.arange(-half, half + 1, dtype=np.float64) / half
    points = (
        x[None, None, :]
        + offs[:, None, None] * g_adv[None, None, :]
        + offs[None, :, None] * g_perp[None, None, :]
    ).reshape(-1, x.size)
    losses = _batch_sce(ens, points, y).reshape(resolution, resolution)
    return offs, losses


def cmd_surface(args) -> None:
    doc = _load_config(
        args.config,
        allowed={
            "dataset", "model", "epsilon", "resolution", "direction_steps",
            "sample_index", "averaged", "max_samples", "pgd_iterations",
        },
        required={"dataset", "model", "epsilon"},
    )
    seed = _resolve_seed(args, doc)
    epsilon = float(doc["epsilon"])
    if epsilon <= 0:
        raise ConfigError(f"surface epsilon must be positive, got {epsilon}")
    resolution = int(doc.get("resolution", 21))
    if resolution < 3 or resolution % 2 == 0:
        raise ConfigError(f"resolution must be an odd integer >= 3, got {resolution}")
    steps = int(doc.get("direction_steps", 10))
    ens = _load_model(doc["model"])
    if ens.input_dim < 2:
        raise ConfigError("surface grids need at least two input dimensions")
    _, _, x_test, y_test = _load_dataset(doc["dataset"])
    x_test, y_test = _test_slice(doc, x_test, y_test)
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "surface", doc, seed,
        inputs=[args.config, doc["dataset"], doc["model"]],
        outputs=["surface.csv", "surface_meta.json"],
    )

    half = (resolution - 1) // 2

    def one_surface(i):
        x, y = x_test[i], int(y_test[i])
        rng = np.random.default_rng((seed, i))
        g_adv, g_perp = _surface_direction(ens, x, y, epsilon, steps, rng)
        offs, losses = _surface_grid(ens, x, y, g_adv, g_perp, epsilon, resolution)
        center = float(_batch_sce(ens, x[None, :], y)[0])
        # zero offsets leave x untouched, but the grid batch and the single
        # row may reduce in different orders, so allow a few ulps
        if not np.isclose(losses[half, half], center, rtol=1e-9, atol=0.0):
            raise ContractViolation(
                f"surface center {losses[half, half]} does not equal the loss "
                f"at sample {i}: {center}"
            )
        return offs, losses
    if doc.get("averaged"):
        pgd_cfg = AttackConfig(
            epsilon=epsilon, iterations=int(doc.get("pgd_iterations", 10)),
            restarts=1, seed=seed,
        )
        resisting = []
        for i in range(x_test.shape[0]):
            x, y = x_test[i], int(y_test[i])
            if ens.hard_decision(x, true_label=y) != y:
                continue
            rng = np.random.default_rng((seed, i))
            if not pgd_attack(ens, x, y, pgd_cfg, rng).success:
                resisting.append(i)
        if not resisting:
            raise ContractViolation("no sample resists the screening attack")
        stack = []
        offs = None
        for i in resisting:
            offs, losses = one_surface(i)
            stack.append(losses)
        losses = np.mean(stack, axis=0)
        meta = {"run_id": run_id, "averaged": True, "set_size": len(resisting),
                "samples": resisting}
        print(f"{run_id} surface: averaged over {len(resisting)} resisting samples")
    else:
        index = int(doc.get("sample_index", 0))
        if not 0 <= index < x_test.shape[0]:
            raise ConfigError(f"sample_index {index} outside the test set")
        offs, losses = one_surface(index)
        meta = {"run_id": run_id, "averaged": False, "set_size": 1, "samples": [index]}
        print(f"{run_id} surface: sample {index}")
    rows = [
        [run_id, i, j, offs[i], offs[j], losses[i, j]]
        for i in range(resolution)
        for j in range(resolution)
    ]
    _write_csv(out / "surface.csv", SURFACE_HEADER, rows)
    (out / "surface_meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def cmd_sweep_epsilon(args) -> None:
    doc = _load_config(
        args.config,
        allowed={"dataset", "model", "attacks", "epsilons", "attack", "max_samples", "pgd_objective"},
        required={"dataset", "model", "attacks", "epsilons"},
    )
    seed = _resolve_seed(args, doc)
    base = _attack_config(doc, seed)
    pgd_objective = doc.get("pgd_objective", "sce")
    attacks = list(doc["attacks"])
    for name in attacks:
        if name not in ATTACKS:
            raise ConfigError(f"unknown attack {name!r}, use one of {ATTACKS}")
    epsilons = sorted({float(e) for e in doc["epsilons"]} | {0.0})
    if epsilons[0] < 0:
        raise ConfigError("epsilons must be non-negative")
    ens = _load_model(doc["model"])
    defense = Path(doc["model"]).stem
    _, _, x_test, y_test = _load_dataset(doc["dataset"])
    x_test, y_test = _test_slice(doc, x_test, y_test)
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "sweep-epsilon", doc, seed,
        inputs=[args.config, doc["dataset"], doc["model"]],
        outputs=["sweep_epsilon.csv"],
        threads=args.threads,
    )
    n = x_test.shape[0]
    clean = np.array(
        [ens.hard_decision(x_test[i], true_label=int(y_test[i])) == int(y_test[i]) for i in range(n)]
    )
    clean_pct = 100.0 * clean.mean()
    pool, map_fn = _pool_map(args.threads)
    rows = []
    try:
        for name in attacks:
            broken: set[int] = set()
            last_robust = None
            for eps in epsilons:
                reused = len(broken)
                if eps > 0.0:
                    cfg = replace(base, epsilon=eps)
                    todo = [i for i in range(n) if clean[i] and i not in broken]

                    def attempt(i):
                        rng = np.random.default_rng((seed, i))
                        result = run_attack(
                            name, ens, x_test[i], int(y_test[i]), cfg, rng,
                            pgd_objective=pgd_objective,
                        )
                        return i, result.success

                    for i, success in map_fn(attempt, todo):
                        if success:
                            broken.add(i)
                robust_pct = 100.0 * (clean.sum() - len(broken)) / n
                if eps == 0.0 and robust_pct != clean_pct:
                    raise ContractViolation(
                        f"zero-epsilon row gives robust {robust_pct} != clean {clean_pct}"
                    )
                if last_robust is not None and robust_pct > last_robust + 1e-9:
                    raise ContractViolation(
                        f"robust accuracy increased from {last_robust} to {robust_pct} "
                        f"at epsilon {eps}"
                    )
                last_robust = robust_pct
                rows.append([run_id, defense, name, eps, clean_pct, robust_pct,
                             len(broken), reused])
    finally:
        if pool is not None:
            pool.shutdown()
    _write_csv(out / "sweep_epsilon.csv", EPS_SWEEP_HEADER, rows)
    print(f"{run_id} sweep-epsilon: {len(rows)} rows over {len(epsilons)} epsilons")


def _sweep_common(args, parameter: str, allowed_extra: set[str]):
    doc = _load_config(
        args.config,
        allowed={"dataset", "model", "attack", "max_samples"} | allowed_extra,
        required={"dataset", "model", parameter},
    )
    seed = _resolve_seed(args, doc)
    base = _attack_config(doc, seed)
    ens = _load_model(doc["model"])
    _, _, x_test, y_test = _load_dataset(doc["dataset"])
    x_test, y_test = _test_slice(doc, x_test, y_test)
    return doc, seed, base, ens, x_test, y_test


def cmd_sweep_tau(args) -> None:
    doc, seed, base, ens, x_test, y_test = _sweep_common(args, "taus", {"taus"})
    taus = [float(t) for t in doc["taus"]]
    if any(t <= 0 for t in taus):
        raise ConfigError("taus must be positive")
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "sweep-tau", doc, seed,
        inputs=[args.config, doc["dataset"], doc["model"]],
        outputs=["sweep_tau.csv"],
        threads=args.threads,
    )
    defense = Path(doc["model"]).stem
    pool, map_fn = _pool_map(args.threads)
    rows = []
    try:
        for tau in taus:
            cfg = replace(base, attack_tau=tau)
            summary, _ = evaluate_attack(
                lambda e, xi, yi, c, rng: run_attack("mora", e, xi, yi, c, rng),
                ens, x_test, y_test, cfg, map_fn=map_fn,
            )
            rows.append([run_id, defense, tau, 100.0 * summary.clean_accuracy,
                         100.0 * summary.robust_accuracy, summary.attack_successes])
    finally:
        if pool is not None:
            pool.shutdown()
    _write_csv(out / "sweep_tau.csv", TAU_SWEEP_HEADER, rows)
    print(f"{run_id} sweep-tau: {len(rows)} rows")


def cmd_sweep_beta(args) -> None:
    doc, seed, base, ens, x_test, y_test = _sweep_common(args, "betas", {"betas"})
    betas = [float(b) for b in doc["betas"]]
    if any(not 0.0 <= b <= 1.0 for b in betas):
        raise ConfigError("betas must lie in [0, 1]")
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "sweep-beta", doc, seed,
        inputs=[args.config, doc["dataset"], doc["model"]],
        outputs=["sweep_beta.csv"],
        threads=args.threads,
    )
    defense = Path(doc["model"]).stem
    pool, map_fn = _pool_map(args.threads)
    rows = []
    try:
        for beta in betas:
            summary, _ = evaluate_attack(
                lambda e, xi, yi, c, rng, b=beta: mora_attack(e, xi, yi, b, c, rng),
                ens, x_test, y_test, base, map_fn=map_fn,
            )
            rows.append([run_id, defense, beta, 100.0 * summary.clean_accuracy,
                         100.0 * summary.robust_accuracy, summary.attack_successes])
    finally:
        if pool is not None:
            pool.shutdown()
    _write_csv(out / "sweep_beta.csv", BETA_SWEEP_HEADER, rows)
    print(f"{run_id} sweep-beta: {len(rows)} rows")


def cmd_report(args) -> None:
    doc = _load_config(args.config, allowed={"inputs", "title"}, required={"inputs"})
    seed = _resolve_seed(args, doc)
    inputs = [Path(p) for p in doc["inputs"]]
    for p in inputs:
        if not p.exists():
            raise IOFormatError(f"report input not found: {p}")
    out = _out_dir(args)
    run_id = _write_manifest(
        out, "report", doc, seed, inputs=[args.config, *inputs], outputs=["report.md"]
    )
    lines = [f"# {doc.get('title', 'Robustness report')}", ""]
    lines.append(f"run_id: `{run_id}`")
    lines.append("")
    for p in inputs:
        with open(p, newline="") as fh:
            records = list(csv.reader(fh))
        if not records:
            raise IOFormatError(f"report input {p} is empty")
        header, body = records[0], records[1:]
        lines.append(f"## {p.name}")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for row in body:
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    lines.append("## Full-scale reference (static)")
    lines.append("")
    lines.append(
        "The numbers below are published full-scale results for a "
        "three-model diversity-trained ensemble under softmax forming. They "
        "are **not reproducible** with this toolkit's toy models and are "
        "included only as the qualitative target ordering."
    )
    lines.append("")
    header, ref = REFERENCE_SHEET
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    lines.append("| " + " | ".join(ref) + " |")
    lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    print(f"{run_id} report: {len(inputs)} inputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mora",
        description="Reweighed ensemble attacks, toy defenses, and robustness tooling.",
    )
    parser.add_argument("--version", action="version", version=f"mora {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    verbs = {
        "gen-data": (cmd_gen_data, "generate a toy dataset"),
        "train": (cmd_train, "train an ensemble defense"),
        "attack": (cmd_attack, "run one attack over a test set"),
        "eval": (cmd_eval, "evaluate attacks against defenses"),
        "ablate": (cmd_ablate, "run the ingredient ablation ladder"),
        "surface": (cmd_surface, "loss surface along the adversarial direction"),
        "sweep-epsilon": (cmd_sweep_epsilon, "robust accuracy across budgets"),
        "sweep-tau": (cmd_sweep_tau, "reweighing temperature sensitivity"),
        "sweep-beta": (cmd_sweep_beta, "blend coefficient sensitivity"),
        "report": (cmd_report, "render CSV results to markdown"),
    }
    for name, (func, help_text) in verbs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (IOFormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except MoraError as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

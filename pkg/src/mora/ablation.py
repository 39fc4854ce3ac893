"""Attack registry and the ingredient-by-ingredient ablation ladder.

The ladder starts from restart PGD and adds one ingredient per rung, in a
fixed order, ending at the full multi-target attack:

    pgd -> +momentum -> +early_stop -> +cosine_step -> +sub_logits
        -> +logit_norm -> +reweigh -> +multi_target

Rungs one and two run their full budget (early stopping only enters at
rung three), so an iterate that wanders off a successful region after
touching it counts as a failure there. Rungs five and six blend raw
sub-model logits into the objective with plain 1/M weights, first without
and then with margin normalization; rung seven switches to the adaptive
weights and rung eight appends the targeted phases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import (
    AttackConfig,
    AttackResult,
    _mora_builder,
    _require_clean_correct,
    _resolve_targets,
    _run_phases,
    cw_attack,
    mora_mt,
    mora_sweep,
    pgd_attack,
)
from .errors import CleanMisclassifiedError, ConfigError
from .models import Ensemble
from .objectives import sce

ATTACKS = ("pgd", "cw", "mora", "mora-mt")

RUNGS = (
    "pgd",
    "momentum",
    "early_stop",
    "cosine_step",
    "sub_logits",
    "logit_norm",
    "reweigh",
    "multi_target",
)


def run_attack(
    name: str, ens, x, y, cfg: AttackConfig, rng=None, *, pgd_objective: str = "sce"
) -> AttackResult:
    if name == "pgd":
        return pgd_attack(ens, x, y, cfg, rng, objective=pgd_objective)
    if name == "cw":
        return cw_attack(ens, x, y, cfg, rng)
    if name == "mora":
        return mora_sweep(ens, x, y, cfg, rng)
    if name == "mora-mt":
        return mora_mt(ens, x, y, cfg, rng)
    raise ConfigError(f"unknown attack {name!r}, use one of {ATTACKS}")


def attack_budget(name: str, ens: Ensemble, cfg: AttackConfig) -> int:
    """Worst-case iterations one sample may cost under the protocol."""
    if name in ("pgd", "cw"):
        return cfg.restarts * cfg.iterations
    sweep = len(cfg.beta_schedule) * cfg.per_beta_iterations
    if name == "mora":
        return sweep
    if name == "mora-mt":
        budgets = ladder_budgets(ens, cfg)
        return budgets["multi_target"]
    raise ConfigError(f"unknown attack {name!r}, use one of {ATTACKS}")


def _blend_phases(ens, y, cfg, *, weighting, normalize):
    return [
        (
            cfg.per_beta_iterations,
            _mora_builder(ens, y, beta, cfg, weighting=weighting, normalize=normalize, target=None),
            1.0,
        )
        for beta in cfg.beta_schedule
    ]


def run_rung(rung: str, ens: Ensemble, x, y: int, cfg: AttackConfig, rng=None) -> AttackResult:
    """One ladder rung on one sample; same success semantics as the attacks."""
    if rung not in RUNGS:
        raise ConfigError(f"unknown rung {rung!r}, use one of {RUNGS}")
    if rung == "multi_target":
        return mora_mt(ens, x, y, cfg, rng)
    _require_clean_correct(ens, x, y)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if rung in ("pgd", "momentum", "early_stop", "cosine_step"):
        builder = lambda z_subs, z_ens: sce(z_ens, y)
        phases = [(cfg.iterations, builder, 1.0) for _ in range(cfg.restarts)]
        level = RUNGS.index(rung)
        return _run_phases(
            ens, x, y, cfg, rng, phases,
            momentum=level >= 1,
            early_stop=level >= 2,
            cosine=level >= 3,
        )
    if rung == "sub_logits":
        phases = _blend_phases(ens, y, cfg, weighting="mean", normalize=False)
    elif rung == "logit_norm":
        phases = _blend_phases(ens, y, cfg, weighting="mean", normalize=True)
    else:
        phases = _blend_phases(ens, y, cfg, weighting="adaptive", normalize=True)
    return _run_phases(ens, x, y, cfg, rng, phases)


@dataclass(frozen=True)
class SampleOutcome:
    index: int
    clean_correct: bool
    attacked: bool
    success: bool
    iterations_used: int
    sub_fooled: int
    adversarial_example: np.ndarray | None
    trace: tuple = ()


@dataclass(frozen=True)
class EvalSummary:
    total: int
    clean_correct: int
    attack_successes: int

    @property
    def clean_accuracy(self) -> float:
        return self.clean_correct / self.total

    @property
    def robust_accuracy(self) -> float:
        # clean mistakes count against robustness; survivors are the
        # clean-correct points every attack attempt failed on
        return (self.clean_correct - self.attack_successes) / self.total


def evaluate_attack(
    runner,
    ens: Ensemble,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    *,
    map_fn=map,
) -> tuple[EvalSummary, list[SampleOutcome]]:
    """Run ``runner(ens, x_i, y_i, cfg, rng_i)`` over a sample set.

    Each sample gets its own generator seeded by (cfg.seed, index), so
    outcomes are independent of evaluation order; ``map_fn`` may be a
    thread pool's map. Clean mistakes are recorded but never attacked.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)

    def one(i: int) -> SampleOutcome:
        rng = np.random.default_rng((cfg.seed, i))
        try:
            result = runner(ens, x[i], int(y[i]), cfg, rng)
        except CleanMisclassifiedError:
            return SampleOutcome(i, False, False, False, 0, 0, None)
        return SampleOutcome(
            index=i,
            clean_correct=True,
            attacked=True,
            success=result.success,
            iterations_used=result.iterations_used,
            sub_fooled=result.sub_fooled,
            adversarial_example=result.adversarial_example if result.success else None,
            trace=result.trace,
        )

    outcomes = sorted(map_fn(one, range(x.shape[0])), key=lambda o: o.index)
    summary = EvalSummary(
        total=len(outcomes),
        clean_correct=sum(o.clean_correct for o in outcomes),
        attack_successes=sum(o.success for o in outcomes),
    )
    return summary, outcomes


def ladder_budgets(ens: Ensemble, cfg: AttackConfig) -> dict[str, int]:
    """Iteration budget each rung may spend per sample."""
    sweep = len(cfg.beta_schedule) * cfg.per_beta_iterations
    budgets = {}
    for rung in RUNGS:
        if rung in ("pgd", "momentum", "early_stop", "cosine_step"):
            budgets[rung] = cfg.restarts * cfg.iterations
        elif rung == "multi_target":
            if cfg.mt_targets == "all":
                extra = ens.num_classes - 1
            elif cfg.mt_targets == "none":
                extra = 0
            else:
                # an explicit list may contain a sample's own label; this is
                # the ceiling across samples
                extra = len(_resolve_targets(cfg, ens.num_classes, y=-1))
            budgets[rung] = sweep + extra * cfg.mt_iterations_per_target
        else:
            budgets[rung] = sweep
    return budgets

"""Iterative ell-infinity attack drivers.

One driver implements the shared loop: sign-gradient steps on a
configurable objective, optional momentum against a self-accumulating
momentum-free candidate sequence, optional cosine step schedule, and an
optional early stop. The reweighed attack, its beta sweep, the
multi-target phase, and the PGD / C&W-margin baselines are thin wrappers.

Success is always re-verified with exact serving semantics before it is
reported: the softened forming output steers the early stop, but a
returned success means hard_decision differs from the true label and the
point sits inside the feasible region. Clean-misclassified inputs are
rejected with CleanMisclassifiedError; evaluation code counts them as
already-misclassified rather than attacking them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CleanMisclassifiedError, ConfigError, ContractViolation
from .models import MODES, Ensemble
from .objectives import (
    ObjectiveContext,
    cw_loss,
    dl_value,
    mora_loss,
    nll_avg_prob,
    sce,
)

FEASIBILITY_SLACK = 1e-9
DEFAULT_BETA_SCHEDULE = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_ATTACK_TAU = {"softmax": 5.0, "voting": 10.0, "logits": 1.0}


@dataclass(frozen=True)
class AttackConfig:
    """Knobs of the attack protocol; defaults follow the evaluation setup."""

    epsilon: float
    iterations: int = 100
    nu: float = 0.75
    attack_tau: float | None = None  # None resolves per mode: 5 softmax, 10 voting
    beta_schedule: tuple[float, ...] = DEFAULT_BETA_SCHEDULE
    per_beta_iterations: int = 100
    mt_targets: str | tuple[int, ...] = "all"
    mt_iterations_per_target: int = 100
    restarts: int = 5
    pgd_step: float | None = None  # None resolves to epsilon / 4
    seed: int = 0
    literal_momentum_init: bool = False  # momentum candidate starts at 0, not x_0
    debug: bool = False  # assert feasibility after every update

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if not 0.0 <= self.nu <= 1.0:
            raise ConfigError(f"nu must lie in [0,1], got {self.nu}")
        if self.attack_tau is not None and not self.attack_tau > 0:
            raise ConfigError(f"attack_tau must be positive, got {self.attack_tau}")
        if not self.beta_schedule:
            raise ConfigError("beta_schedule must not be empty")
        for b in self.beta_schedule:
            if not 0.0 <= b <= 1.0:
                raise ConfigError(f"every beta must lie in [0,1], got {b}")
        if self.per_beta_iterations < 1:
            raise ConfigError("per_beta_iterations must be at least 1")
        if self.mt_iterations_per_target < 1:
            raise ConfigError("mt_iterations_per_target must be at least 1")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be at least 1, got {self.restarts}")
        if self.pgd_step is not None and not self.pgd_step > 0:
            raise ConfigError(f"pgd_step must be positive, got {self.pgd_step}")
        if isinstance(self.mt_targets, str):
            if self.mt_targets not in ("all", "none"):
                raise ConfigError(f"mt_targets must be 'all', 'none', or a tuple, got {self.mt_targets!r}")
        else:
            for t in self.mt_targets:
                if not isinstance(t, (int, np.integer)) or t < 0:
                    raise ConfigError(f"explicit mt_targets must be class indices, got {t!r}")

    def resolved_tau(self, mode: str) -> float:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        return DEFAULT_ATTACK_TAU[mode] if self.attack_tau is None else self.attack_tau

    def resolved_step(self) -> float:
        return self.epsilon / 4.0 if self.pgd_step is None else self.pgd_step


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss: float
    dl_e: float
    sub_fooled: int
    step_size: float


@dataclass(frozen=True)
class AttackResult:
    adversarial_example: np.ndarray
    success: bool
    iterations_used: int
    sub_fooled: int
    trace: tuple[TraceRecord, ...] = field(repr=False, default=())


def project(v: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp v into the feasible region [0,1]^d intersected with B_inf(x, eps)."""
    lo = np.maximum(0.0, x - epsilon)
    hi = np.minimum(1.0, x + epsilon)
    return np.clip(v, lo, hi)


def random_init(x: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Project a uniform perturbation of x; returns x exactly when eps is 0."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0.0:
        return x.copy()
    return project(x + rng.uniform(-epsilon, epsilon, x.shape[0]), x, epsilon)


def cosine_step(i: int, total: int, epsilon: float) -> float:
    """Step size eps * (1 + cos(i*pi/I)); monotone non-increasing in i."""
    if not 0 <= i < total:
        raise ContractViolation(f"iteration {i} outside [0, {total})")
    return epsilon * (1.0 + math.cos(i * math.pi / total))


def _count_fooled(z_values: list[np.ndarray], y: int) -> int:
    return sum(1 for z in z_values if dl_value(z, y) <= 0)


def _assert_feasible(xhat: np.ndarray, x: np.ndarray, epsilon: float) -> None:
    if np.max(np.abs(xhat - x)) > epsilon + FEASIBILITY_SLACK:
        raise ContractViolation("iterate escaped the perturbation ball")
    if xhat.min() < 0.0 or xhat.max() > 1.0:
        raise ContractViolation("iterate escaped the input box")


def _finish(
    ens: Ensemble,
    x: np.ndarray,
    y: int,
    epsilon: float,
    xhat: np.ndarray,
    used: int,
    trace: list[TraceRecord],
) -> AttackResult:
    """Build a result, re-verifying success with exact serving semantics."""
    _assert_feasible(xhat, x, epsilon)
    z_values = ens.forward_subs(xhat)
    success = ens.hard_decision(xhat, true_label=y) != y
    return AttackResult(
        adversarial_example=xhat,
        success=success,
        iterations_used=used,
        sub_fooled=_count_fooled(z_values, y),
        trace=tuple(trace),
    )


def drive_attack(
    ens: Ensemble,
    x: np.ndarray,
    y: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
    loss_builder,
    *,
    iterations: int,
    momentum: bool = True,
    cosine: bool = True,
    early_stop: bool = True,
    direction: float = 1.0,
    trace_offset: int = 0,
    start: np.ndarray | None = None,
) -> AttackResult:
    """One random-init run of the shared sign-gradient loop.

    ``loss_builder(z_subs, z_ens) -> Node`` rebuilds the objective every
    iteration so indicator gates and weights refresh. ``direction`` is +1
    to ascend (untargeted) and -1 to descend (targeted). The early stop
    triggers on the softened forming margin and is confirmed against hard
    serving semantics; an unconfirmed trigger keeps iterating. The final
    iterate is verified too, so a success on the last step still counts.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = random_init(x, cfg.epsilon, rng) if start is None else project(start, x, cfg.epsilon)
    xprev = xhat
    mu = np.zeros_like(xhat) if cfg.literal_momentum_init else xhat
    trace: list[TraceRecord] = []
    for i in range(iterations):
        xn = ad.leaf(xhat)
        z_subs = ens.sub_exprs(xn)
        z_ens = ens.ensemble_expr(z_subs)
        z_values = [z.value for z in z_subs]
        dl_e = dl_value(z_ens.value, y)
        if early_stop and dl_e <= 0 and ens.hard_decision(xhat, true_label=y) != y:
            return _finish(ens, x, y, cfg.epsilon, xhat, i, trace)
        loss = loss_builder(z_subs, z_ens)
        g = direction * np.sign(ad.grad(loss, xn))
        alpha = cosine_step(i, iterations, cfg.epsilon) if cosine else cfg.resolved_step()
        if momentum:
            mu = project(mu + alpha * g, x, cfg.epsilon)
            if cfg.nu == 1.0:
                xnew = mu
            else:
                xnew = project(
                    xhat + cfg.nu * (mu - xhat) + (1.0 - cfg.nu) * (xhat - xprev),
                    x,
                    cfg.epsilon,
                )
        else:
            xnew = project(xhat + alpha * g, x, cfg.epsilon)
        if cfg.debug:
            _assert_feasible(xnew, x, cfg.epsilon)
        trace.append(
            TraceRecord(
                iteration=trace_offset + i,
                loss=float(loss.value),
                dl_e=dl_e,
                sub_fooled=_count_fooled(z_values, y),
                step_size=alpha,
            )
        )
        xprev, xhat = xhat, xnew
    return _finish(ens, x, y, cfg.epsilon, xhat, iterations, trace)


def _require_clean_correct(ens: Ensemble, x: np.ndarray, y: int) -> None:
    x = np.asarray(x, dtype=np.float64)
    if x.min() < 0.0 or x.max() > 1.0:
        raise ContractViolation("attack input must lie in the unit box")
    if ens.hard_decision(x, true_label=y) != y:
        raise CleanMisclassifiedError(f"input already classified as label != {y}")


def _mora_builder(ens: Ensemble, y: int, beta: float, cfg: AttackConfig, *, weighting, normalize, target):
    ctx = ObjectiveContext(
        true_label=y,
        mode=ens.mode,
        attack_tau=cfg.resolved_tau(ens.mode),
        beta=beta,
        num_models=ens.num_models,
        target=target,
    )
    return lambda z_subs, z_ens: mora_loss(z_subs, z_ens, ctx, weighting, normalize)


def mora_attack(
    ens: Ensemble,
    x: np.ndarray,
    y: int,
    beta: float,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    *,
    no_reweigh: bool = False,
    target: int | None = None,
) -> AttackResult:
    """One fixed-beta run of the reweighed attack (momentum + cosine steps).

    ``no_reweigh`` replaces the importance weights with the bare
    stop-on-success indicator; under logits forming the two runs are
    identical. ``target`` switches to the targeted loss, which is
    descended; success still means any misclassification.
    """
    _require_clean_correct(ens, x, y)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    builder = _mora_builder(
        ens, y, beta, cfg,
        weighting="indicator" if no_reweigh else "adaptive",
        normalize=True,
        target=target,
    )
    return drive_attack(
        ens, x, y, cfg, rng, builder,
        iterations=cfg.iterations,
        direction=-1.0 if target is not None else 1.0,
    )


def _run_phases(
    ens, x, y, cfg, rng, phases, *, momentum=True, cosine=True, early_stop=True
) -> AttackResult:
    """Run (iterations, builder, direction) phases until one succeeds.

    Each phase starts from its own random init; iteration counts and
    traces accumulate across phases so trace indices stay increasing.
    """
    used = 0
    trace: list[TraceRecord] = []
    result = None
    for iterations, builder, direction in phases:
        result = drive_attack(
            ens, x, y, cfg, rng, builder,
            iterations=iterations,
            momentum=momentum,
            cosine=cosine,
            early_stop=early_stop,
            direction=direction,
            trace_offset=used,
        )
        used += result.iterations_used
        trace.extend(result.trace)
        if result.success:
            break
    assert result is not None
    return AttackResult(
        adversarial_example=result.adversarial_example,
        success=result.success,
        iterations_used=used,
        sub_fooled=result.sub_fooled,
        trace=tuple(trace),
    )


def mora_sweep(
    ens: Ensemble,
    x: np.ndarray,
    y: int,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    *,
    no_reweigh: bool = False,
) -> AttackResult:
    """Run the attack once per beta in the schedule, stopping at first success."""
    _require_clean_correct(ens, x, y)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    weighting = "indicator" if no_reweigh else "adaptive"
    phases = [
        (
            cfg.per_beta_iterations,
            _mora_builder(ens, y, beta, cfg, weighting=weighting, normalize=True, target=None),
            1.0,
        )
        for beta in cfg.beta_schedule
    ]
    return _run_phases(ens, x, y, cfg, rng, phases)


def _resolve_targets(cfg: AttackConfig, num_classes: int, y: int) -> list[int]:
    if cfg.mt_targets == "all":
        return [t for t in range(num_classes) if t != y]
    if cfg.mt_targets == "none":
        return []
    targets = []
    for t in cfg.mt_targets:
        if not 0 <= t < num_classes:
            raise ConfigError(f"target {t} outside the {num_classes}-class range")
        if t != y:
            targets.append(int(t))
    return targets


def mora_mt(
    ens: Ensemble,
    x: np.ndarray,
    y: int,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Beta sweep first; on failure, one targeted run per alternative label.

    Targeted runs fix beta at 0.5 and descend the substituted loss; the
    success criterion stays "any misclassification", checked with exact
    serving semantics.
    """
    _require_clean_correct(ens, x, y)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    phases = [
        (
            cfg.per_beta_iterations,
            _mora_builder(ens, y, beta, cfg, weighting="adaptive", normalize=True, target=None),
            1.0,
        )
        for beta in cfg.beta_schedule
    ]
    for t in _resolve_targets(cfg, ens.num_classes, y):
        phases.append(
            (
                cfg.mt_iterations_per_target,
                _mora_builder(ens, y, 0.5, cfg, weighting="adaptive", normalize=True, target=t),
                -1.0,
            )
        )
    return _run_phases(ens, x, y, cfg, rng, phases)


def _baseline(ens, x, y, cfg, rng, builder) -> AttackResult:
    """Restart-based fixed-step sign-gradient ascent without momentum."""
    _require_clean_correct(ens, x, y)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    phases = [(cfg.iterations, builder, 1.0) for _ in range(cfg.restarts)]
    return _run_phases(ens, x, y, cfg, rng, phases, momentum=False, cosine=False)


def pgd_attack(
    ens: Ensemble,
    x: np.ndarray,
    y: int,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    *,
    objective: str = "sce",
) -> AttackResult:
    """Restart PGD with a fixed step on the forming output.

    ``objective`` selects the ascended loss: "sce" applies softmax
    cross-entropy to the forming output as served (probabilities included),
    "nll" uses the negative log of the averaged probability, the
    conventional objective against probability-averaging ensembles (falls
    back to "sce" under logits forming, where no probabilities exist).
    """
    if objective not in ("sce", "nll"):
        raise ConfigError(f"objective must be 'sce' or 'nll', got {objective!r}")
    if objective == "nll" and ens.mode != "logits":
        builder = lambda z_subs, z_ens: nll_avg_prob(z_ens, y)
    else:
        builder = lambda z_subs, z_ens: sce(z_ens, y)
    return _baseline(ens, x, y, cfg, rng, builder)


def cw_attack(
    ens: Ensemble,
    x: np.ndarray,
    y: int,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Restart PGD ascending the margin objective on the forming output."""
    return _baseline(ens, x, y, cfg, rng, lambda z_subs, z_ens: cw_loss(z_ens, y))

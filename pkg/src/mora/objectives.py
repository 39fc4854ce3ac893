"""Attack objectives: margins, logit normalization, reweighing, losses.

The reweighed loss blends two normalized views of the ensemble, a
weighted sum of sub-model logits and the forming output itself:

    SCE( beta * N(sum_m w_m z^m) + (1 - beta) * N(z^E), y )

where N divides a logit vector by its detached margin (zeroing it once
the margin is lost) and w_m is each sub-model's importance weight, the
derivative of the formed margin with respect to that sub-model's margin.
Weights and divisors are constants in the gradient: only the logits carry
derivatives. The targeted variant substitutes the target class for y
throughout and is descended rather than ascended by the driver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .errors import ConfigError, ContractViolation
from .models import MODES

PROB_FLOOR = 1e-12


def runner_up(z: Array, label: int) -> int:
    """Index of the largest entry other than ``label`` (lowest index on ties)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] < 2:
        raise ContractViolation("runner_up needs at least two classes")
    masked = z.copy()
    masked[label] = -np.inf
    return int(np.argmax(masked))


def dl_value(z: Array, label: int) -> float:
    """Margin z_y - max_{i != y} z_i; nonpositive once the label loses."""
    z = np.asarray(z, dtype=np.float64)
    return float(z[label] - z[runner_up(z, label)])


def sce(z: Node, label: int) -> Node:
    """Softmax cross-entropy of a logit vector, stable for large logits."""
    return ad.sub(ad.logsumexp(z), ad.gather(z, label))


def sce_rows(z: Node, labels: Array) -> Node:
    """Rowwise softmax cross-entropy for a (batch, classes) logit node."""
    return ad.sub(ad.logsumexp(z), ad.gather(z, labels))


def cw_loss(z: Node, label: int) -> Node:
    """Negated margin; ascending it drives the label below the runner-up."""
    return ad.sub(ad.gather(z, runner_up(z.value, label)), ad.gather(z, label))


def nll_avg_prob(p: Node, label: int) -> Node:
    """Negative log of an averaged probability vector's label entry.

    The probability is floored at 1e-12 before the log. This is the
    training objective of the toy defenses and the conventional PGD
    objective against probability-averaging ensembles.
    """
    return ad.neg(ad.log(ad.clamp_min(ad.gather(p, label), PROB_FLOOR)))


def nll_rows(p: Node, labels: Array) -> Node:
    return ad.neg(ad.log(ad.clamp_min(ad.gather(p, labels), PROB_FLOOR)))


def scenorm(z: Node, label: int) -> Node:
    """Divide logits by their detached margin; zero vector once DL <= 0.

    The divisor never enters the gradient, so the output's margin is
    exactly 1 while the indicator is on.
    """
    d = dl_value(z.value, label)
    if d <= 0:
        return ad.constant(np.zeros_like(z.value))
    return ad.div_const(z, d)


def importance_weight(z: Array, label: int, mode: str, attack_tau: float, num_models: int) -> float:
    """Derivative of the formed margin w.r.t. this sub-model's margin, over M.

    Computed in closed form: with s = softmax(z / tau),

        voting/softmax: 1[DL > 0] * s_y (1 - s_y + s_yhat) / (tau * M)
        logits:         1[DL > 0]

    tau = 1 recovers the exact derivative for softmax forming; larger tau
    smooths the weights (the protocol default). The value is a constant to
    the gradient, and is exactly zero once the sub-model is fooled.
    """
    if attack_tau <= 0:
        raise ConfigError(f"attack_tau must be positive, got {attack_tau}")
    if num_models < 1:
        raise ConfigError(f"num_models must be at least 1, got {num_models}")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    z = np.asarray(z, dtype=np.float64)
    if dl_value(z, label) <= 0:
        return 0.0
    if mode == "logits":
        return 1.0
    tau = float(attack_tau)
    s = ad.softmax_values(z, tau)
    sy = float(s[label])
    syh = float(s[runner_up(z, label)])
    return sy * (1.0 - sy + syh) / (tau * num_models)


@dataclass(frozen=True)
class ObjectiveContext:
    """Everything the reweighed loss needs besides the logits."""

    true_label: int
    mode: str
    attack_tau: float
    beta: float
    num_models: int
    target: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.attack_tau > 0:
            raise ConfigError(f"attack_tau must be positive, got {self.attack_tau}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0,1], got {self.beta}")
        if self.num_models < 1:
            raise ConfigError(f"num_models must be at least 1, got {self.num_models}")
        if self.target is not None and self.target == self.true_label:
            raise ConfigError("target must differ from the true label")

    @property
    def attack_label(self) -> int:
        return self.true_label if self.target is None else self.target


WEIGHTINGS = ("adaptive", "indicator", "mean")


def mora_loss(
    z_subs: list[Node],
    z_ens: Node,
    ctx: ObjectiveContext,
    weighting: str = "adaptive",
    normalize: bool = True,
) -> Node:
    """The reweighed attack loss; see the module docstring.

    ``weighting`` and ``normalize`` expose the ablation variants:
    "indicator" drops the reweighing factor but keeps the stop-on-success
    gate, "mean" averages sub-model logits with no gate, and
    ``normalize=False`` drops the margin normalization.
    """
    if len(z_subs) != ctx.num_models:
        raise ContractViolation(
            f"expected {ctx.num_models} sub-model logit vectors, got {len(z_subs)}"
        )
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    label = ctx.attack_label
    acc = None
    for z in z_subs:
        if weighting == "adaptive":
            w = importance_weight(z.value, label, ctx.mode, ctx.attack_tau, ctx.num_models)
        elif weighting == "indicator":
            w = 1.0 if dl_value(z.value, label) > 0 else 0.0
        else:
            w = 1.0 / ctx.num_models
        if w == 0.0:
            continue
        term = ad.scale(w, z)
        acc = term if acc is None else ad.add(acc, term)
    if acc is None:
        acc = ad.constant(np.zeros_like(z_ens.value))
    t_sub = scenorm(acc, label) if normalize else acc
    t_ens = scenorm(z_ens, label) if normalize else z_ens
    blend = ad.add(ad.scale(ctx.beta, t_sub), ad.scale(1.0 - ctx.beta, t_ens))
    return sce(blend, label)

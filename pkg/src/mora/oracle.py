"""Ground-truth robustness by exhaustive grid search, plus a derivative
check for the reweighing formula.

The grid oracle is exact with respect to its own grid: a "vulnerable"
verdict always carries a re-verified witness, while "robust" means no grid
point flips the decision at the stated resolution. It is deliberately
restricted to d <= 3 where the grid is tractable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import softmax_values
from .errors import ConfigError, ContractViolation
from .models import MODES, Ensemble
from .objectives import dl_value, importance_weight, runner_up

MAX_ORACLE_DIM = 3
WITNESS_SLACK = 1e-9


@dataclass(frozen=True)
class OracleVerdict:
    vulnerable: bool
    witness: np.ndarray | None
    grid_resolution: int

    def __post_init__(self):
        if self.vulnerable != (self.witness is not None):
            raise ContractViolation("vulnerable verdicts carry a witness, robust ones do not")


def brute_force_robust(
    ens: Ensemble, x, y: int, epsilon: float, resolution: int = 41
) -> OracleVerdict:
    """Exhaustively test the clipped epsilon-grid around ``x``.

    Each coordinate takes the values ``x_j + k * epsilon / half`` for
    ``k = -half..half`` with ``half = (resolution - 1) / 2``, clipped to
    [0, 1]. The witness is the first misclassified point in row-major
    order and is re-verified before being returned. Ties at the decision
    boundary count for the defender.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d > MAX_ORACLE_DIM:
        raise ConfigError(
            f"grid oracle evaluates resolution**d points; d={d} exceeds the "
            f"tractable limit of {MAX_ORACLE_DIM}"
        )
    if resolution < 3 or resolution % 2 == 0:
        raise ConfigError(f"resolution must be an odd integer >= 3, got {resolution}")
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    if np.any(x < 0) or np.any(x > 1):
        raise ContractViolation("oracle input must lie in the unit box")
    half = (resolution - 1) // 2
    offsets = epsilon * np.arange(-half, half + 1, dtype=np.float64) / half
    axes = [np.clip(x[j] + offsets, 0.0, 1.0) for j in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    flips = ens.hard_decisions(mesh, true_label=y) != y
    if not flips.any():
        return OracleVerdict(vulnerable=False, witness=None, grid_resolution=resolution)
    witness = mesh[int(np.argmax(flips))].copy()
    if ens.hard_decision(witness, true_label=y) == y:
        raise ContractViolation("witness failed re-verification")
    if np.max(np.abs(witness - x)) > epsilon + WITNESS_SLACK:
        raise ContractViolation("witness left the epsilon ball")
    return OracleVerdict(vulnerable=True, witness=witness, grid_resolution=resolution)


def check_weight_formula(
    mode: str, tau: float, k: int, trials: int = 1000, seed: int = 0
) -> float:
    """Max relative error of the reweighing formula against a numeric
    derivative of the formed margin in the sub-model margin.

    Holding the runner-up class fixed, the sub-model logit vector is
    reparametrized by its margin and the forming map's margin response is
    differenced centrally. Logit forming is the identity, where the
    indicator weight is the convention rather than a scaled derivative, so
    that mode returns exactly 0.0 without sampling.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if k < 2:
        raise ConfigError(f"need at least two classes, got {k}")
    if trials < 1:
        raise ConfigError(f"trials must be positive, got {trials}")
    if mode == "logits":
        return 0.0
    rng = np.random.default_rng(seed)
    delta = 1e-4
    worst = 0.0
    for _ in range(trials):
        z = rng.normal(0.0, 2.0, k)
        y = int(np.argmax(z))
        yh = runner_up(z, y)
        if dl_value(z, y) <= 0:
            continue
        expected = importance_weight(z, y, mode, tau, num_models=1)

        def margin(dl: float) -> float:
            moved = z.copy()
            moved[y] = z[yh] + dl
            s = softmax_values(moved, tau)
            return float(s[y] - s[yh])

        dl0 = dl_value(z, y)
        fd = (margin(dl0 + delta) - margin(dl0 - delta)) / (2.0 * delta)
        worst = max(worst, abs(fd - expected) / max(abs(expected), 1e-300))
    return worst


def completeness(oracle_vulnerable, attack_succeeded) -> float:
    """Fraction of oracle-vulnerable instances the attack also breaks.

    Vacuously 1.0 when nothing is vulnerable.
    """
    vuln = np.asarray(oracle_vulnerable, dtype=bool)
    hit = np.asarray(attack_succeeded, dtype=bool)
    if vuln.shape != hit.shape:
        raise ContractViolation(
            f"mismatched lengths: {vuln.shape} oracle flags vs {hit.shape} attack flags"
        )
    if not vuln.any():
        return 1.0
    return float(hit[vuln].mean())

"""Toy ensemble defenses and their training loop.

Trains small ReLU MLP ensembles with plain minibatch gradient descent on
the softmax cross-entropy of the forming output, optionally plus a
diversity penalty:

- ``grad_align``: mean pairwise cosine similarity of per-sub-model loss
  gradients with respect to the input. The input gradient is built as an
  explicit expression (softmax residual pulled back through the layers
  with the ReLU activation pattern detached), so the penalty trains with
  first-order machinery only; for ReLU nets the detached pattern is the
  exact derivative almost everywhere.
- ``logit_diversity``: mean pairwise cosine similarity of the sub-models'
  logit vectors with the true-class entry masked out.

Both penalties smooth denominators by adding 1e-12 to the norms.
Adversarial training replaces each batch with PGD examples against the
current ensemble. Everything is deterministic given the config.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .attacks import project
from .errors import ConfigError, DivergenceError
from .models import MODES, Ensemble, MLPClassifier, form_expr
from .objectives import sce_rows

GENERATORS = ("blobs", "two_moons", "rings", "random_teacher")
REGULARIZERS = ("none", "grad_align", "logit_diversity")
NORM_SMOOTHING = 1e-12


@dataclass(frozen=True)
class DatasetSpec:
    generator: str
    d: int = 2
    k: int = 2
    samples: int = 400
    noise: float = 0.1
    seed: int = 0
    test_fraction: float = 0.5

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}, use one of {GENERATORS}")
        if self.d < 1 or self.k < 2 or self.samples < self.k:
            raise ConfigError("dataset needs d >= 1, k >= 2, samples >= k")
        if self.generator == "two_moons" and (self.d != 2 or self.k != 2):
            raise ConfigError("two_moons is a 2-class 2-D generator")
        if self.generator == "rings" and self.d != 2:
            raise ConfigError("rings is a 2-D generator")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie strictly between 0 and 1")


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def _balanced_counts(samples: int, k: int) -> list[int]:
    base, extra = divmod(samples, k)
    return [base + (1 if c < extra else 0) for c in range(k)]


def _raw_blobs(spec: DatasetSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    angles = 2.0 * np.pi * np.arange(spec.k) / spec.k
    centers = np.zeros((spec.k, spec.d))
    centers[:, 0] = np.cos(angles)
    centers[:, 1 % spec.d] = np.sin(angles) if spec.d > 1 else centers[:, 0]
    if spec.d > 2:
        centers[:, 2:] = rng.uniform(-1, 1, (spec.k, spec.d - 2))
    xs, ys = [], []
    for c, n in enumerate(_balanced_counts(spec.samples, spec.k)):
        xs.append(centers[c] + rng.normal(0, spec.noise + 0.05, (n, spec.d)))
        ys.append(np.full(n, c, dtype=np.intp))
    return np.concatenate(xs), np.concatenate(ys)


def _raw_two_moons(spec: DatasetSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    n0, n1 = _balanced_counts(spec.samples, 2)
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + rng.normal(0, spec.noise, (spec.samples, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.intp), np.ones(n1, dtype=np.intp)])
    return x, y


def _raw_rings(spec: DatasetSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for c, n in enumerate(_balanced_counts(spec.samples, spec.k)):
        radius = 0.5 + c
        theta = rng.uniform(0, 2 * np.pi, n)
        ring = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        xs.append(ring + rng.normal(0, spec.noise, (n, 2)))
        ys.append(np.full(n, c, dtype=np.intp))
    return np.concatenate(xs), np.concatenate(ys)


def _raw_random_teacher(spec: DatasetSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Labels from a frozen random MLP; sampling is quota-based per class."""
    w1 = rng.normal(0, 2.0, (16, spec.d))
    b1 = rng.normal(0, 0.5, 16)
    w2 = rng.normal(0, 2.0, (spec.k, 16))
    b2 = rng.normal(0, 0.5, spec.k)

    def teach(points):
        h = np.maximum(points @ w1.T + b1, 0.0)
        return np.argmax(h @ w2.T + b2, axis=1)

    quotas = _balanced_counts(spec.samples, spec.k)
    got = [[] for _ in range(spec.k)]
    for _ in range(2000):
        if all(len(g) >= q for g, q in zip(got, quotas)):
            break
        pool = rng.uniform(0, 1, (max(4 * spec.samples, 256), spec.d))
        labels = teach(pool)
        for c in range(spec.k):
            need = quotas[c] - len(got[c])
            if need > 0:
                got[c].extend(pool[labels == c][:need])
    if any(len(g) < q for g, q in zip(got, quotas)):
        raise ConfigError(
            "random teacher never produced a balanced labeling; pick another seed"
        )
    x = np.concatenate([np.asarray(g) for g in got])
    y = np.concatenate([np.full(q, c, dtype=np.intp) for c, q in enumerate(quotas)])
    noisy = x + rng.normal(0, spec.noise * 0.05, x.shape)
    return noisy, y


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic labeled toy data, min-max scaled into the unit box and
    split into class-stratified train/test halves."""
    rng = np.random.default_rng(spec.seed)
    raw = {
        "blobs": _raw_blobs,
        "two_moons": _raw_two_moons,
        "rings": _raw_rings,
        "random_teacher": _raw_random_teacher,
    }[spec.generator]
    x, y = raw(spec, rng)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0.0] = 1.0
    x = (x - lo) / span
    train_idx, test_idx = [], []
    for c in range(spec.k):
        members = np.flatnonzero(y == c)
        rng.shuffle(members)
        n_test = int(round(len(members) * spec.test_fraction))
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    train_idx = np.asarray(sorted(train_idx))
    test_idx = np.asarray(sorted(test_idx))
    return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx])


@dataclass(frozen=True)
class AdversarialTrainingSpec:
    epsilon: float
    steps: int = 5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"training epsilon must be positive, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"training steps must be positive, got {self.steps}")


@dataclass(frozen=True)
class TrainConfig:
    dataset: DatasetSpec
    num_models: int = 3
    hidden: tuple[int, ...] = (16,)
    epochs: int = 60
    learning_rate: float = 0.5
    batch_size: int = 32
    mode: str = "softmax"
    vote_tau: float = 0.1
    regularizer: str = "none"
    reg_lambda: float = 0.0
    adversarial: AdversarialTrainingSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_models < 1:
            raise ConfigError("num_models must be at least 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not self.vote_tau > 0:
            raise ConfigError("vote_tau must be positive")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}")
        if self.reg_lambda < 0:
            raise ConfigError(f"reg_lambda must be non-negative, got {self.reg_lambda}")


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    loss: float
    accuracy: float
    regularizer_value: float


@dataclass(frozen=True)
class TrainResult:
    ensemble: Ensemble
    log: tuple[TrainLogRow, ...] = field(repr=False)


def _init_params(cfg: TrainConfig) -> list[list[list[np.ndarray]]]:
    d, k = cfg.dataset.d, cfg.dataset.k
    sizes = [d, *cfg.hidden, k]
    params = []
    for m in range(cfg.num_models):
        rng = np.random.default_rng((cfg.seed, m))
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            layers.append(
                [
                    rng.normal(0, 1.0 / np.sqrt(fan_in), (fan_out, fan_in)),
                    np.zeros(fan_out),
                ]
            )
        params.append(layers)
    return params


def _model_nodes(params_m) -> list[tuple[ad.Node, ad.Node]]:
    return [(ad.leaf(w), ad.leaf(b)) for w, b in params_m]


def _forward_expr(xb: ad.Node, nodes) -> tuple[ad.Node, list[np.ndarray]]:
    """Batched logits node plus the detached ReLU activation patterns."""
    h = xb
    masks = []
    last = len(nodes) - 1
    for i, (w, b) in enumerate(nodes):
        pre = ad.affine(h, w, b)
        if i != last:
            masks.append((pre.value > 0).astype(np.float64))
            h = ad.relu(pre)
        else:
            h = pre
    return h, masks


def _input_grad_expr(z: ad.Node, labels: np.ndarray, nodes, masks) -> ad.Node:
    """Expression for d sce(z^m, y) / d x with activation patterns frozen."""
    k = z.value.shape[1]
    onehot = np.eye(k)[labels]
    g = ad.sub(ad.softmax_t(z, 1.0), ad.constant(onehot))
    for (w, _), mask in zip(reversed(nodes[1:]), reversed(masks)):
        g = ad.mul(ad.matmul(g, w), ad.constant(mask))
    return ad.matmul(g, nodes[0][0])


def _rowwise_cosine(a: ad.Node, b: ad.Node) -> ad.Node:
    # sum-of-squares offset keeps the root differentiable at zero rows;
    # it perturbs the norm value far below the 1e-12 smoothing itself
    dots = ad.vsum(ad.mul(a, b), axis=1)
    na = ad.add(ad.sqrt(ad.add(ad.vsum(ad.mul(a, a), axis=1), NORM_SMOOTHING**2)), NORM_SMOOTHING)
    nb = ad.add(ad.sqrt(ad.add(ad.vsum(ad.mul(b, b), axis=1), NORM_SMOOTHING**2)), NORM_SMOOTHING)
    return ad.mul(dots, ad.pow_const(ad.mul(na, nb), -1.0))


def _penalty_expr(cfg, z_subs, grad_exprs, labels) -> ad.Node:
    """Mean pairwise cosine penalty over sub-models and batch rows."""
    k = z_subs[0].value.shape[1]
    pairs = list(combinations(range(len(z_subs)), 2))
    terms = []
    if cfg.regularizer == "grad_align":
        for a, b in pairs:
            terms.append(_rowwise_cosine(grad_exprs[a], grad_exprs[b]))
    else:
        keep = (1.0 - np.eye(k)[labels])
        masked = [ad.mul(z, ad.constant(keep)) for z in z_subs]
        for a, b in pairs:
            terms.append(_rowwise_cosine(masked[a], masked[b]))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.vmean(ad.div_const(acc, len(pairs)))


def _ensemble_from_params(params, cfg: TrainConfig) -> Ensemble:
    models = tuple(
        MLPClassifier(tuple((w.copy(), b.copy()) for w, b in layers)) for layers in params
    )
    return Ensemble(models, cfg.mode, cfg.vote_tau)


def _pgd_batch(params, cfg, xb, yb, rng) -> np.ndarray:
    """Feasible adversarial training inputs via sign-gradient PGD."""
    spec = cfg.adversarial
    eps = spec.epsilon
    step = 2.0 * eps / spec.steps
    adv = np.clip(xb + rng.uniform(-eps, eps, xb.shape), 0.0, 1.0)
    adv = project(adv, xb, eps)
    for _ in range(spec.steps):
        x_node = ad.leaf(adv)
        z_subs = []
        for layers in params:
            nodes = [(ad.constant(w), ad.constant(b)) for w, b in layers]
            z, _ = _forward_expr(x_node, nodes)
            z_subs.append(z)
        z_ens = form_expr(z_subs, cfg.mode, cfg.vote_tau)
        loss = ad.vsum(sce_rows(z_ens, yb))
        g = np.sign(ad.grad(loss, x_node))
        adv = project(adv + step * g, xb, eps)
    return adv


def _hard_accuracy(ens: Ensemble, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(ens.hard_decisions(x) == y))


def train_ensemble(cfg: TrainConfig, data: Dataset | None = None) -> TrainResult:
    """Minibatch gradient descent on the forming output's cross-entropy.

    A zero-lambda or "none" regularizer skips the penalty term entirely, so
    those runs are step-identical to the unregularized baseline. Raises
    DivergenceError with the epoch/batch location if the loss goes
    non-finite.
    """
    data = generate_dataset(cfg.dataset) if data is None else data
    params = _init_params(cfg)
    # stream distinct from every per-model init stream (cfg.seed, m < num_models)
    rng = np.random.default_rng((cfg.seed, cfg.num_models))
    n = data.x_train.shape[0]
    penalized = cfg.regularizer != "none" and cfg.reg_lambda > 0
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_reg = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb_raw = data.x_train[idx]
            yb = data.y_train[idx]
            if cfg.adversarial is not None:
                xb_raw = _pgd_batch(params, cfg, xb_raw, yb, rng)
            xb = ad.constant(xb_raw)
            nodes = [_model_nodes(p) for p in params]
            z_subs = []
            grad_exprs = []
            for m, model_nodes in enumerate(nodes):
                z, masks = _forward_expr(xb, model_nodes)
                z_subs.append(z)
                if penalized and cfg.regularizer == "grad_align":
                    grad_exprs.append(_input_grad_expr(z, yb, model_nodes, masks))
            z_ens = form_expr(z_subs, cfg.mode, cfg.vote_tau)
            loss = ad.vmean(sce_rows(z_ens, yb))
            reg_value = 0.0
            if penalized and cfg.num_models > 1:
                penalty = _penalty_expr(cfg, z_subs, grad_exprs, yb)
                reg_value = float(penalty.value)
                loss = ad.add(loss, ad.scale(cfg.reg_lambda, penalty))
            if not np.isfinite(loss.value):
                raise DivergenceError(
                    f"training loss became non-finite at epoch {epoch}, batch {batches}"
                )
            flat = [node for model_nodes in nodes for pair in model_nodes for node in pair]
            grads = ad.grad(loss, flat)
            i = 0
            for layers in params:
                for layer in layers:
                    layer[0] -= cfg.learning_rate * grads[i]
                    layer[1] -= cfg.learning_rate * grads[i + 1]
                    i += 2
            epoch_loss += float(loss.value)
            epoch_reg += reg_value
            batches += 1
        snapshot = _ensemble_from_params(params, cfg)
        log.append(
            TrainLogRow(
                epoch=epoch,
                loss=epoch_loss / batches,
                accuracy=_hard_accuracy(snapshot, data.x_train, data.y_train),
                regularizer_value=epoch_reg / batches,
            )
        )
    return TrainResult(ensemble=_ensemble_from_params(params, cfg), log=tuple(log))


def input_gradients(model: MLPClassifier, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Numeric d sce(z, y) / d x for a batch, via the layer-chain pullback."""
    h = np.asarray(x, dtype=np.float64)
    activations = []
    last = len(model.layers) - 1
    for i, (w, b) in enumerate(model.layers):
        pre = h @ w.T + b
        if i != last:
            activations.append((pre > 0).astype(np.float64))
            h = np.maximum(pre, 0.0)
        else:
            z = pre
    g = ad.softmax_values(z, 1.0) - np.eye(z.shape[1])[y]
    for (w, _), mask in zip(reversed(model.layers[1:]), reversed(activations)):
        g = (g @ w) * mask
    return g @ model.layers[0][0]


@dataclass(frozen=True)
class GradCosineStats:
    pairs: int
    mean: float | None
    min: float | None
    max: float | None

    @property
    def no_pairs(self) -> bool:
        return self.pairs == 0


def grad_cosine_stats(ens: Ensemble, x: np.ndarray, y: np.ndarray) -> GradCosineStats:
    """Pairwise cosine similarity of per-sub-model input gradients.

    A single-model ensemble has no pairs; the marker is explicit rather
    than a NaN so reports can say so.
    """
    if ens.num_models < 2:
        return GradCosineStats(pairs=0, mean=None, min=None, max=None)
    grads = [input_gradients(m, x, y) for m in ens.models]
    values = []
    for a, b in combinations(range(ens.num_models), 2):
        dots = np.sum(grads[a] * grads[b], axis=1)
        na = np.linalg.norm(grads[a], axis=1) + NORM_SMOOTHING
        nb = np.linalg.norm(grads[b], axis=1) + NORM_SMOOTHING
        values.append(dots / (na * nb))
    values = np.concatenate(values)
    return GradCosineStats(
        pairs=len(list(combinations(range(ens.num_models), 2))),
        mean=float(values.mean()),
        min=float(values.min()),
        max=float(values.max()),
    )

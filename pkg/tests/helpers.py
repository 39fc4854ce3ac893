"""Shared builders for test ensembles and logit fixtures."""

from __future__ import annotations

import numpy as np

from mora.models import Ensemble, MLPClassifier


def random_mlp(rng, d, k, hidden=(6,)):
    sizes = [d, *hidden, k]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        layers.append((rng.normal(0, 1.0, (fan_out, fan_in)), rng.normal(0, 0.5, fan_out)))
    return MLPClassifier(tuple(layers))


def random_ensemble(rng, d=2, k=2, m=3, hidden=(6,), mode="softmax", vote_tau=0.1):
    return Ensemble(tuple(random_mlp(rng, d, k, hidden) for _ in range(m)), mode, vote_tau)


def fixed_logit_model(w, b):
    """Single affine layer producing logits w @ x + b."""
    return MLPClassifier(((np.asarray(w, dtype=float), np.asarray(b, dtype=float)),))


def line_model():
    """1-D two-class model with logits (x, 1 - x); boundary at x = 0.5."""
    return fixed_logit_model([[1.0], [-1.0]], [0.0, 1.0])


def logsumexp_np(z):
    z = np.asarray(z, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))).squeeze(-1)


def sce_np(z, label):
    """Plain-numpy softmax cross-entropy, the reference for autodiff sce."""
    z = np.asarray(z, dtype=float)
    return float(logsumexp_np(z) - z[label])


def frozen_mora_value(ens, x0, ctx, weighting="adaptive", normalize=True):
    """Numeric evaluator of the reweighed loss with weights and margin
    divisors frozen at x0.

    Returns f(x) -> float. Since weights and divisors are constants of the
    gradient, the autodiff gradient of the live loss at x0 must match the
    finite-difference gradient of this frozen evaluator at x0.
    """
    from mora.objectives import dl_value, importance_weight

    label = ctx.attack_label
    z0_subs = ens.forward_subs(np.asarray(x0, dtype=float))
    z0_ens = ens.forward_ensemble(np.asarray(x0, dtype=float))
    if weighting == "adaptive":
        weights = [
            importance_weight(z, label, ctx.mode, ctx.attack_tau, ctx.num_models)
            for z in z0_subs
        ]
    elif weighting == "indicator":
        weights = [1.0 if dl_value(z, label) > 0 else 0.0 for z in z0_subs]
    else:
        weights = [1.0 / ctx.num_models] * len(z0_subs)
    acc0 = sum(w * z for w, z in zip(weights, z0_subs))
    d_sub = dl_value(np.asarray(acc0, dtype=float), label) if any(weights) else 0.0
    d_ens = dl_value(z0_ens, label)

    def f(x):
        z_subs = ens.forward_subs(np.asarray(x, dtype=float))
        z_ens = ens.forward_ensemble(np.asarray(x, dtype=float))
        acc = sum(w * z for w, z in zip(weights, z_subs))
        if not any(weights):
            acc = np.zeros_like(z_ens)
        if normalize:
            t_sub = acc / d_sub if d_sub > 0 else np.zeros_like(z_ens)
            t_ens = z_ens / d_ens if d_ens > 0 else np.zeros_like(z_ens)
        else:
            t_sub, t_ens = acc, z_ens
        blend = ctx.beta * t_sub + (1.0 - ctx.beta) * t_ens
        return sce_np(blend, label)

    # expose the frozen divisors so callers can reject draws whose
    # conditioning makes finite differencing of f meaningless
    f.d_sub = d_sub
    f.d_ens = d_ens
    return f

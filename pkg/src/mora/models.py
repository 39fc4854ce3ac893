"""ReLU MLP classifiers, ensemble forming, and hard decisions.

An ensemble combines M sub-models under one of three forming modes:

- ``logits``: mean of raw sub-model logits,
- ``softmax``: mean of per-model softmax probabilities (temperature 1),
- ``voting``: softened winner-take-all, the mean of low-temperature
  softmaxes; the differentiable surrogate for plurality voting.

Hard decisions implement the serving semantics: argmax of the forming
output for logits and softmax, plurality over per-model argmax votes for
voting. Ties resolve in the defender's favor when the true label is among
the tied classes, otherwise to the lowest class index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .errors import ConfigError, ContractViolation, IOFormatError

MODES = ("softmax", "voting", "logits")
MODEL_FORMAT = "mlp-ensemble"
SCHEMA_VERSION = 1
DEFAULT_VOTE_TAU = 0.1


@dataclass(frozen=True)
class MLPClassifier:
    """Fully connected ReLU network; no activation after the last layer."""

    layers: tuple[tuple[Array, Array], ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("an MLP needs at least one layer")
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ConfigError(f"layer {i} has inconsistent shapes {w.shape}, {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise ConfigError(f"layer {i} input {w.shape[1]} does not match previous {prev}")
            prev = w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def forward(self, x: Array) -> Array:
        """Logits for a single input (d,) or a batch (n, d)."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    def expr(self, x: Node) -> Node:
        """Differentiable logits for a single input node."""
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.affine(h, w, b)
            if i != last:
                h = ad.relu(h)
        return h


def _resolve_ties(scores: Array, true_label) -> Array:
    """Row-wise argmax with defender-favoring ties.

    If the true label attains the row maximum it wins, otherwise the lowest
    class index among the tied maxima does.
    """
    scores = np.atleast_2d(scores)
    n = scores.shape[0]
    out = np.argmax(scores, axis=1)
    if true_label is not None:
        labels = np.broadcast_to(np.asarray(true_label, dtype=np.intp), (n,))
        top = scores.max(axis=1)
        y_is_top = scores[np.arange(n), labels] == top
        out = np.where(y_is_top, labels, out)
    return out


def form_values(z_list: list[Array], mode: str, vote_tau: float) -> Array:
    """Forming output from per-model logits, each (k,) or (n, k)."""
    if mode == "logits":
        return np.mean(z_list, axis=0)
    if mode == "softmax":
        return np.mean([ad.softmax_values(z, 1.0) for z in z_list], axis=0)
    if mode == "voting":
        return np.mean([ad.softmax_values(z, vote_tau) for z in z_list], axis=0)
    raise ConfigError(f"unknown forming mode {mode!r}")


def form_expr(z_nodes: list[Node], mode: str, vote_tau: float) -> Node:
    """Differentiable forming output from per-model logit nodes."""
    if mode == "logits":
        nodes = z_nodes
    elif mode == "softmax":
        nodes = [ad.softmax_t(z, 1.0) for z in z_nodes]
    elif mode == "voting":
        nodes = [ad.softmax_t(z, vote_tau) for z in z_nodes]
    else:
        raise ConfigError(f"unknown forming mode {mode!r}")
    acc = nodes[0]
    for z in nodes[1:]:
        acc = ad.add(acc, z)
    return ad.div_const(acc, len(nodes))


def hard_decision_values(
    z_list: list[Array], mode: str, vote_tau: float, true_label=None
) -> Array:
    """Serving decision from per-model logits; see module docstring for ties."""
    z_list = [np.atleast_2d(z) for z in z_list]
    if mode == "voting":
        k = z_list[0].shape[1]
        votes = np.stack([np.argmax(z, axis=1) for z in z_list], axis=1)
        counts = np.apply_along_axis(np.bincount, 1, votes, minlength=k)
        return _resolve_ties(counts.astype(np.float64), true_label)
    return _resolve_ties(form_values(z_list, mode, vote_tau), true_label)


@dataclass(frozen=True)
class Ensemble:
    """A fixed collection of sub-models served under one forming mode."""

    models: tuple[MLPClassifier, ...]
    mode: str = "softmax"
    vote_tau: float = DEFAULT_VOTE_TAU

    def __post_init__(self):
        if not self.models:
            raise ConfigError("an ensemble needs at least one sub-model")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.vote_tau > 0:
            raise ConfigError(f"vote_tau must be positive, got {self.vote_tau}")
        d, k = self.models[0].input_dim, self.models[0].num_classes
        for i, m in enumerate(self.models):
            if m.input_dim != d or m.num_classes != k:
                raise ConfigError(f"sub-model {i} disagrees on input_dim or num_classes")

    @property
    def num_models(self) -> int:
        return len(self.models)

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.models[0].num_classes

    def with_mode(self, mode: str, vote_tau: float | None = None) -> "Ensemble":
        """Same weights served under a different forming mode."""
        return Ensemble(self.models, mode, self.vote_tau if vote_tau is None else vote_tau)

    def forward_subs(self, x: Array) -> list[Array]:
        return [m.forward(x) for m in self.models]

    def sub_exprs(self, x: Node) -> list[Node]:
        return [m.expr(x) for m in self.models]

    def forward_ensemble(self, x: Array) -> Array:
        return form_values(self.forward_subs(x), self.mode, self.vote_tau)

    def ensemble_expr(self, z_nodes: list[Node]) -> Node:
        return form_expr(z_nodes, self.mode, self.vote_tau)

    def hard_decision(self, x: Array, true_label=None) -> int:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ContractViolation("hard_decision expects a single input, use hard_decisions")
        return int(
            hard_decision_values(self.forward_subs(x), self.mode, self.vote_tau, true_label)[0]
        )

    def hard_decisions(self, x: Array, true_label=None) -> Array:
        return hard_decision_values(self.forward_subs(x), self.mode, self.vote_tau, true_label)


def save_ensemble(ens: Ensemble, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "input_dim": ens.input_dim,
        "num_classes": ens.num_classes,
        "num_models": ens.num_models,
        "mode": ens.mode,
        "vote_tau": ens.vote_tau,
        "models": [
            {"layers": [{"weights": w.tolist(), "bias": b.tolist()} for w, b in m.layers]}
            for m in ens.models
        ],
    }
    Path(path).write_text(json.dumps(doc))


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise IOFormatError(message)


def load_ensemble(path) -> Ensemble:
    """Load a versioned ensemble file, validating schema and shape chain."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IOFormatError(f"cannot read model file {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise IOFormatError(f"model file {path} is not valid JSON: {e}") from e
    _expect(isinstance(doc, dict), "model file must hold a JSON object")
    _expect(
        doc.get("format") == MODEL_FORMAT,
        f"bad magic string: expected {MODEL_FORMAT!r}, got {doc.get('format')!r}",
    )
    _expect(
        doc.get("schema_version") == SCHEMA_VERSION,
        f"unsupported schema_version {doc.get('schema_version')!r}",
    )
    for key in ("input_dim", "num_classes", "num_models", "mode", "vote_tau", "models"):
        _expect(key in doc, f"model file missing field {key!r}")
    _expect(doc["mode"] in MODES, f"unknown mode {doc['mode']!r}")
    _expect(
        isinstance(doc["vote_tau"], (int, float)) and doc["vote_tau"] > 0,
        f"vote_tau must be positive, got {doc['vote_tau']!r}",
    )
    _expect(
        isinstance(doc["models"], list) and len(doc["models"]) == doc["num_models"],
        f"num_models={doc['num_models']} but file holds {len(doc.get('models', []))} models",
    )
    models = []
    for mi, entry in enumerate(doc["models"]):
        _expect(
            isinstance(entry, dict) and isinstance(entry.get("layers"), list) and entry["layers"],
            f"model {mi} must hold a non-empty layer list",
        )
        layers = []
        for li, layer in enumerate(entry["layers"]):
            try:
                w = np.asarray(layer["weights"], dtype=np.float64)
                b = np.asarray(layer["bias"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as e:
                raise IOFormatError(f"model {mi} layer {li} is malformed: {e}") from e
            _expect(
                w.ndim == 2 and b.ndim == 1 and w.shape[0] == b.shape[0],
                f"model {mi} layer {li} has inconsistent shapes {w.shape}, {b.shape}",
            )
            _expect(
                np.all(np.isfinite(w)) and np.all(np.isfinite(b)),
                f"model {mi} layer {li} holds non-finite values",
            )
            layers.append((w, b))
        _expect(
            layers[0][0].shape[1] == doc["input_dim"],
            f"model {mi} expects input_dim {layers[0][0].shape[1]}, header says {doc['input_dim']}",
        )
        _expect(
            layers[-1][0].shape[0] == doc["num_classes"],
            f"model {mi} emits {layers[-1][0].shape[0]} classes, header says {doc['num_classes']}",
        )
        for li in range(1, len(layers)):
            _expect(
                layers[li][0].shape[1] == layers[li - 1][0].shape[0],
                f"model {mi} layer {li} does not chain with layer {li - 1}",
            )
        models.append(MLPClassifier(tuple(layers)))
    try:
        return Ensemble(tuple(models), doc["mode"], float(doc["vote_tau"]))
    except ConfigError as e:
        raise IOFormatError(str(e)) from e

"""Feed-forward softmax classifiers over a flat parameter vector.

Parameter layout, layer by layer: weight matrix (fan_out x fan_in, row-major)
followed by the bias vector. An empty `hidden_sizes` gives linear softmax
regression.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt
from scipy.special import log_softmax

from .errors import DataError, DimensionError
from .numkernel import ParamVec, Rng, as_param_vec

logger = logging.getLogger("Model")


# ----------------------------------------------------
# TYPES
# ----------------------------------------------------

class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_dim: PositiveInt = 2
    hidden_sizes: tuple[PositiveInt, ...] = ()
    num_classes: int = Field(2, ge=2)
    activation: Literal["relu"] = "relu"

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_sizes, self.num_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_shapes)


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int


@dataclass(frozen=True)
class Provenance:
    kind: Literal["batch", "fold", "client", "validation", "dataset"]
    index: Optional[int] = None

    def __str__(self) -> str:
        return self.kind if self.index is None else f"{self.kind}({self.index})"


@dataclass(frozen=True)
class Fragment:
    """A labeled slice of data: a batch, a fold, a client shard or the validation set."""

    id: str
    features: np.ndarray
    labels: np.ndarray
    provenance: Provenance = field(default_factory=lambda: Provenance("dataset"))

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise DataError(f"fragment {self.id}: features must be 2-D, got shape {features.shape}")
        if features.shape[0] == 0:
            raise DataError(f"fragment {self.id} is empty")
        if labels.shape[0] != features.shape[0]:
            raise DataError(
                f"fragment {self.id}: {features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_examples(cls, id: str, examples, provenance: Provenance | None = None) -> "Fragment":
        examples = list(examples)
        if not examples:
            raise DataError(f"fragment {id} is empty")
        features = np.stack([np.asarray(ex.x, dtype=np.float64) for ex in examples])
        labels = np.array([ex.y for ex in examples], dtype=np.int64)
        return cls(id, features, labels, provenance or Provenance("dataset"))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def examples(self) -> tuple[Example, ...]:
        return tuple(Example(x, int(y)) for x, y in zip(self.features, self.labels))

    def subset(self, indices, id: str, provenance: Provenance | None = None) -> "Fragment":
        idx = np.asarray(indices, dtype=np.int64)
        return Fragment(id, self.features[idx], self.labels[idx], provenance or self.provenance)

    def with_features(self, features: np.ndarray, id: str | None = None) -> "Fragment":
        return Fragment(id or self.id, features, self.labels, self.provenance)


def check_fragment(spec: ModelSpec, frag: Fragment) -> None:
    if frag.input_dim != spec.input_dim:
        raise DimensionError(
            f"fragment {frag.id} has {frag.input_dim} features, model expects {spec.input_dim}"
        )
    if frag.labels.min() < 0 or frag.labels.max() >= spec.num_classes:
        raise DataError(f"fragment {frag.id} has labels outside [0, {spec.num_classes})")


def check_theta(spec: ModelSpec, theta: ParamVec) -> None:
    if theta.shape != (spec.param_count,):
        raise DimensionError(f"theta has shape {theta.shape}, model has {spec.param_count} params")


# ----------------------------------------------------
# FRAGMENTING
# ----------------------------------------------------

def split_batches(frag: Fragment, num_batches: int) -> list[Fragment]:
    """Contiguous batches in index order."""
    if num_batches < 1 or num_batches > frag.n:
        raise DataError(f"cannot cut {frag.n} examples into {num_batches} batches")
    pieces = np.array_split(np.arange(frag.n), num_batches)
    return [
        frag.subset(idx, f"{frag.id}/batch{i}", Provenance("batch", i))
        for i, idx in enumerate(pieces)
    ]


def make_folds(frag: Fragment, k: int, rng: Rng) -> list[Fragment]:
    """One shuffle, then k near-equal folds."""
    if k < 1 or k > frag.n:
        raise DataError(f"cannot cut {frag.n} examples into {k} folds")
    order = rng.permutation(frag.n)
    pieces = np.array_split(order, k)
    return [
        frag.subset(np.sort(idx), f"{frag.id}/fold{i}", Provenance("fold", i))
        for i, idx in enumerate(pieces)
    ]


# ----------------------------------------------------
# FORWARD / BACKWARD
# ----------------------------------------------------

def init_params(spec: ModelSpec, rng: Rng) -> ParamVec:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for fan_in, fan_out in spec.layer_shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
    return as_param_vec(np.concatenate(chunks), copy=False)


def _unpack(spec: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        w = theta[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = theta[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray):
    """Logits plus the per-layer inputs and hidden pre-activations."""
    layers = _unpack(spec, theta)
    inputs, pre_acts = [], []
    a = x
    for i, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w.T + b
        if i < len(layers) - 1:
            pre_acts.append(z)
            a = np.maximum(z, 0.0)
        else:
            a = z
    return a, inputs, pre_acts


def predict_proba(spec: ModelSpec, theta: ParamVec, x: np.ndarray) -> np.ndarray:
    logits, _, _ = _forward(spec, theta, np.atleast_2d(x))
    return np.exp(log_softmax(logits, axis=1))


def _backprop(spec, theta, inputs, pre_acts, delta, per_sample: bool) -> np.ndarray:
    """Push output-layer deltas back through the network.

    With per_sample the result is (n, d), otherwise the summed (d,) gradient.
    """
    layers = _unpack(spec, theta)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a = inputs[i]
        if per_sample:
            gw = np.einsum("no,ni->noi", delta, a).reshape(delta.shape[0], -1)
            grads.append(np.concatenate([gw, delta], axis=1))
        else:
            grads.append(np.concatenate([(delta.T @ a).reshape(-1), delta.sum(axis=0)]))
        if i > 0:
            # relu'(0) = 0
            delta = (delta @ w) * (pre_acts[i - 1] > 0)
    grads.reverse()
    return np.concatenate(grads, axis=-1)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def loss_and_grad(spec: ModelSpec, theta: ParamVec, frag: Fragment) -> tuple[float, ParamVec]:
    """Mean cross-entropy over the fragment and its exact gradient."""
    check_theta(spec, theta)
    check_fragment(spec, frag)
    logits, inputs, pre_acts = _forward(spec, theta, frag.features)
    logp = log_softmax(logits, axis=1)
    n = frag.n
    loss = -float(logp[np.arange(n), frag.labels].mean())
    delta = (np.exp(logp) - _one_hot(frag.labels, spec.num_classes)) / n
    grad = _backprop(spec, theta, inputs, pre_acts, delta, per_sample=False)
    return loss, as_param_vec(grad, copy=False)


def per_sample_scores(spec: ModelSpec, theta: ParamVec, frag: Fragment) -> np.ndarray:
    """(n, d) matrix of grad_theta log p(y|x; theta), one row per example."""
    check_theta(spec, theta)
    check_fragment(spec, frag)
    logits, inputs, pre_acts = _forward(spec, theta, frag.features)
    delta = _one_hot(frag.labels, spec.num_classes) - np.exp(log_softmax(logits, axis=1))
    return _backprop(spec, theta, inputs, pre_acts, delta, per_sample=True)


def per_sample_score(spec: ModelSpec, theta: ParamVec, ex: Example) -> ParamVec:
    frag = Fragment.from_examples("single", [ex])
    return as_param_vec(per_sample_scores(spec, theta, frag)[0], copy=False)


def accuracy(spec: ModelSpec, theta: ParamVec, frag: Fragment) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    check_theta(spec, theta)
    check_fragment(spec, frag)
    logits, _, _ = _forward(spec, theta, frag.features)
    return float(np.mean(np.argmax(logits, axis=1) == frag.labels))

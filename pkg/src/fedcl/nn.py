"""Dense ReLU network with softmax cross-entropy, written directly against numpy.

Parameters live in one flat float64 vector (``ParamVector``) so the federated
code can average, diff and penalize them without knowing the layer structure.
Weights are stored as ``(fan_in, fan_out)`` matrices so a layer is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .errors import DomainError, NumericError, ShapeError

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        expected = sum(prod(shape) for _, shape in layout)
        if values.size != expected:
            raise ShapeError(f"vector has {values.size} elements, layout implies {expected}")
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector contains NaN or Inf")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def zeros_like(self) -> ParamVector:
        return ParamVector(np.zeros_like(self.values), self.layout)

    def check_congruent(self, other: ParamVector) -> None:
        if self.layout != other.layout:
            raise ShapeError("parameter layouts differ")

    def arrays(self) -> list[np.ndarray]:
        """Read-only views of each layout segment, reshaped."""
        out, offset = [], 0
        for _, shape in self.layout:
            size = prod(shape)
            out.append(self.values[offset:offset + size].reshape(shape))
            offset += size
        return out


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    output_dim: int = 10
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise DomainError("layer widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    @property
    def layout(self) -> Layout:
        segs = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            segs.append((f"W{i}", (fan_in, fan_out)))
            segs.append((f"b{i}", (fan_out,)))
        return tuple(segs)

    @property
    def num_params(self) -> int:
        return sum(prod(shape) for _, shape in self.layout)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {inputs.shape}")
        if inputs.shape[0] != labels.size:
            raise ShapeError(f"{inputs.shape[0]} input rows but {labels.size} labels")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    parts = []
    for name, shape in spec.layout:
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-limit, limit, size=shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return ParamVector(np.concatenate(parts), spec.layout)


def _check(spec: ModelSpec, params: ParamVector, batch: Batch) -> None:
    if params.layout != spec.layout:
        raise ShapeError("parameter layout does not match model spec")
    if batch.inputs.shape[1] != spec.input_dim:
        raise ShapeError(f"batch has {batch.inputs.shape[1]} features, model expects {spec.input_dim}")
    if not np.all(np.isfinite(batch.inputs)):
        raise NumericError("batch inputs contain NaN or Inf")
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= spec.output_dim):
        raise ShapeError(f"labels must lie in [0, {spec.output_dim})")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(spec, params, batch, training, rng):
    """Run the network, keeping what backprop needs.

    Returns (logits, acts, masks) where ``acts[i]`` is the input to layer i and
    ``masks[i]`` is the combined ReLU/dropout multiplier applied after layer i
    (one per hidden layer).
    """
    arrays = params.arrays()
    n_layers = len(arrays) // 2
    use_dropout = training and spec.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout at training time needs an rng")
    a = batch.inputs
    acts, masks = [], []
    for i in range(n_layers):
        W, b = arrays[2 * i], arrays[2 * i + 1]
        acts.append(a)
        z = a @ W + b
        if i == n_layers - 1:
            return z, acts, masks
        mask = (z > 0).astype(np.float64)
        if use_dropout:
            keep = rng.random(z.shape) >= spec.dropout
            mask *= keep / (1.0 - spec.dropout)
        masks.append(mask)
        a = z * mask


def _backprop(params, acts, masks, dlogits):
    """(input activation, output delta) for every layer, in layer order."""
    arrays = params.arrays()
    n_layers = len(acts)
    pairs = [None] * n_layers
    delta = dlogits
    for i in range(n_layers - 1, -1, -1):
        pairs[i] = (acts[i], delta)
        if i:
            delta = (delta @ arrays[2 * i].T) * masks[i - 1]
    return pairs


def forward(spec: ModelSpec, params: ParamVector, batch: Batch, training: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class-probability matrix, one row per example."""
    _check(spec, params, batch)
    logits, _, _ = _forward_cache(spec, params, batch, training, rng)
    return _softmax(logits)


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    _check(spec, params, batch)
    n = len(batch)
    if n == 0:
        raise DomainError("empty batch")
    logits, acts, masks = _forward_cache(spec, params, batch, training, rng)
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    # clamp guards the -0.0/1e-17 residue when the true logit dominates
    loss = float(max(np.mean(log_norm - shifted[rows, batch.labels]), 0.0))
    dlogits = _softmax(logits)
    dlogits[rows, batch.labels] -= 1.0
    dlogits /= n
    grads = []
    for a, delta in _backprop(params, acts, masks, dlogits):
        grads.append((a.T @ delta).ravel())
        grads.append(delta.sum(axis=0))
    return loss, params.with_values(np.concatenate(grads))


def per_example_grads(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """Gradient of each example's own loss, shape ``(len(batch), num_params)``.

    Evaluated without dropout.
    """
    _check(spec, params, batch)
    n = len(batch)
    logits, acts, masks = _forward_cache(spec, params, batch, False, None)
    dlogits = _softmax(logits)
    dlogits[np.arange(n), batch.labels] -= 1.0
    cols = []
    for a, delta in _backprop(params, acts, masks, dlogits):
        cols.append(np.einsum("ni,nj->nij", a, delta).reshape(n, -1))
        cols.append(delta)
    return np.concatenate(cols, axis=1)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    params.check_congruent(grad)
    return params.with_values(params.values - lr * grad.values)


def predict(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(forward(spec, params, batch), axis=1)


def accuracy(spec: ModelSpec, params: ParamVector, examples: Batch) -> float:
    if len(examples) == 0:
        raise DomainError("accuracy of an empty batch is undefined")
    return float(np.mean(predict(spec, params, examples) == examples.labels))

"""Shared-encoder / multi-head MLP with exact forward and backward passes.

Inputs are either ``(batch, d)`` feature rows or ``(batch, n, d)`` sequences.
Each encoder layer is applied position-wise and the encoder output is mean
pooled over the sequence axis (a 2-D batch is a length-1 sequence, so pooling
is the identity). Every task head is a single affine map on the pooled vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "linear")
LOSS_KINDS = ("cross_entropy", "squared_error")


class ShapeError(ValueError):
    """Array dimensions do not chain through the network."""


class ContractError(ValueError):
    """A cache or gradient does not belong to the parameters it is used with."""


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """Encoder layers plus one head per task; head 0 is the primary task."""

    encoder: tuple[Layer, ...]
    heads: tuple[Layer, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.heads:
            raise ShapeError("at least one (primary) head is required")
        for i, layer in enumerate(self.encoder + self.heads):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} does not match weight {layer.weight.shape}")
        for i in range(1, len(self.encoder)):
            if self.encoder[i].in_dim != self.encoder[i - 1].out_dim:
                raise ShapeError(
                    f"encoder layer {i} expects input dim {self.encoder[i].in_dim}, "
                    f"previous layer outputs {self.encoder[i - 1].out_dim}"
                )
        rep = self.representation_dim
        for k, head in enumerate(self.heads):
            if head.in_dim != rep:
                raise ShapeError(f"head {k} expects input dim {head.in_dim}, encoder outputs {rep}")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_dim if self.encoder else self.heads[0].in_dim

    @property
    def representation_dim(self) -> int:
        return self.encoder[-1].out_dim if self.encoder else self.heads[0].in_dim

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def output_dims(self) -> tuple[int, ...]:
        return tuple(h.out_dim for h in self.heads)

    def n_encoder_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.encoder)

    def flat(self) -> np.ndarray:
        """All parameters as one vector (encoder first, then heads in order)."""
        parts = [a.ravel() for layer in self.encoder + self.heads for a in (layer.weight, layer.bias)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_flat(self, vector: np.ndarray) -> "ModelParams":
        vector = np.asarray(vector, dtype=np.float64)
        layers = []
        pos = 0
        for layer in self.encoder + self.heads:
            w = vector[pos : pos + layer.weight.size].reshape(layer.weight.shape)
            pos += layer.weight.size
            b = vector[pos : pos + layer.bias.size].copy()
            pos += layer.bias.size
            layers.append(Layer(w.copy(), b))
        if pos != vector.size:
            raise ShapeError(f"flat vector has {vector.size} entries, model has {pos}")
        n_enc = len(self.encoder)
        return ModelParams(tuple(layers[:n_enc]), tuple(layers[n_enc:]), self.activation)


def init_params(
    input_dim: int,
    hidden_dims,
    output_dims,
    seed: int = 0,
    activation: str = "tanh",
    scale: float | None = None,
) -> ModelParams:
    """Seeded Glorot-style initialisation.

    ``hidden_dims`` lists encoder layer widths (may be empty for a head-only
    model); ``output_dims`` lists one output size per task, primary first.
    """
    rng = np.random.default_rng(seed)
    dims = [int(input_dim), *[int(h) for h in hidden_dims]]

    def make(n_in, n_out):
        std = scale if scale is not None else np.sqrt(2.0 / (n_in + n_out))
        return Layer(rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out))

    encoder = tuple(make(a, b) for a, b in zip(dims[:-1], dims[1:]))
    heads = tuple(make(dims[-1], int(c)) for c in output_dims)
    return ModelParams(encoder, heads, activation)


@dataclass
class ForwardCache:
    inputs: np.ndarray  # (B, n, d)
    pre: list[np.ndarray]  # per encoder layer, (B, n, out)
    post: list[np.ndarray]  # per encoder layer, (B, n, out)
    pooled: np.ndarray  # (B, rep)
    outputs: list[np.ndarray]  # per head, (B, C_k)
    layer_dims: tuple[tuple[int, int], ...] = field(default=())

    @property
    def encoder_output(self) -> np.ndarray:
        return self.post[-1] if self.post else self.inputs

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def _as_sequence(batch_inputs) -> np.ndarray:
    x = np.asarray(batch_inputs, dtype=np.float64)
    if x.ndim == 2:
        return x[:, None, :]
    if x.ndim == 3:
        return x
    raise ShapeError(f"inputs must be 2-D (batch, d) or 3-D (batch, n, d), got shape {x.shape}")


def _layer_dims(params: ModelParams) -> tuple[tuple[int, int], ...]:
    return tuple(layer.weight.shape for layer in params.encoder + params.heads)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else z


def forward(params: ModelParams, batch_inputs, heads=None) -> ForwardCache:
    """Run the encoder, pool, and evaluate the requested heads (default: all)."""
    x = _as_sequence(batch_inputs)
    if x.shape[-1] != params.input_dim:
        where = "encoder layer 0" if params.encoder else "head 0"
        raise ShapeError(f"{where} expects input dim {params.input_dim}, got {x.shape[-1]}")
    pre, post = [], []
    h = x
    for layer in params.encoder:
        z = h @ layer.weight.T + layer.bias
        h = _activate(z, params.activation)
        pre.append(z)
        post.append(h)
    pooled = h.mean(axis=1)
    wanted = range(params.n_tasks) if heads is None else heads
    outputs = [None] * params.n_tasks
    for k in wanted:
        head = params.heads[k]
        outputs[k] = pooled @ head.weight.T + head.bias
    return ForwardCache(x, pre, post, pooled, outputs, _layer_dims(params))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(targets, n_classes: int, batch: int) -> np.ndarray:
    labels = np.asarray(targets)
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} class labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("class labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes}): min {labels.min()}, max {labels.max()}")
    return labels


def _check_vectors(targets, out_dim: int, batch: int) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1 and out_dim == 1:
        y = y[:, None]
    if y.shape != (batch, out_dim):
        raise ValueError(f"expected targets of shape {(batch, out_dim)}, got {y.shape}")
    return y


def _head_output(cache: ForwardCache, task_index: int) -> np.ndarray:
    if not 0 <= task_index < len(cache.outputs):
        raise IndexError(f"task index {task_index} out of range [0, {len(cache.outputs)})")
    out = cache.outputs[task_index]
    if out is None:
        raise ContractError(f"head {task_index} was not evaluated in this forward pass")
    return out


def task_loss(cache: ForwardCache, task_index: int, targets, kind: str) -> float:
    """Mean cross-entropy (softmax over head outputs) or mean squared error."""
    out = _head_output(cache, task_index)
    batch = out.shape[0]
    if batch == 0:
        return 0.0
    if kind == "cross_entropy":
        labels = _check_labels(targets, out.shape[1], batch)
        shifted = out - out.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        nll = log_z - shifted[np.arange(batch), labels]
        return float(max(nll.mean(), 0.0))
    if kind == "squared_error":
        y = _check_vectors(targets, out.shape[1], batch)
        return float(np.mean((out - y) ** 2))
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


@dataclass
class GradientSet:
    encoder: list[Layer]
    heads: list[Layer]
    task_index: int

    def encoder_flat(self) -> np.ndarray:
        parts = [a.ravel() for layer in self.encoder for a in (layer.weight, layer.bias)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def encoder_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(l.weight**2) + np.sum(l.bias**2) for l in self.encoder)))

    def flat(self) -> np.ndarray:
        parts = [a.ravel() for layer in self.encoder + self.heads for a in (layer.weight, layer.bias)]
        return np.concatenate(parts) if parts else np.zeros(0)


def _zeros_like(layer: Layer) -> Layer:
    return Layer(np.zeros_like(layer.weight), np.zeros_like(layer.bias))


def backward(params: ModelParams, cache: ForwardCache, task_index: int, targets, kind: str) -> GradientSet:
    """Exact gradient of ``task_loss`` for one task with respect to every parameter."""
    if cache.layer_dims != _layer_dims(params):
        raise ContractError("forward cache was produced by parameters of a different shape")
    out = _head_output(cache, task_index)
    batch = out.shape[0]
    head_grads = [_zeros_like(h) for h in params.heads]
    if batch == 0:
        return GradientSet([_zeros_like(l) for l in params.encoder], head_grads, task_index)

    if kind == "cross_entropy":
        labels = _check_labels(targets, out.shape[1], batch)
        d_out = _softmax(out)
        d_out[np.arange(batch), labels] -= 1.0
        d_out /= batch
    elif kind == "squared_error":
        y = _check_vectors(targets, out.shape[1], batch)
        d_out = 2.0 * (out - y) / (batch * out.shape[1])
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")

    head = params.heads[task_index]
    head_grads[task_index] = Layer(d_out.T @ cache.pooled, d_out.sum(axis=0))

    seq_len = cache.inputs.shape[1]
    # mean pooling spreads the pooled gradient evenly over positions
    d_h = np.repeat((d_out @ head.weight)[:, None, :] / seq_len, seq_len, axis=1)
    enc_grads = [None] * len(params.encoder)
    for i in range(len(params.encoder) - 1, -1, -1):
        layer = params.encoder[i]
        if params.activation == "tanh":
            d_z = d_h * (1.0 - cache.post[i] ** 2)
        else:
            d_z = d_h
        below = cache.post[i - 1] if i > 0 else cache.inputs
        d_z2 = d_z.reshape(-1, d_z.shape[-1])
        enc_grads[i] = Layer(d_z2.T @ below.reshape(-1, below.shape[-1]), d_z2.sum(axis=0))
        if i > 0:
            d_h = d_z @ layer.weight
    return GradientSet(enc_grads, head_grads, task_index)


def flops_breakdown(params: ModelParams, batch: int, seq_len: int = 1) -> dict:
    """FLOP counts per training step, split into shared and per-task parts.

    One multiply-accumulate is 2 FLOPs and a backward pass costs twice its
    forward pass. Bias additions are not counted.
    """
    enc_macs = sum(layer.weight.size for layer in params.encoder) * seq_len * batch
    head_macs = [h.weight.size * batch for h in params.heads]
    return {
        "encoder_forward": 2 * enc_macs,
        "encoder_backward": 2 * 2 * enc_macs,
        "head_forward_backward": [2 * 3 * m for m in head_macs],
    }


def flops_per_task_step(params: ModelParams, batch: int, task_index: int, seq_len: int = 1) -> int:
    """FLOPs of one single-task step: encoder and one head, forward plus backward."""
    if not 0 <= task_index < params.n_tasks:
        raise IndexError(f"task index {task_index} out of range [0, {params.n_tasks})")
    b = flops_breakdown(params, batch, seq_len)
    return b["encoder_forward"] + b["encoder_backward"] + b["head_forward_backward"][task_index]

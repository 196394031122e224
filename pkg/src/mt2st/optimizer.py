"""Gradient combination, the plain gradient-descent update, and the alignment diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernel import ContractError, GradientSet, Layer, ModelParams


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    total_steps: int = 1000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EffectiveGradient:
    encoder: list[Layer]
    heads: list[Layer]

    def encoder_flat(self) -> np.ndarray:
        parts = [a.ravel() for layer in self.encoder for a in (layer.weight, layer.bias)]
        return np.concatenate(parts) if parts else np.zeros(0)


def _same_shapes(a: Sequence[Layer], b: Sequence[Layer]) -> bool:
    return len(a) == len(b) and all(
        x.weight.shape == y.weight.shape and x.bias.shape == y.bias.shape for x, y in zip(a, b)
    )


def combine(primary: GradientSet, aux: Sequence[GradientSet], gammas) -> EffectiveGradient:
    """Primary gradient plus the gamma-weighted auxiliary gradients.

    Terms whose weight is exactly zero are skipped, so an all-zero weight
    vector returns the primary gradient bit for bit.
    """
    gammas = np.asarray(gammas, dtype=np.float64)
    if len(aux) != gammas.size:
        raise ContractError(f"{len(aux)} auxiliary gradients but {gammas.size} weights")
    for g in aux:
        if not (_same_shapes(g.encoder, primary.encoder) and _same_shapes(g.heads, primary.heads)):
            raise ContractError(f"gradient for task {g.task_index} does not match the primary gradient's shapes")

    enc_w = [l.weight.copy() for l in primary.encoder]
    enc_b = [l.bias.copy() for l in primary.encoder]
    heads = [Layer(l.weight.copy(), l.bias.copy()) for l in primary.heads]
    for gamma, g in zip(gammas, aux):
        if gamma == 0.0:
            continue
        for i, layer in enumerate(g.encoder):
            enc_w[i] += gamma * layer.weight
            enc_b[i] += gamma * layer.bias
        k = g.task_index
        heads[k] = Layer(heads[k].weight + gamma * g.heads[k].weight, heads[k].bias + gamma * g.heads[k].bias)
    return EffectiveGradient([Layer(w, b) for w, b in zip(enc_w, enc_b)], heads)


def sgd_step(params: ModelParams, grad: EffectiveGradient, lr: float) -> ModelParams:
    """Return ``params - lr * grad`` as new parameters."""
    if not (_same_shapes(grad.encoder, params.encoder) and _same_shapes(grad.heads, params.heads)):
        raise ContractError("gradient shapes do not match parameters")
    encoder = tuple(
        Layer(p.weight - lr * g.weight, p.bias - lr * g.bias) for p, g in zip(params.encoder, grad.encoder)
    )
    heads = tuple(Layer(p.weight - lr * g.weight, p.bias - lr * g.bias) for p, g in zip(params.heads, grad.heads))
    return ModelParams(encoder, heads, params.activation)


def pl_alignment(primary: GradientSet, eff: EffectiveGradient) -> float:
    """Inner product of primary and effective gradients over shared encoder parameters."""
    if not _same_shapes(primary.encoder, eff.encoder):
        raise ContractError("effective gradient does not match the primary gradient's encoder shapes")
    return float(
        sum(np.sum(p.weight * e.weight) + np.sum(p.bias * e.bias) for p, e in zip(primary.encoder, eff.encoder))
    )

"""Linear classification head with cross-entropy and the two weight
regularizers used when fine-tuning: a Max-norm ball enforced by projection
and a standard L2 weight-decay penalty. The bias is excluded from both."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Parameter, ShapeError, Tensor

__all__ = [
    "ClassifierWeights",
    "RegConfig",
    "logits_and_ce",
    "maxnorm_rows",
    "maxnorm_project",
    "weight_decay_term",
]


@dataclass(frozen=True)
class RegConfig:
    delta: float = 0.3  # Max-norm ball radius
    lam: float = 0.1  # weight-decay coefficient

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


class ClassifierWeights:
    """One weight row and one bias entry per class."""

    def __init__(self, weight: Parameter, bias: Parameter):
        if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
            raise ShapeError(
                f"weight {weight.shape} and bias {bias.shape} must be CxD and C"
            )
        self.weight = weight
        self.bias = bias

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator,
             prefix: str = "classifier") -> "ClassifierWeights":
        w = Parameter.randn((num_classes, dim), rng, np.sqrt(1.0 / dim), name=f"{prefix}.weight")
        b = Parameter(np.zeros(num_classes), name=f"{prefix}.bias")
        return cls(w, b)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def logits_and_ce(h: Tensor, weights: ClassifierWeights, label):
    """Logits ``W h + b`` and the log-sum-exp-stabilized cross-entropy.

    Accepts a single length-D embedding with an integer label or a B x D
    matrix with a label array; the loss is averaged over the batch.
    """
    if h.shape[-1] != weights.dim:
        raise ShapeError(f"embedding dim {h.shape[-1]} vs classifier dim {weights.dim}")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= weights.num_classes:
        raise ValueError(
            f"label out of range [0, {weights.num_classes}): {label}"
        )
    logits = h @ weights.weight.T + weights.bias
    log_probs = logits - logits.log_sum_exp(axis=-1, keepdims=True)
    if h.ndim == 1:
        onehot = np.zeros(weights.num_classes)
        onehot[labels[0]] = 1.0
        loss = -(log_probs * Tensor(onehot)).sum()
    else:
        if len(labels) != h.shape[0]:
            raise ShapeError(f"{h.shape[0]} embeddings but {len(labels)} labels")
        onehot = np.zeros((len(labels), weights.num_classes))
        onehot[np.arange(len(labels)), labels] = 1.0
        loss = -(log_probs * Tensor(onehot)).sum(axis=1).mean()
    return logits, loss


def maxnorm_rows(matrix: np.ndarray, delta: float) -> np.ndarray:
    """Each row rescaled by min(1, delta / ||row||): the exact Euclidean
    projection of each row onto the delta-ball."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    # rows already on the ball up to rounding stay untouched, so projecting
    # twice is bit-identical to projecting once
    inside = norms <= delta * (1.0 + 1e-12)
    scale = np.where(
        inside, 1.0, np.divide(delta, norms, out=np.ones_like(norms), where=norms > 0)
    )
    return matrix * scale


def maxnorm_project(weights: ClassifierWeights, delta: float) -> ClassifierWeights:
    """Project every class row onto the delta-ball in place; bias untouched."""
    weights.weight.data = maxnorm_rows(weights.weight.data, delta)
    return weights


def weight_decay_term(weights: ClassifierWeights, lam: float) -> Tensor:
    """lam * sum of squared row norms; its gradient is 2 * lam * W."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    return (weights.weight * weights.weight).sum() * lam

"""Balanced supervised contrastive learning with category centers.

Every anchor contrasts against both views of the whole batch plus one
learnable center per class. Same-label instances are positives weighted by
the contrast weight; the anchor's own center is a guaranteed positive with
weight 1, which keeps tail classes (which rarely see same-label batchmates)
contributing to the loss on equal footing with head classes.

Instance similarities use the MLP-projected embeddings; center similarities
use the raw embedding, identity-projected onto the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Parameter, Tensor, concat
from .encoder import _l2_normalize

__all__ = [
    "CategoryCenters",
    "ContrastConfig",
    "ViewBatch",
    "build_positive_sets",
    "bscl_loss",
    "expected_positive_count",
    "optimal_probabilities",
]

_EXCLUDE = -1e30  # additive mask; exp underflows to exactly 0


class CategoryCenters:
    """One trainable unit-norm row per class."""

    def __init__(self, matrix: Parameter):
        self.matrix = matrix

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator,
             name: str = "centers") -> "CategoryCenters":
        m = rng.normal(size=(num_classes, dim))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        return cls(Parameter(m, name=name))

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def renormalize(self) -> None:
        """Project rows back onto the unit sphere (call after each step)."""
        norms = np.linalg.norm(self.matrix.data, axis=1, keepdims=True)
        np.divide(self.matrix.data, norms, out=self.matrix.data, where=norms > 0)

    def parameters(self) -> list[Parameter]:
        return [self.matrix]


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.2
    contrast_weight: float = 0.05

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        # 0 is allowed as the degenerate center-only limit
        if not 0 <= self.contrast_weight <= 1:
            raise ValueError("contrast_weight must be in [0, 1]")


@dataclass
class ViewBatch:
    """Row-aligned projections of a two-view batch.

    ``z_v1``/``z_v2`` are MLP-projected unit rows; ``h_raw`` is the
    unprojected first-view embedding used against the centers.
    """

    z_v1: Tensor
    z_v2: Tensor
    h_raw: Tensor
    labels: np.ndarray

    def __post_init__(self):
        b = self.z_v1.shape[0]
        if not (self.z_v2.shape[0] == b == self.h_raw.shape[0] == len(self.labels)):
            raise ValueError("views, raw embeddings, and labels must align by row")

    @property
    def batch_size(self) -> int:
        return self.z_v1.shape[0]


def build_positive_sets(i: int, batch: ViewBatch):
    """Candidate and positive key ids for anchor row ``i``.

    Key ids 0..B-1 are first-view rows, B..2B-1 second-view rows. Candidates
    are everything except the anchor's own first-view row; positives are the
    same-label candidates (always including the anchor's own second view).
    """
    b = batch.batch_size
    if not 0 <= i < b:
        raise ValueError(f"anchor index {i} outside batch of {b}")
    candidates = [k for k in range(2 * b) if k != i]
    positives = [k for k in candidates if batch.labels[k % b] == batch.labels[i]]
    return candidates, positives


def bscl_loss(batch: ViewBatch, centers: CategoryCenters, cfg: ContrastConfig) -> Tensor:
    """Mean per-anchor contrastive loss with category centers in both the
    positive set (weight 1) and the softmax denominator."""
    b = batch.batch_size
    labels = np.asarray(batch.labels, dtype=np.int64)
    if labels.max() >= centers.num_classes or labels.min() < 0:
        raise RuntimeError(
            f"labels up to {labels.max()} have no center row (centers cover "
            f"{centers.num_classes} classes)"
        )
    inv_t = 1.0 / cfg.temperature

    keys = concat([batch.z_v1, batch.z_v2], axis=0)  # 2B x D
    sim_inst = (batch.z_v1 @ keys.T) * inv_t  # B x 2B
    anchor_id = _l2_normalize(batch.h_raw)
    sim_cent = (anchor_id @ centers.matrix.T) * inv_t  # B x C

    # exclude the anchor's own first-view key from candidates
    mask = np.zeros((b, 2 * b))
    mask[np.arange(b), np.arange(b)] = _EXCLUDE
    sim_inst_masked = sim_inst + Tensor(mask)

    lse = concat([sim_inst_masked, sim_cent], axis=1).log_sum_exp(axis=1)  # (B,)

    same = labels[:, None] == np.concatenate([labels, labels])[None, :]
    pos_mask = same.astype(np.float64)
    pos_mask[np.arange(b), np.arange(b)] = 0.0
    pos_counts = pos_mask.sum(axis=1)

    pos_sim = (sim_inst * Tensor(pos_mask)).sum(axis=1)  # (B,)
    onehot = np.zeros((b, centers.num_classes))
    onehot[np.arange(b), labels] = 1.0
    cent_sim = (sim_cent * Tensor(onehot)).sum(axis=1)  # (B,)

    per_anchor = cfg.contrast_weight * (Tensor(pos_counts) * lse - pos_sim) + (lse - cent_sim)
    return per_anchor.mean()


def expected_positive_count(batch_size: int, class_freq: float) -> float:
    """Expected positives for an anchor of a class with frequency pi:
    (2 * batch_size - 1) * pi."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 0.0 <= class_freq <= 1.0:
        raise ValueError("class_freq must be in [0, 1]")
    return (2 * batch_size - 1) * class_freq


def optimal_probabilities(alpha: float, count: float):
    """Loss-minimizing softmax mass for (true positive pair, own center).

    At the optimum a positive pair carries alpha / (1 + alpha * K) and the
    center 1 / (1 + alpha * K), where K is the expected positive count. As
    alpha shrinks, the head-to-tail gap between center optima closes.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if count < 0:
        raise ValueError("count must be non-negative")
    denom = 1.0 + alpha * count
    return alpha / denom, 1.0 / denom

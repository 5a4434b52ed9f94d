"""Metrics, shot-split diagnostics, label-distribution reports, and
embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .diffcore import no_grad
from .encoder import embed_graphs
from .graphdata import Dataset
from .trainer import ModelState, predict_labels

__all__ = [
    "Metrics",
    "evaluate",
    "shot_split",
    "label_distribution_report",
    "kl_from_uniform",
    "export_embeddings",
]


@dataclass(frozen=True)
class Metrics:
    overall_acc: float
    per_class_acc: tuple[float, ...]
    many_acc: float | None
    med_acc: float | None
    few_acc: float | None
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "per_class_acc": list(self.per_class_acc),
            "many_acc": self.many_acc,
            "med_acc": self.med_acc,
            "few_acc": self.few_acc,
        }


def shot_split(
    class_counts, many_threshold: int = 20, few_threshold: int = 5
) -> list[str]:
    """Assign each class to many/med/few by its training-sample count.

    Defaults: many-shot needs at least 20 training samples, few-shot at most
    5, med-shot in between. Thresholds are configurable knobs.
    """
    counts = np.asarray(class_counts)
    if counts.min() <= 0:
        raise ValueError("class counts must be positive")
    groups = []
    for n in counts:
        if n >= many_threshold:
            groups.append("many")
        elif n <= few_threshold:
            groups.append("few")
        else:
            groups.append("med")
    return groups


def evaluate(
    model: ModelState,
    test: Dataset,
    train_class_counts=None,
    many_threshold: int = 20,
    few_threshold: int = 5,
) -> Metrics:
    """Argmax-of-logits accuracy with per-class and shot-group breakdowns.

    Shot groups need the training class counts; without them the group
    accuracies are None.
    """
    if len(test) == 0:
        raise ValueError("test set is empty")
    num_classes = model.classifier.num_classes
    preds = predict_labels(model, test)
    labels = test.labels()
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    row_totals = confusion.sum(axis=1)
    per_class = np.full(num_classes, np.nan)
    present = row_totals > 0
    per_class[present] = confusion.diagonal()[present] / row_totals[present]
    overall = float(confusion.diagonal().sum() / confusion.sum())

    many = med = few = None
    if train_class_counts is not None:
        groups = shot_split(train_class_counts, many_threshold, few_threshold)
        if len(groups) < num_classes:
            raise ValueError("train class counts do not cover the model's classes")
        for name in ("many", "med", "few"):
            member_acc = [
                per_class[c]
                for c in range(num_classes)
                if groups[c] == name and present[c]
            ]
            value = float(np.mean(member_acc)) if member_acc else None
            if name == "many":
                many = value
            elif name == "med":
                med = value
            else:
                few = value

    return Metrics(
        overall_acc=overall,
        per_class_acc=tuple(float(a) for a in per_class),
        many_acc=many,
        med_acc=med,
        few_acc=few,
        confusion=confusion,
    )


def kl_from_uniform(counts) -> float:
    """KL(empirical label distribution || uniform); zero only when balanced."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("need a nonempty histogram")
    p = counts / total
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * len(counts))))


def label_distribution_report(train: Dataset, retrieval_results) -> dict:
    """Histograms of the train labels before and after retrieval augmentation.

    ``retrieval_results`` holds, per training graph, the retrieved corpus
    indices (lists or RetrievalResult objects). The augmented histogram adds
    the labels of everything retrieved; the balanced reference is uniform
    with the original total.
    """
    if len(retrieval_results) != len(train):
        raise ValueError("retrieval results must cover the training set")
    num_classes = train.num_classes
    labels = train.labels()
    original = np.bincount(labels, minlength=num_classes).astype(np.int64)
    augmented = original.copy()
    for res in retrieval_results:
        neighbors = getattr(res, "neighbor_indices", res)
        for j in neighbors:
            augmented[train[int(j)].label] += 1
    balanced = np.full(num_classes, original.sum() / num_classes)
    return {
        "original": original.tolist(),
        "augmented": augmented.tolist(),
        "balanced": balanced.tolist(),
        "kl_original": kl_from_uniform(original),
        "kl_augmented": kl_from_uniform(augmented),
        "kl_balanced": kl_from_uniform(balanced),
    }


def write_label_dist_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "original", "augmented", "balanced"])
        for c in range(len(report["original"])):
            writer.writerow(
                [c, report["original"][c], report["augmented"][c], report["balanced"][c]]
            )


def write_per_class_csv(metrics: Metrics, path, train_class_counts=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "train_count", "accuracy"])
        counts = train_class_counts if train_class_counts is not None else []
        for c, acc in enumerate(metrics.per_class_acc):
            count = int(counts[c]) if c < len(counts) else ""
            writer.writerow([c, count, repr(acc)])


def write_metrics_json(metrics: Metrics, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def export_embeddings(model: ModelState, dataset: Dataset, path) -> None:
    """CSV of graph id, label, and the encoder embedding; byte-stable for a
    fixed model and dataset."""
    with no_grad():
        emb = embed_graphs(dataset.graphs, model.encoder).data
    dim = emb.shape[1]
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    with fh:
        fh.write("graph_id,label," + ",".join(f"e{k}" for k in range(dim)) + "\n")
        for i, g in enumerate(dataset.graphs):
            values = ",".join(repr(float(v)) for v in emb[i])
            fh.write(f"{i},{g.label},{values}\n")

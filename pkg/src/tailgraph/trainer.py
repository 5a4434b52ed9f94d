"""Two-stage decoupled training.

Stage 1 learns the feature extractor jointly: a supervised cross-entropy
branch, a retrieval branch that classifies an attention-fused combination of
the query's nearest corpus graphs, and a balanced contrastive branch over
two augmented views. Stage 2 freezes the encoder and fine-tunes only the
classifier on class-balanced batches under weight decay, projecting each
class row onto the Max-norm ball after every update.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .bscl import CategoryCenters, ContrastConfig, ViewBatch, bscl_loss
from .classifier import (
    ClassifierWeights,
    RegConfig,
    logits_and_ce,
    maxnorm_project,
    weight_decay_term,
)
from .diffcore import Parameter, Tensor, load_checkpoint, no_grad, save_checkpoint, stack_rows
from .encoder import EncoderParams, ProjectionHead, embed_graphs, project
from .graphdata import (
    Batch,
    ClassBalancedSampler,
    Dataset,
    InstanceBalancedSampler,
    augment,
)
from .optim import SGD, Adam
from .retrieval import CorpusIndex, RetrieverParams, fuse_retrieved, retrieve_topq

__all__ = [
    "TrainConfig",
    "ModelState",
    "EpochRecord",
    "TrainHistory",
    "TrainingDiverged",
    "stage1_step",
    "stage2_step",
    "fit",
    "finetune_classifier",
    "train_baseline_ce",
    "predict_logits",
    "predict_labels",
    "accuracy",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the model was restored to the last good state."""


@dataclass
class TrainConfig:
    eta_ret: float = 0.1
    eta_con: float = 1.0
    epochs: int = 200
    finetune_epochs: int = 50
    batch_size: int = 32
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-2
    seed: int = 0
    use_retrieval: bool = True
    use_bscl: bool = True
    use_weight_reg: bool = True
    top_q: int = 10
    temperature: float = 0.2
    contrast_weight: float = 0.05
    aug_ratio: float = 0.2
    hidden_dim: int = 64
    embed_dim: int = 64
    num_layers: int = 3
    record_timing: bool = True

    def __post_init__(self):
        if self.eta_ret < 0 or self.eta_con < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("epoch counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


class ModelState:
    """All trainable state plus the frozen retrieval matcher reference."""

    def __init__(
        self,
        encoder: EncoderParams,
        head: ProjectionHead,
        centers: CategoryCenters,
        attention: Parameter,
        classifier: ClassifierWeights,
        retriever: RetrieverParams | None = None,
    ):
        self.encoder = encoder
        self.head = head
        self.centers = centers
        self.attention = attention
        self.classifier = classifier
        self.retriever = retriever

    @classmethod
    def init(
        cls,
        feature_dim: int,
        num_classes: int,
        cfg: TrainConfig,
        rng: np.random.Generator,
        retriever: RetrieverParams | None = None,
    ) -> "ModelState":
        enc = EncoderParams.init(
            feature_dim, cfg.hidden_dim, cfg.num_layers, cfg.embed_dim, rng
        )
        head = ProjectionHead.mlp(cfg.embed_dim, rng)
        centers = CategoryCenters.init(num_classes, cfg.embed_dim, rng)
        attn = Parameter.randn(
            (cfg.top_q, cfg.embed_dim), rng, np.sqrt(1.0 / cfg.embed_dim), name="attention"
        )
        clf = ClassifierWeights.init(num_classes, cfg.embed_dim, rng)
        return cls(enc, head, centers, attn, clf, retriever)

    def stage1_parameters(self) -> list[Parameter]:
        return [
            *self.encoder.parameters(),
            *self.head.parameters(),
            *self.centers.parameters(),
            self.attention,
            *self.classifier.parameters(),
        ]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.stage1_parameters()}

    def save(self, path) -> None:
        meta = {
            "feature_dim": self.encoder.feature_dim,
            "hidden_dim": self.encoder.layers[0].shape[1],
            "num_layers": self.encoder.num_layers,
            "embed_dim": self.encoder.embed_dim,
            "num_classes": self.classifier.num_classes,
            "top_q": self.attention.shape[0],
        }
        with open(str(path) + ".meta", "w") as fh:
            json.dump(meta, fh, indent=1)
        save_checkpoint(self.named_parameters(), path)

    @classmethod
    def load(cls, path, retriever: RetrieverParams | None = None) -> "ModelState":
        with open(str(path) + ".meta") as fh:
            meta = json.load(fh)
        weights = load_checkpoint(path)

        def par(name):
            return Parameter(weights[name], name=name)

        layers = [par(f"encoder.layer{l}") for l in range(meta["num_layers"])]
        enc = EncoderParams(layers, par("encoder.readout"))
        head = ProjectionHead("mlp", par("projection.w1"), par("projection.w2"))
        centers = CategoryCenters(par("centers"))
        clf = ClassifierWeights(par("classifier.weight"), par("classifier.bias"))
        return cls(enc, head, centers, par("attention"), clf, retriever)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_base: float
    l_ret: float
    l_con: float
    l_total: float
    val_acc: float
    seconds: float


class TrainHistory:
    def __init__(self):
        self.records: list[EpochRecord] = []

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,l_base,l_ret,l_con,l_total,val_acc,seconds\n")
            for r in self.records:
                fh.write(
                    f"{r.epoch},{r.l_base!r},{r.l_ret!r},{r.l_con!r},"
                    f"{r.l_total!r},{r.val_acc!r},{r.seconds!r}\n"
                )


# ----------------------------------------------------------------------
# inference helpers
# ----------------------------------------------------------------------
def predict_logits(model: ModelState, dataset: Dataset) -> np.ndarray:
    with no_grad():
        h = embed_graphs(dataset.graphs, model.encoder)
        logits = h.data @ model.classifier.weight.data.T + model.classifier.bias.data
    return logits


def predict_labels(model: ModelState, dataset: Dataset) -> np.ndarray:
    return predict_logits(model, dataset).argmax(axis=1)


def accuracy(model: ModelState, dataset: Dataset) -> float:
    return float((predict_labels(model, dataset) == dataset.labels()).mean())


# ----------------------------------------------------------------------
# training steps
# ----------------------------------------------------------------------
def _branch_flags(cfg: TrainConfig, index: CorpusIndex | None):
    # a zero loss weight short-circuits the whole branch so degenerate
    # configs are bit-identical to the plain supervised step
    use_ret = cfg.use_retrieval and cfg.eta_ret != 0.0 and index is not None
    use_con = cfg.use_bscl and cfg.eta_con != 0.0
    return use_ret, use_con


def stage1_step(
    batch: Batch,
    dataset: Dataset,
    model: ModelState,
    index: CorpusIndex | None,
    cfg: TrainConfig,
    opt: Adam,
    rng: np.random.Generator,
    retrieval_cache: dict[int, list[int]] | None = None,
) -> dict[str, float]:
    """One joint update of encoder, projection head, centers, attention, and
    classifier on an instance-balanced batch. Returns the loss record."""
    use_ret, use_con = _branch_flags(cfg, index)
    idx = list(batch.graph_indices)
    labels = np.array([dataset[i].label for i in idx], dtype=np.int64)

    neighbor_lists: list[list[int]] = []
    if use_ret:
        for i in idx:
            if retrieval_cache is not None and i in retrieval_cache:
                neighbors = retrieval_cache[i]
            else:
                neighbors = retrieve_topq(i, index, cfg.top_q).neighbor_indices
                if retrieval_cache is not None:
                    retrieval_cache[i] = neighbors
            neighbor_lists.append(neighbors)

    # one disjoint-union encoding of every distinct graph this step touches
    needed = sorted(set(idx) | {j for lst in neighbor_lists for j in lst})
    pos_of = {gi: r for r, gi in enumerate(needed)}
    graphs = [dataset[gi] for gi in needed]
    if use_con:
        v2_offset = len(graphs)
        graphs = graphs + [augment(dataset[i], cfg.aug_ratio, rng) for i in idx]

    h_all = embed_graphs(graphs, model.encoder)
    h_base = h_all.rows([pos_of[i] for i in idx])

    _, l_base = logits_and_ce(h_base, model.classifier, labels)
    total = l_base
    l_ret_val = 0.0
    l_con_val = 0.0

    if use_ret:
        fused = []
        for b, neighbors in enumerate(neighbor_lists):
            h_b = h_base.rows([b]).reshape(cfg.embed_dim)
            retrieved = h_all.rows([pos_of[j] for j in neighbors])
            fused.append(fuse_retrieved(h_b, retrieved, model.attention))
        h_ret = stack_rows(fused)
        _, l_ret = logits_and_ce(h_ret, model.classifier, labels)
        total = total + cfg.eta_ret * l_ret
        l_ret_val = float(l_ret.data)

    if use_con:
        h_v2 = h_all.rows(list(range(v2_offset, v2_offset + len(idx))))
        view = ViewBatch(
            project(h_base, model.head),
            project(h_v2, model.head),
            h_base,
            labels,
        )
        l_con = bscl_loss(
            view,
            model.centers,
            ContrastConfig(cfg.temperature, cfg.contrast_weight),
        )
        total = total + cfg.eta_con * l_con
        l_con_val = float(l_con.data)

    if not np.isfinite(total.data):
        raise TrainingDiverged(f"non-finite stage-1 loss: {float(total.data)}")

    opt.zero_grad()
    total.backward()
    opt.step()
    if use_con:
        model.centers.renormalize()

    return {
        "l_base": float(l_base.data),
        "l_ret": l_ret_val,
        "l_con": l_con_val,
        "l_total": float(total.data),
    }


def stage2_step(
    batch: Batch,
    model: ModelState,
    reg: RegConfig,
    cfg: TrainConfig,
    opt: SGD,
    embeddings: np.ndarray,
    labels: np.ndarray,
) -> dict[str, float]:
    """One classifier-only update on a class-balanced batch: cross-entropy
    plus weight decay, then Max-norm projection of every class row."""
    idx = np.array(batch.graph_indices, dtype=np.int64)
    h = Tensor(embeddings[idx])
    _, ce = logits_and_ce(h, model.classifier, labels[idx])
    loss = (ce + weight_decay_term(model.classifier, reg.lam)) if reg.lam > 0 else ce
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"non-finite stage-2 loss: {float(loss.data)}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    maxnorm_project(model.classifier, reg.delta)
    return {
        "l_base": float(ce.data),
        "l_ret": 0.0,
        "l_con": 0.0,
        "l_total": float(loss.data),
    }


# ----------------------------------------------------------------------
# full pipeline
# ----------------------------------------------------------------------
def _snapshot(params: list[Parameter]) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def _restore(params: list[Parameter], snap: dict[str, np.ndarray]) -> None:
    for p in params:
        p.data = snap[p.name].copy()


def fit(
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    reg: RegConfig | None = None,
    index: CorpusIndex | None = None,
):
    """Run the full two-stage pipeline and return (model, history).

    Stage 1 uses the instance-balanced sampler for ``cfg.epochs`` epochs;
    stage 2 (when weight regularization is enabled) freezes the encoder and
    fine-tunes the classifier with the class-balanced sampler for
    ``cfg.finetune_epochs`` epochs. The best-validation model is kept at the
    end of each stage. Deterministic for a fixed (config, data) pair.
    """
    if train.feature_dim != val.feature_dim:
        raise ValueError("train and val feature dimensions differ")
    if cfg.use_retrieval and index is None:
        raise ValueError("retrieval branch enabled but no corpus index given")
    if index is not None and len(index) != len(train):
        raise ValueError("corpus index was not built over this training set")
    reg = reg if reg is not None else RegConfig()
    num_classes = max(train.num_classes, val.num_classes)

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init, rng_s1, rng_aug, rng_s2 = (np.random.default_rng(s) for s in seeds)

    model = ModelState.init(
        train.feature_dim, num_classes, cfg, rng_init,
        retriever=index.params if index is not None else None,
    )
    history = TrainHistory()
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)

    sampler = InstanceBalancedSampler(train, rng_s1)
    opt = Adam(model.stage1_parameters(), lr=cfg.lr_stage1)
    retrieval_cache: dict[int, list[int]] = {}
    stage1_params = model.stage1_parameters()
    best_acc, best_snap = -1.0, _snapshot(stage1_params)

    epoch = 0
    for _ in range(cfg.epochs):
        epoch += 1
        t0 = time.perf_counter()
        sums = {"l_base": 0.0, "l_ret": 0.0, "l_con": 0.0, "l_total": 0.0}
        for _ in range(steps_per_epoch):
            batch = sampler.sample(cfg.batch_size)
            try:
                rec = stage1_step(
                    batch, train, model, index, cfg, opt, rng_aug, retrieval_cache
                )
            except TrainingDiverged:
                _restore(stage1_params, best_snap)
                raise
            for k in sums:
                sums[k] += rec[k]
        val_acc = accuracy(model, val)
        if val_acc > best_acc:
            best_acc, best_snap = val_acc, _snapshot(stage1_params)
        seconds = time.perf_counter() - t0 if cfg.record_timing else 0.0
        history.append(
            EpochRecord(
                epoch,
                sums["l_base"] / steps_per_epoch,
                sums["l_ret"] / steps_per_epoch,
                sums["l_con"] / steps_per_epoch,
                sums["l_total"] / steps_per_epoch,
                val_acc,
                seconds,
            )
        )
    _restore(stage1_params, best_snap)

    if cfg.use_weight_reg:
        finetune_classifier(
            model, train, val, cfg, reg, rng=rng_s2, history=history, start_epoch=epoch
        )

    return model, history


def finetune_classifier(
    model: ModelState,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    reg: RegConfig,
    rng: np.random.Generator | None = None,
    history: TrainHistory | None = None,
    start_epoch: int = 0,
) -> TrainHistory:
    """Stage 2 on its own: freeze the encoder, fine-tune the classifier on
    class-balanced batches, keep the best-validation classifier."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    history = history if history is not None else TrainHistory()
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    with no_grad():
        train_emb = embed_graphs(train.graphs, model.encoder).data
        val_emb = embed_graphs(val.graphs, model.encoder).data
    train_labels = train.labels()
    val_labels = val.labels()
    sampler = ClassBalancedSampler(train, rng)
    opt = SGD(model.classifier.parameters(), lr=cfg.lr_stage2)
    clf_params = model.classifier.parameters()
    best, best_snap = -1.0, _snapshot(clf_params)
    epoch = start_epoch
    for _ in range(cfg.finetune_epochs):
        epoch += 1
        t0 = time.perf_counter()
        sums = {"l_base": 0.0, "l_ret": 0.0, "l_con": 0.0, "l_total": 0.0}
        for _ in range(steps_per_epoch):
            batch = sampler.sample(cfg.batch_size)
            try:
                rec = stage2_step(batch, model, reg, cfg, opt, train_emb, train_labels)
            except TrainingDiverged:
                _restore(clf_params, best_snap)
                raise
            for k in sums:
                sums[k] += rec[k]
        logits = val_emb @ model.classifier.weight.data.T + model.classifier.bias.data
        val_acc = float((logits.argmax(axis=1) == val_labels).mean())
        if val_acc > best:
            best, best_snap = val_acc, _snapshot(clf_params)
        seconds = time.perf_counter() - t0 if cfg.record_timing else 0.0
        history.append(
            EpochRecord(
                epoch,
                sums["l_base"] / steps_per_epoch,
                sums["l_ret"] / steps_per_epoch,
                sums["l_con"] / steps_per_epoch,
                sums["l_total"] / steps_per_epoch,
                val_acc,
                seconds,
            )
        )
    _restore(clf_params, best_snap)
    return history


def train_baseline_ce(train: Dataset, val: Dataset, cfg: TrainConfig):
    """Plain supervised cross-entropy training: all branches off, one stage."""
    base_cfg = TrainConfig.from_dict(
        {
            **cfg.to_dict(),
            "use_retrieval": False,
            "use_bscl": False,
            "use_weight_reg": False,
        }
    )
    return fit(train, val, base_cfg, reg=None, index=None)

"""Command-line entry points for the full pipeline: data generation,
long-tailing, splits, matcher training, index building, two-stage training,
and evaluation reports."""

from __future__ import annotations

import datetime
import json
import os

import click
import numpy as np

from . import evaluation, trainer
from .classifier import RegConfig
from .graphdata import generate_synthetic, load_jsonl, make_longtail, save_jsonl, split
from .retrieval import CorpusIndex, RetrieverParams, mine_pairs, retrieve_topq, train_retriever


@click.group()
def main():
    """Long-tailed graph classification with retrieval augmentation."""


@main.command("gen-data")
@click.option("--classes", "num_classes", type=int, default=8, show_default=True)
@click.option("--per-class", type=int, default=100, show_default=True)
@click.option("--noise", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def gen_data(num_classes, per_class, noise, seed, out):
    """Generate a synthetic motif dataset."""
    ds = generate_synthetic(num_classes, per_class, noise, seed)
    save_jsonl(ds, out)
    click.echo(f"wrote {len(ds)} graphs ({num_classes} classes) to {out}")


@main.command("longtail")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--imbalance-factor", "imbalance", type=float, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def longtail(data, imbalance, seed, out):
    """Subsample a dataset to a long-tailed class distribution."""
    ds = load_jsonl(data)
    reduced, spec = make_longtail(ds, imbalance, seed)
    save_jsonl(reduced, out)
    click.echo(
        f"kept {len(reduced)} graphs; counts {list(spec.realized_counts)}; "
        f"realized IF {spec.imbalance_factor:.2f}"
    )


@main.command("split")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
def split_cmd(data, seed, out_dir):
    """Stratified 60/20/20 split into train/val/test files."""
    ds = load_jsonl(data)
    train, val, test = split(ds, seed)
    os.makedirs(out_dir, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_jsonl(part, os.path.join(out_dir, f"{name}.jsonl"))
    click.echo(f"split {len(ds)} -> {len(train)}/{len(val)}/{len(test)} in {out_dir}")


@main.command("train-retriever")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--pairs-per-query", type=int, default=3, show_default=True)
@click.option("--margin", type=float, default=0.5, show_default=True)
@click.option("--epochs", type=int, default=50, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--hidden-dim", type=int, default=32, show_default=True)
@click.option("--edge-dim", type=int, default=32, show_default=True)
@click.option("--walk-len", type=int, default=0, show_default=True,
              help="non-backtracking walk feature length (0 = attributes only)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def train_retriever_cmd(data, pairs_per_query, margin, epochs, lr, hidden_dim,
                        edge_dim, walk_len, seed, out):
    """Mine containment triples and train the subgraph matcher."""
    ds = load_jsonl(data)
    seeds = np.random.SeedSequence(seed).spawn(3)
    rng_init, rng_mine, rng_train = (np.random.default_rng(s) for s in seeds)
    params = RetrieverParams.init(
        ds.feature_dim, hidden_dim, edge_dim, rng_init, margin=margin, walk_len=walk_len
    )
    stats: dict = {}
    triples = mine_pairs(ds, pairs_per_query, rng_mine, stats)
    params, history = train_retriever(triples, params, epochs, lr, rng=rng_train)
    params.save(out)
    click.echo(
        f"trained on {len(triples)} triples ({stats.get('skipped', 0)} skipped); "
        f"loss {history[0]:.4f} -> {history[-1]:.4f}; saved to {out}"
    )


@main.command("build-index")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--retriever", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def build_index(data, retriever, out):
    """Precompute corpus edge embeddings for retrieval."""
    ds = load_jsonl(data)
    params = RetrieverParams.load(retriever)
    index = CorpusIndex.build(ds, params)
    index.save(out)
    click.echo(f"indexed {len(index)} graphs into {out}")


@main.command("query")
@click.option("--index", "index_dir", type=click.Path(exists=True), required=True)
@click.option("--query-id", type=int, required=True)
@click.option("--top-q", type=int, default=10, show_default=True)
def query_cmd(index_dir, query_id, top_q):
    """Rank the corpus against one query graph."""
    index = CorpusIndex.load(index_dir)
    result = retrieve_topq(query_id, index, top_q)
    for rank, (j, d) in enumerate(zip(result.neighbor_indices, result.distances), 1):
        click.echo(f"{rank}\t{j}\tlabel={index.corpus[j].label}\tdistance={d:.6f}")


def _load_config(path) -> trainer.TrainConfig:
    if path is None:
        return trainer.TrainConfig()
    with open(path) as fh:
        return trainer.TrainConfig.from_dict(json.load(fh))


@main.command("train")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--val", type=click.Path(exists=True), required=True)
@click.option("--index", "index_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--out", type=click.Path(), required=True)
def train_cmd(config, data, val, index_dir, seed, out):
    """Run the two-stage pipeline and write run artifacts."""
    cfg = _load_config(config)
    if seed is not None:
        cfg = trainer.TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
    train_ds = load_jsonl(data)
    val_ds = load_jsonl(val)
    index = CorpusIndex.load(index_dir) if index_dir else None
    started = datetime.datetime.now().isoformat(timespec="seconds")

    model, history = trainer.fit(train_ds, val_ds, cfg, index=index)

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    history.to_csv(os.path.join(out, "history.csv"))
    model.save(os.path.join(out, "model.json"))

    retrieved_hist = [0] * max(train_ds.num_classes, val_ds.num_classes)
    if index is not None and cfg.use_retrieval and cfg.eta_ret != 0:
        for i in range(len(train_ds)):
            for j in retrieve_topq(i, index, cfg.top_q).neighbor_indices:
                retrieved_hist[train_ds[j].label] += 1
    record = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "metrics": {"best_val_acc": max(r.val_acc for r in history.records)},
        "retrieved_label_histogram": retrieved_hist,
        "started": started,
        "finished": datetime.datetime.now().isoformat(timespec="seconds"),
    }
    with open(os.path.join(out, "results.json"), "w") as fh:
        json.dump(record, fh, indent=1)
    click.echo(f"run artifacts in {out}; best val acc {record['metrics']['best_val_acc']:.4f}")


@main.command("finetune")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--val", type=click.Path(exists=True), required=True)
@click.option("--delta", type=float, default=0.3, show_default=True)
@click.option("--lambda", "lam", type=float, default=0.1, show_default=True)
@click.option("--epochs", type=int, default=None, help="override finetune epochs")
@click.option("--out", type=click.Path(), default=None, help="defaults to the run dir")
def finetune_cmd(run_dir, data, val, delta, lam, epochs, out):
    """Re-balance the classifier of an existing run (encoder frozen)."""
    with open(os.path.join(run_dir, "config.json")) as fh:
        cfg = trainer.TrainConfig.from_dict(json.load(fh))
    if epochs is not None:
        cfg = trainer.TrainConfig.from_dict({**cfg.to_dict(), "finetune_epochs": epochs})
    model = trainer.ModelState.load(os.path.join(run_dir, "model.json"))
    train_ds = load_jsonl(data)
    val_ds = load_jsonl(val)
    reg = RegConfig(delta=delta, lam=lam)
    history = trainer.finetune_classifier(model, train_ds, val_ds, cfg, reg)
    out = out or run_dir
    os.makedirs(out, exist_ok=True)
    model.save(os.path.join(out, "model.json"))
    history.to_csv(os.path.join(out, "finetune_history.csv"))
    click.echo(f"fine-tuned classifier saved to {out}")


@main.command("eval")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--train", "train_path", type=click.Path(exists=True), default=None,
              help="training data for shot-group thresholds")
@click.option("--many-threshold", type=int, default=20, show_default=True)
@click.option("--few-threshold", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def eval_cmd(run_dir, data, train_path, many_threshold, few_threshold, out):
    """Evaluate a run on a dataset; writes metrics.json and per_class.csv."""
    model = trainer.ModelState.load(os.path.join(run_dir, "model.json"))
    test_ds = load_jsonl(data)
    counts = None
    if train_path:
        counts = load_jsonl(train_path).class_counts
    metrics = evaluation.evaluate(
        model, test_ds, counts, many_threshold, few_threshold
    )
    os.makedirs(out, exist_ok=True)
    evaluation.write_metrics_json(metrics, os.path.join(out, "metrics.json"))
    evaluation.write_per_class_csv(metrics, os.path.join(out, "per_class.csv"), counts)
    click.echo(f"overall_acc {metrics.overall_acc:.4f} -> {out}")


@main.command("report")
@click.option("--train", "train_path", type=click.Path(exists=True), required=True)
@click.option("--index", "index_dir", type=click.Path(exists=True), required=True)
@click.option("--top-q", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def report_cmd(train_path, index_dir, top_q, out):
    """Label-distribution report of retrieval-augmented training data."""
    train_ds = load_jsonl(train_path)
    index = CorpusIndex.load(index_dir)
    results = [retrieve_topq(i, index, top_q) for i in range(len(train_ds))]
    report = evaluation.label_distribution_report(train_ds, results)
    os.makedirs(out, exist_ok=True)
    evaluation.write_label_dist_csv(report, os.path.join(out, "label_dist.csv"))
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    click.echo(
        f"KL vs uniform: original {report['kl_original']:.4f}, "
        f"augmented {report['kl_augmented']:.4f}"
    )


@main.command("export-embeddings")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def export_embeddings_cmd(run_dir, data, out):
    """Write encoder embeddings of a dataset to CSV."""
    model = trainer.ModelState.load(os.path.join(run_dir, "model.json"))
    ds = load_jsonl(data)
    evaluation.export_embeddings(model, ds, out)
    click.echo(f"wrote {len(ds)} embeddings to {out}")


if __name__ == "__main__":
    main()

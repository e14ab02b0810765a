"""Training loop, evaluation metrics, and checkpoint persistence.

Everything here is deterministic given (config, dataset, seed): graph order
is shuffled by a generator derived from the seed, parameters update in a
fixed order, and metric values are written through ``repr`` so two runs
produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, bce_with_logits, mse_loss, softmax_cross_entropy
from .graphs import DatasetError, MolecularGraph, batch_graphs, load_dataset
from .model import ConfigError, GraphPropertyModel, ModelOutput, TrainConfig, _pair_indices

METRICS_HEADER = ["epoch", "split", "metric", "value"]


class TrainingError(RuntimeError):
    """The optimization itself went wrong (for example a non-finite loss)."""


class Adam:
    """Standard Adam with bias correction; state follows parameter order."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros(p.shape) for p in params]
        self.second_moment = [np.zeros(p.shape) for p in params]

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            if p.grad is None:
                raise TrainingError("parameter has no gradient; run backward first")
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data -= self.lr * update


def dataset_dimensions(graphs: list[MolecularGraph], task: str
                       ) -> tuple[int, int, float]:
    """(feature_dim, output_dim, average node count) for a dataset and task."""
    if not graphs:
        raise DatasetError("empty dataset")
    feature_dim = graphs[0].feature_dim
    avg_nodes = float(np.mean([g.num_nodes for g in graphs]))
    if task == "pair-contact":
        if any(g.pair_labels is None for g in graphs):
            raise DatasetError("pair-contact task needs pair labels on every graph")
        return feature_dim, 1, avg_nodes
    if any(g.graph_label is None for g in graphs):
        raise DatasetError(f"{task} needs a graph label on every graph")
    labels = [g.graph_label for g in graphs]
    if task == "graph-classification":
        if not all(isinstance(lab, int) for lab in labels):
            raise DatasetError("classification labels must be integers")
        if min(labels) < 0:
            raise DatasetError("classification labels must be non-negative")
        return feature_dim, max(labels) + 1, avg_nodes
    if any(isinstance(lab, int) for lab in labels):
        raise DatasetError("regression labels must be float vectors")
    widths = {lab.shape[0] for lab in labels}
    if len(widths) != 1:
        raise DatasetError(f"regression labels must share one width, saw {sorted(widths)}")
    return feature_dim, labels[0].shape[0], avg_nodes


def _batch_loss(model: GraphPropertyModel, graphs: list[MolecularGraph]
                ) -> tuple[Tensor, dict, ModelOutput]:
    """Loss tensor, count-style statistics, and the forward output."""
    batch = batch_graphs(graphs)
    output = model.forward(batch)
    task = model.cfg.task
    if task == "graph-classification":
        labels = np.array([g.graph_label for g in graphs])
        loss = softmax_cross_entropy(output.graph_outputs, labels)
        correct = int((output.graph_outputs.data.argmax(axis=1) == labels).sum())
        return loss, {"count": len(graphs), "correct": correct}, output
    if task == "graph-regression":
        targets = np.stack([g.graph_label for g in graphs])
        loss = mse_loss(output.graph_outputs, targets)
        abs_err = float(np.abs(output.graph_outputs.data - targets).sum())
        return loss, {"count": targets.size, "abs_err": abs_err}, output
    _, _, flags = _pair_indices(batch)
    loss = bce_with_logits(output.pair_scores, flags[:, None])
    return loss, {"count": flags.size}, output


def _epoch_metrics(task: str, totals: dict) -> list[tuple[str, float]]:
    out = [("loss", totals["loss"] / totals["count"])]
    if task == "graph-classification":
        out.append(("accuracy", totals["correct"] / totals["count"]))
    elif task == "graph-regression":
        out.append(("mae", totals["abs_err"] / totals["count"]))
    return out


def train(cfg: TrainConfig) -> tuple[GraphPropertyModel, Path]:
    """Optimize a model on the configured dataset.

    Writes ``metrics.csv`` and ``checkpoint.json`` under ``cfg.out`` and
    returns the trained model together with the checkpoint path.
    """
    graphs = load_dataset(cfg.dataset)
    feature_dim, out_dim, avg_nodes = dataset_dimensions(graphs, cfg.task)
    model = GraphPropertyModel(cfg, feature_dim, out_dim, avg_nodes)
    params = model.tensors()
    optimizer = Adam(params, cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    history: list[list] = []

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(graphs))
        totals = {"loss": 0.0, "count": 0, "correct": 0, "abs_err": 0.0}
        for start in range(0, len(order), cfg.batch):
            chunk = [graphs[i] for i in order[start:start + cfg.batch]]
            loss, stats, _ = _batch_loss(model, chunk)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, "
                    f"batch starting at {start}")
            backward(loss, params)
            optimizer.step()
            totals["loss"] += value * stats["count"]
            totals["count"] += stats["count"]
            totals["correct"] += stats.get("correct", 0)
            totals["abs_err"] += stats.get("abs_err", 0.0)
        for metric, value in _epoch_metrics(cfg.task, totals):
            history.append([epoch, "train", metric, value])

    metrics_path = out_dir / "metrics.csv"
    _write_metrics(history, metrics_path)
    checkpoint_path = out_dir / "checkpoint.json"
    save_checkpoint(model, cfg.epochs, history, checkpoint_path)
    return model, checkpoint_path


def _write_metrics(rows: list[list], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for epoch, split, metric, value in rows:
            writer.writerow([epoch, split, metric, repr(float(value))])


def evaluate(model: GraphPropertyModel, graphs: list[MolecularGraph],
             batch_size: int = 64) -> dict[str, float]:
    """Task metric(s) of a model on a dataset, without touching parameters."""
    feature_dim, out_dim, _ = dataset_dimensions(graphs, model.cfg.task)
    if feature_dim != model.feature_dim:
        raise ConfigError(
            f"model expects {model.feature_dim} features, dataset has {feature_dim}")
    if model.cfg.task != "pair-contact" and out_dim > model.out_dim:
        raise ConfigError(
            f"dataset needs {out_dim} outputs, model produces {model.out_dim}")
    task = model.cfg.task
    totals = {"loss": 0.0, "count": 0, "correct": 0, "abs_err": 0.0}
    reciprocal_ranks: list[float] = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        loss, stats, output = _batch_loss(model, chunk)
        totals["loss"] += loss.item() * stats["count"]
        totals["count"] += stats["count"]
        totals["correct"] += stats.get("correct", 0)
        totals["abs_err"] += stats.get("abs_err", 0.0)
        if task == "pair-contact":
            scores = output.pair_scores.data[:, 0]
            reciprocal_ranks.extend(
                _contact_reciprocal_ranks(batch_graphs(chunk), scores))
    metrics = dict(_epoch_metrics(task, totals))
    if task == "pair-contact":
        if not reciprocal_ranks:
            raise DatasetError("no positive pairs to rank")
        metrics["mrr"] = float(np.mean(reciprocal_ranks))
    return metrics


def _contact_reciprocal_ranks(batch, scores: np.ndarray) -> list[float]:
    """1/rank of each positive pair against its own graph's negatives.

    A positive's rank is 1 plus the number of negatives scoring strictly
    higher, so ties resolve in the positive's favour.
    """
    out: list[float] = []
    cursor = 0
    for graph in batch.graphs:
        pairs = graph.pair_labels or []
        graph_scores = scores[cursor:cursor + len(pairs)]
        cursor += len(pairs)
        flags = np.array([hit for _, _, hit in pairs])
        negatives = graph_scores[flags == 0]
        for value in graph_scores[flags == 1]:
            rank = 1 + int((negatives > value).sum())
            out.append(1.0 / rank)
    return out


def mean_reciprocal_rank(ranks: list[int]) -> float:
    """Average of 1/rank; ranks count from 1."""
    if not ranks:
        raise ValueError("need at least one rank")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks count from 1")
    return float(np.mean([1.0 / r for r in ranks]))


def save_checkpoint(model: GraphPropertyModel, epoch: int, history: list[list],
                    path) -> None:
    """JSON snapshot: config, dimensions, named parameter arrays, history.

    Arrays are stored as plain float lists; python's ``repr`` round-trips
    every finite f64 exactly, so load followed by save is lossless.
    """
    named = model.parameters()
    names = [name for name, _ in named]
    if len(set(names)) != len(names):
        raise TrainingError("parameter names collide; checkpoint would be ambiguous")
    record = {
        "config": model.cfg.to_dict(),
        "feature_dim": model.feature_dim,
        "out_dim": model.out_dim,
        "avg_nodes": model.avg_nodes,
        "epoch": epoch,
        "history": history,
        "params": {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                   for name, t in named},
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(record, fh)


def load_checkpoint(path) -> tuple[GraphPropertyModel, dict]:
    """Rebuild a model from a checkpoint; returns it with the raw record."""
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    for key in ("config", "feature_dim", "out_dim", "avg_nodes", "params"):
        if key not in record:
            raise TrainingError(f"checkpoint is missing {key!r}")
    cfg = TrainConfig.from_dict(record["config"])
    model = GraphPropertyModel(cfg, record["feature_dim"], record["out_dim"],
                               record["avg_nodes"])
    stored = record["params"]
    for name, tensor in model.parameters():
        if name not in stored:
            raise TrainingError(f"checkpoint is missing parameter {name!r}")
        entry = stored[name]
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != tensor.shape:
            raise TrainingError(
                f"parameter {name!r} has shape {arr.shape}, expected {tensor.shape}")
        tensor.data[...] = arr
    extra = set(stored) - {name for name, _ in model.parameters()}
    if extra:
        raise TrainingError(f"checkpoint has unknown parameters {sorted(extra)}")
    return model, record

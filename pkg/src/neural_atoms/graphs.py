"""Graph containers, JSON Lines datasets, and the synthetic long-range task.

A dataset is a UTF-8 text file with one JSON object per line.  Every line
carries ``num_nodes``, ``edges`` (undirected ``[u, v]`` pairs), ``node_feats``
(one feature row per node), and exactly one of ``graph_label`` (an int class
or a float vector) or ``pair_labels`` (``[u, v, 0|1]`` triples).  Unknown
keys are rejected so that silently ignored typos cannot corrupt experiments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    """A graph violates its structural invariants."""


class DatasetError(ValueError):
    """A dataset file is malformed; the message carries the line number."""


_LINE_KEYS = {"num_nodes", "edges", "node_feats", "graph_label", "pair_labels"}


@dataclass
class MolecularGraph:
    """An undirected graph with dense node features and an optional label.

    Edges are stored once per undirected pair and never as self-loops;
    layers that need self-connections add them on the fly.
    """

    num_nodes: int
    edges: list[tuple[int, int]]
    node_features: np.ndarray
    graph_label: int | np.ndarray | None = None
    pair_labels: list[tuple[int, int, int]] | None = None

    def __post_init__(self):
        if self.num_nodes < 1:
            raise GraphError(f"graph needs at least one node, got {self.num_nodes}")
        feats = np.asarray(self.node_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes or feats.shape[1] < 1:
            raise GraphError(
                f"node_features must be ({self.num_nodes}, D) with D >= 1, got {feats.shape}")
        if not np.isfinite(feats).all():
            raise GraphError("node_features contain non-finite values")
        self.node_features = feats
        checked = []
        for u, v in self.edges:
            u, v = int(u), int(v)
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise GraphError(f"edge ({u}, {v}) out of range for {self.num_nodes} nodes")
            if u == v:
                raise GraphError(f"self-loop on node {u} is not allowed")
            checked.append((u, v))
        self.edges = checked
        if self.pair_labels is not None:
            pairs = []
            for u, v, hit in self.pair_labels:
                u, v, hit = int(u), int(v), int(hit)
                if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                    raise GraphError(f"pair label ({u}, {v}) out of range")
                if hit not in (0, 1):
                    raise GraphError(f"pair label flag must be 0 or 1, got {hit}")
                pairs.append((u, v, hit))
            self.pair_labels = pairs
        if self.graph_label is not None and not isinstance(self.graph_label, (int, np.integer)):
            arr = np.asarray(self.graph_label, dtype=np.float64)
            if arr.ndim != 1 or not np.isfinite(arr).all():
                raise GraphError("graph_label must be an int or a finite 1-D float array")
            self.graph_label = arr

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def degrees(self) -> np.ndarray:
        """Number of incident edges per node (self-loops are never stored)."""
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg


@dataclass
class GraphBatch:
    """Several graphs packed into one disjoint union.

    ``offsets`` has one entry per graph plus a trailing total, so graph ``i``
    owns merged rows ``offsets[i]:offsets[i + 1]``.
    """

    graphs: list[MolecularGraph]
    offsets: np.ndarray
    node_features: np.ndarray
    _merged: MolecularGraph | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def total_nodes(self) -> int:
        return int(self.offsets[-1])

    def merged_graph(self) -> MolecularGraph:
        """The disjoint union as a single unlabeled graph (cached)."""
        if self._merged is None:
            edges: list[tuple[int, int]] = []
            for g, off in zip(self.graphs, self.offsets[:-1]):
                off = int(off)
                edges.extend((u + off, v + off) for u, v in g.edges)
            self._merged = MolecularGraph(self.total_nodes, edges, self.node_features)
        return self._merged


def batch_graphs(graphs: list[MolecularGraph]) -> GraphBatch:
    """Pack graphs into one batch; offsets are the prefix sums of node counts."""
    if not graphs:
        raise GraphError("cannot batch an empty list of graphs")
    dims = {g.feature_dim for g in graphs}
    if len(dims) != 1:
        raise GraphError(f"inconsistent feature dimensions in batch: {sorted(dims)}")
    counts = [g.num_nodes for g in graphs]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    features = np.concatenate([g.node_features for g in graphs], axis=0)
    return GraphBatch(list(graphs), offsets, features)


def permute_graph(graph: MolecularGraph, perm) -> MolecularGraph:
    """Relabel nodes so old node ``i`` becomes new node ``perm[i]``."""
    p = [int(i) for i in perm]
    if sorted(p) != list(range(graph.num_nodes)):
        raise GraphError(f"perm is not a bijection over {graph.num_nodes} nodes")
    feats = np.empty_like(graph.node_features)
    feats[p] = graph.node_features
    edges = [(p[u], p[v]) for u, v in graph.edges]
    pairs = None
    if graph.pair_labels is not None:
        pairs = [(p[u], p[v], hit) for u, v, hit in graph.pair_labels]
    label = graph.graph_label
    if isinstance(label, np.ndarray):
        label = label.copy()
    return MolecularGraph(graph.num_nodes, edges, feats, label, pairs)


# ---------------------------------------------------------------------------
# JSON Lines input/output
# ---------------------------------------------------------------------------


def _graph_from_record(record: dict) -> MolecularGraph:
    unknown = set(record) - _LINE_KEYS
    if unknown:
        raise DatasetError(f"unknown keys {sorted(unknown)}")
    for key in ("num_nodes", "edges", "node_feats"):
        if key not in record:
            raise DatasetError(f"missing required key '{key}'")
    has_graph = "graph_label" in record
    has_pairs = "pair_labels" in record
    if has_graph == has_pairs:
        raise DatasetError("need exactly one of 'graph_label' or 'pair_labels'")
    label = record.get("graph_label")
    if label is not None and isinstance(label, (bool, str)):
        raise DatasetError("graph_label must be an int or a list of floats")
    pairs = record.get("pair_labels")
    if pairs is not None:
        pairs = [tuple(t) for t in pairs]
    edges = [tuple(e) for e in record["edges"]]
    return MolecularGraph(int(record["num_nodes"]), edges,
                          np.asarray(record["node_feats"], dtype=np.float64),
                          label, pairs)


def load_dataset(path) -> list[MolecularGraph]:
    """Read a JSON Lines dataset; any defect is reported with its line number."""
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"line {lineno}: invalid JSON ({err.msg})") from err
            if not isinstance(record, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            try:
                graphs.append(_graph_from_record(record))
            except (DatasetError, GraphError, TypeError, ValueError) as err:
                raise DatasetError(f"line {lineno}: {err}") from err
    if not graphs:
        raise DatasetError(f"dataset {path} holds no graphs")
    return graphs


def save_dataset(graphs: list[MolecularGraph], path) -> None:
    """Write graphs as JSON Lines; floats round-trip exactly through repr."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for g in graphs:
            record: dict = {
                "num_nodes": g.num_nodes,
                "edges": [[u, v] for u, v in g.edges],
                "node_feats": g.node_features.tolist(),
            }
            if g.pair_labels is not None:
                record["pair_labels"] = [[u, v, hit] for u, v, hit in g.pair_labels]
            else:
                label = g.graph_label
                if label is None:
                    raise DatasetError("cannot save a graph with no label of either kind")
                record["graph_label"] = label.tolist() if isinstance(label, np.ndarray) else int(label)
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# Synthetic long-range task
# ---------------------------------------------------------------------------


def generate_lri_task(num_graphs: int, path_len: int, num_colors: int,
                      seed: int) -> list[MolecularGraph]:
    """Path graphs whose label is 1 iff the two endpoint colors match.

    Node features have ``num_colors`` one-hot color channels plus a constant
    1 "exists" channel; interior nodes carry only the exists channel, so the
    label is decidable only by comparing the two ends of the path.  Exactly
    ``num_graphs // 2`` graphs are positive, which keeps the class balance
    within 2% of one half for any size above 25.
    """
    if num_graphs < 1:
        raise GraphError("num_graphs must be positive")
    if path_len < 2:
        raise GraphError("path_len must be at least 2 so the endpoints differ")
    if num_colors < 2:
        raise GraphError("need at least two colors for a non-trivial task")
    rng = np.random.default_rng(seed)
    labels = np.zeros(num_graphs, dtype=np.int64)
    labels[: num_graphs // 2] = 1
    rng.shuffle(labels)

    edges = [(i, i + 1) for i in range(path_len - 1)]
    graphs = []
    for label in labels:
        if label == 1:
            first = last = int(rng.integers(num_colors))
        else:
            first = int(rng.integers(num_colors))
            last = int(rng.integers(num_colors - 1))
            if last >= first:
                last += 1
        feats = np.zeros((path_len, num_colors + 1))
        feats[:, num_colors] = 1.0
        feats[0, first] = 1.0
        feats[-1, last] = 1.0
        graphs.append(MolecularGraph(path_len, list(edges), feats, graph_label=int(label)))
    return graphs

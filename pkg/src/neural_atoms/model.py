"""Model assembly: configuration, parameter construction, and the forward pass.

A model is a stack of message-passing layers, each optionally followed by a
neural-atom block or a virtual-node round, finished by a task head.  Graphs
in a batch share parameters but never exchange information: message passing
runs on the merged block-diagonal graph, while the atom and virtual-node
augmentations loop over per-graph row slices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import (Tensor, add, concat_cols, concat_rows, gather_rows,
                       matmul, mean_rows, parameter, relu, rows)
from .gnn import GcnLayerParams, GinLayerParams, gcn_forward, gin_forward
from .graphs import GraphBatch
from .neural_atom import NeuralAtomLayerParams, NeuralAtomTrace, enhance_nodes
from .schedules import compute_k_schedule
from .virtual_node import VirtualNodeParams, multi_virtual_node_layer

BACKBONES = ("gcn", "gin")
AUGMENTS = ("none", "neural-atoms", "virtual-node")
TASKS = ("graph-classification", "graph-regression", "pair-contact")


class ConfigError(ValueError):
    """A training configuration violates its invariants."""


@dataclass
class TrainConfig:
    """Run settings; field names double as CLI flag names (dash for underscore)."""

    dataset: str
    out: str
    backbone: str = "gcn"
    augment: str = "none"
    layers: int = 3
    hidden: int = 32
    heads: int = 2
    k_strategy: str = "fixed"
    proportion: float = 0.2
    virtual_nodes: int = 1
    epochs: int = 50
    lr: float = 0.02
    batch: int = 64
    seed: int = 0
    task: str = "graph-classification"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.augment not in AUGMENTS:
            raise ConfigError(f"augment must be one of {AUGMENTS}, got {self.augment!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        for name in ("layers", "hidden", "heads", "virtual_nodes", "epochs", "batch"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not (self.lr > 0.0 and np.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr!r}")
        if not (0.0 < self.proportion and np.isfinite(self.proportion)):
            raise ConfigError(f"proportion must be positive, got {self.proportion!r}")

    @classmethod
    def from_dict(cls, record: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(record) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "dataset" not in record or "out" not in record:
            raise ConfigError("config needs both 'dataset' and 'out'")
        return cls(**record)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
        if not isinstance(record, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(record)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelOutput:
    """Everything one forward pass produces."""

    node_states: Tensor
    graph_outputs: Tensor | None = None
    pair_scores: Tensor | None = None
    traces: list[list[NeuralAtomTrace]] | None = field(default=None)


def _pair_indices(batch: GraphBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Global (u, v, flag) arrays for every labelled pair in the batch."""
    us, vs, flags = [], [], []
    for g, graph in enumerate(batch.graphs):
        base = batch.offsets[g]
        for u, v, hit in graph.pair_labels or []:
            us.append(base + u)
            vs.append(base + v)
            flags.append(hit)
    return (np.asarray(us, dtype=np.int64), np.asarray(vs, dtype=np.int64),
            np.asarray(flags, dtype=np.float64))


class GraphPropertyModel:
    """Config-driven stack of layers plus a task head.

    Parameter construction order is fixed, so two models built from the
    same config and seed hold byte-identical arrays.
    """

    def __init__(self, cfg: TrainConfig, feature_dim: int, out_dim: int,
                 avg_nodes: float):
        if feature_dim < 1 or out_dim < 1:
            raise ConfigError("feature_dim and out_dim must be positive")
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.out_dim = out_dim
        self.avg_nodes = float(avg_nodes)
        rng = np.random.default_rng([cfg.seed, 0])

        self.gnn_layers = []
        for i in range(cfg.layers):
            dim_in = feature_dim if i == 0 else cfg.hidden
            if cfg.backbone == "gcn":
                self.gnn_layers.append(GcnLayerParams.init(dim_in, cfg.hidden, rng))
            else:
                self.gnn_layers.append(
                    GinLayerParams.init(dim_in, cfg.hidden, cfg.hidden, rng))

        self.atom_layers: list[NeuralAtomLayerParams] = []
        self.vn_layers: list[VirtualNodeParams] = []
        if cfg.augment == "neural-atoms":
            schedule = compute_k_schedule(cfg.k_strategy, cfg.proportion,
                                          self.avg_nodes, cfg.layers)
            self.k_counts = list(schedule.counts)
            for k in self.k_counts:
                self.atom_layers.append(
                    NeuralAtomLayerParams.init(k, cfg.hidden, cfg.heads, rng))
        elif cfg.augment == "virtual-node":
            for _ in range(cfg.layers):
                self.vn_layers.append(VirtualNodeParams.init(rng, cfg.hidden))

        if cfg.task == "pair-contact":
            self.head = {
                "w1": parameter(rng, (2 * cfg.hidden, cfg.hidden),
                                (2 * cfg.hidden) ** -0.5),
                "b1": Tensor(np.zeros(cfg.hidden), requires_grad=True),
                "w2": parameter(rng, (cfg.hidden, 1), cfg.hidden ** -0.5),
                "b2": Tensor(np.zeros(1), requires_grad=True),
            }
        else:
            self.head = {
                "weight": parameter(rng, (cfg.hidden, out_dim), cfg.hidden ** -0.5),
                "bias": Tensor(np.zeros(out_dim), requires_grad=True),
            }

    def parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        gnn_names = (("weight",) if self.cfg.backbone == "gcn"
                     else ("w1", "b1", "w2", "b2"))
        for i, layer in enumerate(self.gnn_layers):
            for attr in gnn_names:
                named.append((f"layer{i}.{self.cfg.backbone}.{attr}", getattr(layer, attr)))
        for i, atoms in enumerate(self.atom_layers):
            named.append((f"layer{i}.atoms.queries", atoms.queries))
            for role, att in (("project", atoms.project_attention),
                              ("exchange", atoms.exchange_attention)):
                for m in range(att.heads):
                    named.append((f"layer{i}.atoms.{role}.head{m}.wq", att.query_weights[m]))
                    named.append((f"layer{i}.atoms.{role}.head{m}.wk", att.key_weights[m]))
                    named.append((f"layer{i}.atoms.{role}.head{m}.wv", att.value_weights[m]))
                named.append((f"layer{i}.atoms.{role}.wo", att.output_weight))
            for role, norm in (("project_norm", atoms.project_norm),
                               ("exchange_norm", atoms.exchange_norm)):
                named.append((f"layer{i}.atoms.{role}.gain", norm.gain))
                named.append((f"layer{i}.atoms.{role}.bias", norm.bias))
        for i, vn in enumerate(self.vn_layers):
            for attr in ("w1", "b1", "w2", "b2"):
                named.append((f"layer{i}.vnode.{attr}", getattr(vn, attr)))
        for attr in sorted(self.head):
            named.append((f"head.{attr}", self.head[attr]))
        return named

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    def _message_pass(self, h: Tensor, merged, layer_index: int) -> Tensor:
        params = self.gnn_layers[layer_index]
        if self.cfg.backbone == "gcn":
            return gcn_forward(h, merged, params)
        return gin_forward(h, merged, params)

    def forward(self, batch: GraphBatch, collect_traces: bool = False) -> ModelOutput:
        if batch.graphs[0].feature_dim != self.feature_dim:
            raise ConfigError(
                f"model expects {self.feature_dim} node features, "
                f"dataset has {batch.graphs[0].feature_dim}")
        merged = batch.merged_graph()
        h = Tensor(merged.node_features)
        num_graphs = len(batch)
        traces: list[list[NeuralAtomTrace]] = [] if collect_traces else None
        vstates = None
        if self.cfg.augment == "virtual-node":
            shape = (self.cfg.virtual_nodes, self.cfg.hidden)
            vstates = [Tensor(np.zeros(shape)) for _ in range(num_graphs)]

        for i in range(self.cfg.layers):
            h = self._message_pass(h, merged, i)
            if self.cfg.augment == "neural-atoms":
                slices = []
                layer_traces = []
                for g in range(num_graphs):
                    part = rows(h, batch.offsets[g], batch.offsets[g + 1])
                    enhanced, trace = enhance_nodes(part, self.atom_layers[i],
                                                    want_trace=collect_traces)
                    slices.append(enhanced)
                    if collect_traces:
                        layer_traces.append(trace)
                h = concat_rows(slices)
                if collect_traces:
                    traces.append(layer_traces)
            elif self.cfg.augment == "virtual-node":
                slices = []
                for g in range(num_graphs):
                    part = rows(h, batch.offsets[g], batch.offsets[g + 1])
                    out, vstates[g] = multi_virtual_node_layer(
                        part, vstates[g], self.vn_layers[i])
                    slices.append(out)
                h = concat_rows(slices)

        if self.cfg.task == "pair-contact":
            u_idx, v_idx, _ = _pair_indices(batch)
            if u_idx.size == 0:
                raise ConfigError("pair-contact task needs graphs with pair labels")
            feats = concat_cols([gather_rows(h, u_idx), gather_rows(h, v_idx)])
            hidden = relu(add(matmul(feats, self.head["w1"]), self.head["b1"]))
            scores = add(matmul(hidden, self.head["w2"]), self.head["b2"])
            return ModelOutput(node_states=h, pair_scores=scores, traces=traces)

        pooled = concat_rows([mean_rows(rows(h, batch.offsets[g], batch.offsets[g + 1]))
                              for g in range(num_graphs)])
        logits = add(matmul(pooled, self.head["weight"]), self.head["bias"])
        return ModelOutput(node_states=h, graph_outputs=logits, traces=traces)

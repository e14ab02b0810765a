"""The neural-atom block: project, exchange, backproject.

A block takes the node states produced by one message-passing layer and
routes them through a small set of learnable "neural atoms":

1. cross-attention from the atom queries onto the nodes groups every node
   softly into atoms (an information bottleneck of K slots),
2. self-attention among the atoms exchanges information globally in one hop,
3. the head-averaged allocation matrix, transposed, carries the exchanged
   atom states back onto the nodes, which are enhanced additively.

Because step 3 reuses the attention weights from step 1, any two nodes can
trade information through a shared atom regardless of their graph distance,
while the per-layer cost stays linear in the node count for fixed K.
"""

from __future__ import annotations

import csv
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionOutput, MultiHeadParams, multi_head_attention
from .autodiff import Tensor, add, layer_norm, matmul, parameter, scale, transpose
from .graphs import MolecularGraph

LAYER_NORM_EPS = 1e-5
QUERY_INIT_STD = 0.02


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNormParams":
        return cls(gain=Tensor(np.ones(dim), requires_grad=True),
                   bias=Tensor(np.zeros(dim), requires_grad=True))

    def tensors(self) -> list[Tensor]:
        return [self.gain, self.bias]


@dataclass
class NeuralAtomLayerParams:
    """Everything one block owns: atom queries, two attentions, two norms."""

    queries: Tensor
    project_attention: MultiHeadParams
    exchange_attention: MultiHeadParams
    project_norm: LayerNormParams
    exchange_norm: LayerNormParams

    @property
    def num_atoms(self) -> int:
        return self.queries.shape[0]

    @classmethod
    def init(cls, num_atoms: int, dim: int, heads: int,
             rng: np.random.Generator) -> "NeuralAtomLayerParams":
        if num_atoms < 1:
            raise ValueError("a block needs at least one neural atom")
        return cls(
            queries=parameter(rng, (num_atoms, dim), QUERY_INIT_STD),
            project_attention=MultiHeadParams.init(heads, dim, dim, dim, rng),
            exchange_attention=MultiHeadParams.init(heads, dim, dim, dim, rng),
            project_norm=LayerNormParams.init(dim),
            exchange_norm=LayerNormParams.init(dim),
        )

    def tensors(self) -> list[Tensor]:
        return [self.queries,
                *self.project_attention.tensors(), *self.exchange_attention.tensors(),
                *self.project_norm.tensors(), *self.exchange_norm.tensors()]


@dataclass
class NeuralAtomTrace:
    """Detached intermediates of one block application, for inspection/export."""

    atom_states: np.ndarray            # K x d, after projection
    exchanged_states: np.ndarray       # K x d, after atom self-attention
    allocation_per_head: list[np.ndarray]  # each K x N, rows sum to 1
    node_allocation: np.ndarray        # N x K, head mean transposed


def project_to_neural_atoms(h_nodes: Tensor, params: NeuralAtomLayerParams
                            ) -> tuple[Tensor, list[Tensor]]:
    """Attend from the atom queries onto the nodes; returns atom states and
    the per-head allocation matrices.

    The atoms see the nodes only through attention, so the result is
    invariant under any relabeling of the nodes.
    """
    attended: AttentionOutput = multi_head_attention(
        params.queries, h_nodes, h_nodes, params.project_attention)
    atoms = layer_norm(add(params.queries, attended.output),
                       params.project_norm.gain, params.project_norm.bias, LAYER_NORM_EPS)
    return atoms, attended.per_head_weights


def exchange_neural_atoms(h_atoms: Tensor, params: NeuralAtomLayerParams) -> Tensor:
    """Self-attention among the atoms: every atom reads every other in one hop."""
    attended = multi_head_attention(h_atoms, h_atoms, h_atoms, params.exchange_attention)
    return layer_norm(add(h_atoms, attended.output),
                      params.exchange_norm.gain, params.exchange_norm.bias, LAYER_NORM_EPS)


def aggregate_allocations(per_head_weights: list[Tensor]) -> Tensor:
    """Head-mean of the K x N allocation maps, transposed to N x K."""
    total = per_head_weights[0]
    for w in per_head_weights[1:]:
        total = add(total, w)
    return transpose(scale(total, 1.0 / len(per_head_weights)))


def backproject_and_enhance(h_nodes: Tensor, exchanged: Tensor,
                            per_head_weights: list[Tensor]) -> Tensor:
    """Carry exchanged atom states back to the nodes and add them on.

    The transport map is the head-averaged allocation from the projection
    step, so gradients flow through the attention weights themselves as
    well as through the atom states.
    """
    allocation = aggregate_allocations(per_head_weights)
    return add(h_nodes, matmul(allocation, exchanged))


def enhance_nodes(h_gnn: Tensor, params: NeuralAtomLayerParams,
                  want_trace: bool = True) -> tuple[Tensor, NeuralAtomTrace | None]:
    """The three neural-atom steps on already message-passed node states.

    Pass ``want_trace=False`` on hot paths to skip the detached copies.
    """
    atoms, head_weights = project_to_neural_atoms(h_gnn, params)
    exchanged = exchange_neural_atoms(atoms, params)
    enhanced = backproject_and_enhance(h_gnn, exchanged, head_weights)
    if not want_trace:
        return enhanced, None

    heads = [w.data.copy() for w in head_weights]
    trace = NeuralAtomTrace(
        atom_states=atoms.data.copy(),
        exchanged_states=exchanged.data.copy(),
        allocation_per_head=heads,
        node_allocation=(sum(heads) / len(heads)).T.copy(),
    )
    return enhanced, trace


def neural_atom_block(h_prev: Tensor, graph: MolecularGraph,
                      gnn_layer: Callable[[Tensor, MolecularGraph], Tensor],
                      params: NeuralAtomLayerParams) -> tuple[Tensor, NeuralAtomTrace]:
    """One full block: message passing, then the three neural-atom steps."""
    return enhance_nodes(gnn_layer(h_prev, graph), params)


def write_allocation_csv(node_allocation: np.ndarray, path) -> None:
    """One row per node, one column per neural atom, float values as repr."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_atoms = node_allocation.shape[1]
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node"] + [f"atom_{j}" for j in range(n_atoms)])
        for i, row in enumerate(node_allocation):
            writer.writerow([i] + [repr(float(v)) for v in row])

"""Message-passing layers: degree-normalised convolution and isomorphism-style sum.

Both layers aggregate over the closed neighbourhood (neighbours plus the node
itself, via an implicit self-loop) using :func:`indexed_weighted_sum`, so the
sparse adjacency never materialises as a dense matrix and the backward pass
is the transposed aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, indexed_weighted_sum, matmul, parameter, relu
from .graphs import MolecularGraph


@dataclass
class GcnLayerParams:
    """One weight matrix; the layer has no bias term."""

    weight: Tensor

    @classmethod
    def init(cls, dim_in: int, dim_out: int, rng: np.random.Generator,
             std: float | None = None):
        # fan-in scaling keeps activation variance flat across layers
        return cls(weight=parameter(rng, (dim_in, dim_out),
                                    dim_in ** -0.5 if std is None else std))


@dataclass
class GinLayerParams:
    """Two affine maps with a ReLU between them, applied after the sum."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim_in: int, dim_hidden: int, dim_out: int,
             rng: np.random.Generator, std: float | None = None):
        return cls(
            w1=parameter(rng, (dim_in, dim_hidden),
                         dim_in ** -0.5 if std is None else std),
            b1=Tensor(np.zeros(dim_hidden), requires_grad=True),
            w2=parameter(rng, (dim_hidden, dim_out),
                         dim_hidden ** -0.5 if std is None else std),
            b2=Tensor(np.zeros(dim_out), requires_grad=True),
        )


def _closed_neighborhood(graph: MolecularGraph) -> tuple[np.ndarray, np.ndarray]:
    """Directed (dst, src) index arrays for N(v) plus the self-loop."""
    n = graph.num_nodes
    dst = np.empty(2 * len(graph.edges) + n, dtype=np.intp)
    src = np.empty_like(dst)
    for k, (u, v) in enumerate(graph.edges):
        dst[2 * k], src[2 * k] = v, u
        dst[2 * k + 1], src[2 * k + 1] = u, v
    dst[2 * len(graph.edges):] = np.arange(n)
    src[2 * len(graph.edges):] = np.arange(n)
    return dst, src


def gcn_forward(h: Tensor, graph: MolecularGraph, params: GcnLayerParams) -> Tensor:
    """ReLU of the symmetrically degree-normalised neighbourhood sum times W.

    Each message from u to v is scaled by 1/sqrt(d_u * d_v) where d counts
    the self-loop, so an isolated node keeps exactly its own transformed
    feature.
    """
    if h.shape[0] != graph.num_nodes:
        raise ValueError(f"feature rows {h.shape[0]} != graph nodes {graph.num_nodes}")
    dst, src = _closed_neighborhood(graph)
    inv_sqrt = 1.0 / np.sqrt(graph.degrees() + 1.0)
    weights = inv_sqrt[dst] * inv_sqrt[src]
    agg = indexed_weighted_sum(h, dst, src, weights, num_out_rows=graph.num_nodes)
    return relu(matmul(agg, params.weight))


def gin_forward(h: Tensor, graph: MolecularGraph, params: GinLayerParams) -> Tensor:
    """Unweighted neighbourhood-plus-self sum pushed through a two-layer MLP."""
    if h.shape[0] != graph.num_nodes:
        raise ValueError(f"feature rows {h.shape[0]} != graph nodes {graph.num_nodes}")
    dst, src = _closed_neighborhood(graph)
    weights = np.ones(dst.shape[0])
    agg = indexed_weighted_sum(h, dst, src, weights, num_out_rows=graph.num_nodes)
    hidden = relu(add(matmul(agg, params.w1), params.b1))
    return add(matmul(hidden, params.w2), params.b2)

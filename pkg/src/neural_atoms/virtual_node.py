"""Virtual-node layer: a global state that pools and re-broadcasts each layer.

The comparison baseline for the neural-atom block.  A single extra node
receives the mean of all node states, updates through a small MLP, and is
added back to every node identically.  Because the broadcast is the same
for every node it cannot express node-specific long-range routing, which
is the behaviour the neural-atom tests contrast against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat_rows,
    matmul,
    mean_rows,
    neg,
    parameter,
    relu,
    rows,
    scale,
)


@dataclass
class VirtualNodeParams:
    """Two affine layers with a ReLU between them, mapping d to d."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "VirtualNodeParams":
        return cls(
            w1=parameter(rng, (dim, dim), dim ** -0.5),
            b1=Tensor(np.zeros(dim), requires_grad=True),
            w2=parameter(rng, (dim, dim), dim ** -0.5),
            b2=Tensor(np.zeros(dim), requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def _update_mlp(state: Tensor, params: VirtualNodeParams) -> Tensor:
    hidden = relu(add(matmul(state, params.w1), params.b1))
    return add(matmul(hidden, params.w2), params.b2)


def virtual_node_layer(h: Tensor, vstate: Tensor,
                       params: VirtualNodeParams) -> tuple[Tensor, Tensor]:
    """One round: pool nodes into the state, update it, broadcast it back.

    Returns the enhanced node states and the updated virtual-node state.
    """
    if vstate.shape[0] != 1 or vstate.shape[1] != h.shape[1]:
        raise ShapeError(
            f"virtual-node state must be (1, {h.shape[1]}), got {vstate.shape}")
    new_state = _update_mlp(add(vstate, mean_rows(h)), params)
    return add(h, new_state), new_state


def multi_virtual_node_layer(h: Tensor, vstates: Tensor,
                             params: VirtualNodeParams) -> tuple[Tensor, Tensor]:
    """Several fully connected virtual nodes sharing one update MLP.

    Each state sees the node pool plus the mean of the other states, and
    every updated state is broadcast back onto the nodes.  With one state
    this reduces exactly to ``virtual_node_layer``.
    """
    count = vstates.shape[0]
    if count < 1:
        raise ShapeError("need at least one virtual-node state")
    if vstates.shape[1] != h.shape[1]:
        raise ShapeError(
            f"virtual-node states must have width {h.shape[1]}, got {vstates.shape}")
    pooled = mean_rows(h)
    state_sum = scale(mean_rows(vstates), float(count))
    new_states = []
    for i in range(count):
        own = rows(vstates, i, i + 1)
        incoming = add(own, pooled)
        if count > 1:
            others = scale(add(state_sum, neg(own)), 1.0 / (count - 1))
            incoming = add(incoming, others)
        new_states.append(_update_mlp(incoming, params))
    out = h
    for state in new_states:
        out = add(out, state)
    return out, concat_rows(new_states)

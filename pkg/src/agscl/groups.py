"""Addressing of node groups.

Every hidden node owns one *group*: its incoming weights plus its bias. In
`NetworkParams` a hidden layer is stored as a matrix with one row per node
and the bias in the last column, so a group is always exactly one row. A
node's *outgoing* weights are column ranges in the rows of the next layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, NamedTuple, Sequence

import numpy as np

if TYPE_CHECKING:
    from agscl.network import LayerSpec, NetworkParams

__all__ = (
    "NodeId",
    "IncomingSlice",
    "OutgoingCoord",
    "GroupLayout",
    "build_layout",
    "group_view",
    "outgoing_coords",
    "node_rows",
)


class NodeId(NamedTuple):
    """A hidden node, addressed by 0-based layer and 0-based position."""

    layer: int
    node: int


class IncomingSlice(NamedTuple):
    """Location of a node's group: row `row` of hidden layer `layer`."""

    layer: int
    row: int
    size: int


class OutgoingCoord(NamedTuple):
    """Columns `start:stop` in the group of `upper` that read from a lower node.

    Dense-to-dense connections are one column wide. A conv channel feeding a
    conv layer owns one kernel slice per upper filter, and a conv channel
    feeding a dense layer owns all of its flattened spatial positions.
    """

    upper: NodeId
    start: int
    stop: int


@dataclass(frozen=True)
class GroupLayout:
    """Complete map from nodes to their incoming and outgoing coordinates."""

    specs: tuple
    nodes: tuple[NodeId, ...]
    incoming: Mapping[NodeId, IncomingSlice]
    outgoing: Mapping[NodeId, tuple[OutgoingCoord, ...]]

    @property
    def node_count(self) -> int:
        """Number of hidden nodes, |G|."""
        return len(self.nodes)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        """Number of nodes in each hidden layer."""
        return tuple(spec.node_count for spec in self.specs)

    @property
    def hidden_scalar_count(self) -> int:
        """Number of trainable hidden-layer scalars, biases included."""
        return sum(s.size for s in self.incoming.values())

    def layer_nodes(self, layer: int) -> tuple[NodeId, ...]:
        """All nodes of one hidden layer, in order."""
        return tuple(NodeId(layer, n) for n in range(self.specs[layer].node_count))


def _source_width(lower: LayerSpec, upper: LayerSpec) -> int:
    """Number of columns in an upper group fed by a single lower node."""
    if upper.kind == "conv2d":
        return upper.kernel_height * upper.kernel_width
    if lower.kind == "conv2d":
        return lower.out_height * lower.out_width
    return 1


def build_layout(specs: Sequence[LayerSpec]) -> GroupLayout:
    """Build the group layout of a validated layer chain.

    Args:
        specs: Hidden layer specifications, input side first

    Returns:
        The layout. Incoming slices partition all hidden parameters;
            outgoing coordinates of the last hidden layer are empty because
            output heads are not part of any group.

    Raises:
        ConfigurationError: `specs` is not a valid chain.
    """
    from agscl.network import validate_specs

    specs = tuple(specs)
    validate_specs(specs)

    nodes: list[NodeId] = []
    incoming: dict[NodeId, IncomingSlice] = {}
    outgoing: dict[NodeId, tuple[OutgoingCoord, ...]] = {}
    for layer, spec in enumerate(specs):
        upper = specs[layer + 1] if layer + 1 < len(specs) else None
        width = _source_width(spec, upper) if upper is not None else 0
        for n in range(spec.node_count):
            node = NodeId(layer, n)
            nodes.append(node)
            incoming[node] = IncomingSlice(layer, n, spec.group_size)
            if upper is None:
                outgoing[node] = ()
            else:
                outgoing[node] = tuple(
                    OutgoingCoord(NodeId(layer + 1, u), n * width, (n + 1) * width)
                    for u in range(upper.node_count)
                )

    return GroupLayout(
        specs=specs, nodes=tuple(nodes), incoming=incoming, outgoing=outgoing
    )


def group_view(
    params: NetworkParams, layout: GroupLayout, node: NodeId
) -> np.ndarray:
    """Writable view of a node's group θ_n (incoming weights, then bias).

    Raises:
        KeyError: `node` is not part of the layout.
    """
    try:
        where = layout.incoming[node]
    except KeyError:
        raise KeyError(f"Unknown node {node}") from None
    return params.layers[where.layer][where.row]


def outgoing_coords(layout: GroupLayout, node: NodeId) -> tuple[OutgoingCoord, ...]:
    """Coordinates of every weight that reads from `node` in the next layer."""
    try:
        return layout.outgoing[node]
    except KeyError:
        raise KeyError(f"Unknown node {node}") from None


def node_rows(layer_sizes: Sequence[int], nodes) -> list[np.ndarray]:
    """Boolean row selectors, one per hidden layer, marking `nodes`."""
    rows = [np.zeros(size, dtype=bool) for size in layer_sizes]
    for layer, n in nodes:
        rows[layer][n] = True
    return rows

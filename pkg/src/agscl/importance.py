"""Node importance and the bookkeeping done after each task.

After a task finishes, every hidden node's importance is refreshed from its
mean ReLU activation. Nodes with importance exactly zero are *unimportant*:
their outgoing weights are fixed at zero for good (a persistent mask), and
each of them is then re-drawn at random with some probability so it can learn
the next task. Re-drawing a node also releases the mask entries stored in its
own incoming group.
"""
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from agscl.exceptions import ConfigurationError, DataError
from agscl.groups import GroupLayout, NodeId, OutgoingCoord
from agscl.network import NetworkParams, initial_weights

logger = logging.getLogger(__name__)

__all__ = (
    "OmegaRegistry",
    "UnimportantSet",
    "ZeroMask",
    "update_omega",
    "derive_g0",
    "zero_init",
    "rand_init",
    "apply_mask",
)

UnimportantSet = frozenset[NodeId]


@dataclass
class OmegaRegistry:
    """Importance Ω of every hidden node, one float per node.

    Attributes:
        values: One non-negative array per hidden layer.
        eta: Decay applied to the previous importance at each update.
    """

    values: list[np.ndarray]
    eta: float = 0.9

    @classmethod
    def fresh(cls, layout: GroupLayout, eta: float = 0.9) -> "OmegaRegistry":
        """All-zero registry; every node starts out unimportant."""
        if not 0 < eta <= 1:
            raise ConfigurationError(f"eta must lie in (0, 1], got {eta}")
        return cls([np.zeros(n) for n in layout.layer_sizes], eta)

    def __getitem__(self, node: NodeId) -> float:
        layer, n = node
        if not (0 <= layer < len(self.values) and 0 <= n < len(self.values[layer])):
            raise KeyError(f"Unknown node {node}")
        return float(self.values[layer][n])

    def __len__(self) -> int:
        return sum(len(v) for v in self.values)

    def copy(self) -> "OmegaRegistry":
        """Deep copy."""
        return OmegaRegistry([v.copy() for v in self.values], self.eta)


def update_omega(
    omega: OmegaRegistry, activation_means: Mapping[NodeId, float]
) -> OmegaRegistry:
    """Decay every importance by η and add the node's mean activation.

    Args:
        omega: Registry holding the importances before the task
        activation_means: Mean ReLU activation of every node on the task's
            training data

    Returns:
        A new registry.

    Raises:
        DataError: A mean is negative or a node has no mean.
    """
    updated = omega.copy()
    expected = len(omega)
    if len(activation_means) != expected:
        raise DataError(
            f"Activation means cover {len(activation_means)} of {expected} nodes"
        )
    for (layer, n), mean in activation_means.items():
        if not mean >= 0:
            raise DataError(f"Negative mean activation {mean} for node {(layer, n)}")
        if not (
            0 <= layer < len(omega.values) and 0 <= n < len(omega.values[layer])
        ):
            raise DataError(f"Activation mean for unknown node {(layer, n)}")
        updated.values[layer][n] = omega.eta * omega.values[layer][n] + mean
    return updated


def derive_g0(omega: OmegaRegistry, tau: float | None = None) -> UnimportantSet:
    """Set of unimportant nodes.

    Without `tau` a node is unimportant exactly when its importance is zero.
    With `tau` (used when training has no proximal step and so never produces
    exact zeros) the test becomes `Ω < tau`.
    """
    nodes = []
    for layer, values in enumerate(omega.values):
        hits = values == 0.0 if tau is None else values < tau
        nodes.extend(NodeId(layer, int(n)) for n in np.flatnonzero(hits))
    return frozenset(nodes)


@dataclass
class ZeroMask:
    """Weights permanently fixed at zero.

    Attributes:
        entries: Each masked coordinate range and the task that created it.
        masks: Boolean array per hidden layer, shaped like that layer's
            parameter matrix, kept in sync with `entries`.
    """

    entries: dict[OutgoingCoord, int] = field(default_factory=dict)
    masks: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def empty(cls, layout: GroupLayout) -> "ZeroMask":
        """Mask with no entries."""
        return cls(
            {}, [np.zeros((s.node_count, s.group_size), bool) for s in layout.specs]
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, coord: OutgoingCoord) -> bool:
        return coord in self.entries

    def add(self, coord: OutgoingCoord, task: int) -> None:
        """Mask a coordinate range; the first creating task is kept."""
        self.entries.setdefault(coord, task)
        upper, start, stop = coord
        self.masks[upper.layer][upper.node, start:stop] = True

    def release(self, upper: NodeId) -> int:
        """Drop every entry stored in `upper`'s group and return how many."""
        owned = [c for c in self.entries if c.upper == upper]
        for coord in owned:
            del self.entries[coord]
        self.masks[upper.layer][upper.node, :] = False
        return len(owned)

    def copy(self) -> "ZeroMask":
        """Deep copy."""
        return ZeroMask(dict(self.entries), [m.copy() for m in self.masks])


def apply_mask(params: NetworkParams, mask: ZeroMask) -> NetworkParams:
    """Force every masked coordinate to exactly zero, in place."""
    for layer, m in zip(params.layers, mask.masks):
        layer[m] = 0.0
    return params


def zero_init(
    params: NetworkParams,
    layout: GroupLayout,
    g0: UnimportantSet,
    mask: ZeroMask,
    task: int = 0,
) -> tuple[NetworkParams, ZeroMask]:
    """Cut every unimportant node off from the layer above.

    All outgoing weights of each node in `g0` are set to zero and masked.
    Output heads are never touched. Works in place and returns its inputs.
    """
    for node in sorted(g0):
        for coord in layout.outgoing[node]:
            mask.add(coord, task)
    apply_mask(params, mask)
    logger.debug("zero-init masked %d coordinate ranges", len(mask))
    return params, mask


def rand_init(
    params: NetworkParams,
    layout: GroupLayout,
    g0: UnimportantSet,
    mask: ZeroMask,
    rho: float,
    rng: np.random.Generator,
) -> tuple[NetworkParams, ZeroMask]:
    """Re-draw the incoming group of each unimportant node with probability ρ.

    Selected nodes get fresh weights from the initialization distribution
    and a zero bias; mask entries stored in their group are released so
    those weights can train again. Must run after `zero_init` for the same
    task. Works in place and returns its inputs.

    Raises:
        ConfigurationError: ρ is outside (0, 1].
    """
    if not 0 < rho <= 1:
        raise ConfigurationError(f"rho must lie in (0, 1], got {rho}")

    ordered = sorted(g0)
    picks = rng.random(len(ordered)) < rho
    released = 0
    for node, picked in zip(ordered, picks):
        if not picked:
            continue
        spec = layout.specs[node.layer]
        row = params.layers[node.layer][node.node]
        row[:-1] = initial_weights(rng, spec.fan_in, (spec.fan_in,))
        row[-1] = 0.0
        released += mask.release(node)

    logger.debug(
        "rand-init re-drew %d of %d unimportant nodes, released %d mask entries",
        int(picks.sum()),
        len(ordered),
        released,
    )
    return params, mask

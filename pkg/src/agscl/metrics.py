"""Measurements taken while a task stream is learned.

Examples:
    >>> m = AccuracyMatrix.empty(2)
    >>> record_accuracy(m, 0, 0, 0.9)
    >>> average_accuracy(m, 0)
    0.9
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from agscl.groups import GroupLayout, NodeId, node_rows
from agscl.importance import OmegaRegistry
from agscl.network import LabeledBatch, NetworkParams, accuracy

logger = logging.getLogger(__name__)

__all__ = (
    "AccuracyMatrix",
    "CapacityReport",
    "AopcCurve",
    "RegParamCount",
    "record_accuracy",
    "average_accuracy",
    "plasticity_vector",
    "plasticity",
    "stability_vector",
    "stability",
    "sparsity",
    "frozen_count",
    "used_capacity",
    "aopc_curve",
    "aopc_area",
    "reg_param_count",
)

AopcMode = Literal["highest", "lowest", "random"]


@dataclass
class AccuracyMatrix:
    """Accuracy of task `j` after training task `i`, for `j <= i`.

    Attributes:
        values: `(T, T)` array, NaN where nothing was recorded.
        reference: Optional accuracies of the fine-tuning baseline on each
            task right after learning it.
    """

    values: np.ndarray
    reference: np.ndarray | None = None

    @classmethod
    def empty(cls, n_tasks: int, reference=None) -> "AccuracyMatrix":
        """Matrix with nothing recorded."""
        if reference is not None:
            reference = np.asarray(reference, dtype=np.float64)
        return cls(np.full((n_tasks, n_tasks), np.nan), reference)

    @property
    def n_tasks(self) -> int:
        """Length of the task stream."""
        return self.values.shape[0]

    @property
    def completed(self) -> int:
        """Number of leading rows with every `j <= i` entry recorded."""
        for i in range(self.n_tasks):
            if np.isnan(self.values[i, : i + 1]).any():
                return i
        return self.n_tasks

    def _check(self, i: int, j: int) -> None:
        if not (0 <= j <= i < self.n_tasks):
            raise IndexError(
                f"A[{i}, {j}] is not defined for a {self.n_tasks}-task stream"
            )

    def __getitem__(self, key: tuple[int, int]) -> float:
        i, j = key
        self._check(i, j)
        return float(self.values[i, j])

    def diagonal(self) -> np.ndarray:
        """Accuracy of each task right after learning it."""
        return np.diag(self.values).copy()

    def lower_triangle(self) -> list[tuple[int, int, float]]:
        """Recorded `(i, j, accuracy)` triples in row order."""
        return [
            (i, j, float(self.values[i, j]))
            for i in range(self.n_tasks)
            for j in range(i + 1)
            if not np.isnan(self.values[i, j])
        ]


def record_accuracy(matrix: AccuracyMatrix, i: int, j: int, acc: float) -> None:
    """Store the accuracy of task `j` measured after training task `i`.

    Raises:
        IndexError: `j > i` or either index is outside the stream.
        ValueError: `acc` is not in [0, 1].
    """
    matrix._check(i, j)
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"Accuracy must lie in [0, 1], got {acc}")
    matrix.values[i, j] = acc


def average_accuracy(matrix: AccuracyMatrix, i: int) -> float:
    """Mean accuracy over tasks `0..i` after training task `i`."""
    matrix._check(i, i)
    return float(np.mean(matrix.values[i, : i + 1]))


def plasticity_vector(matrix: AccuracyMatrix) -> list[float | None]:
    """Per-task ratio `A[i, i] / A*[i]` over the completed tasks.

    Entries are `None` when there is no reference or the reference is zero.
    """
    done = matrix.completed
    if matrix.reference is None:
        return [None] * done
    out = []
    for i in range(done):
        ref = float(matrix.reference[i])
        out.append(float(matrix.values[i, i]) / ref if ref > 0 else None)
    return out


def plasticity(matrix: AccuracyMatrix) -> float | None:
    """Average of `plasticity_vector`; `None` if any entry is missing."""
    vector = plasticity_vector(matrix)
    if not vector or any(v is None for v in vector):
        logger.warning("plasticity is undefined without a nonzero reference")
        return None
    return float(np.mean(vector))


def stability_vector(matrix: AccuracyMatrix) -> list[float | None]:
    """Per-task ratio of final accuracy to the best accuracy ever seen.

    Uses the last completed row as "final". Entries are `None` when the best
    accuracy is zero.
    """
    done = matrix.completed
    out = []
    for j in range(done):
        best = float(np.max(matrix.values[j:done, j]))
        final = float(matrix.values[done - 1, j])
        out.append(final / best if best > 0 else None)
    return out


def stability(matrix: AccuracyMatrix) -> float | None:
    """Average of `stability_vector`; `None` if any entry is missing.

    Examples:
        >>> m = AccuracyMatrix.empty(2)
        >>> for i, j, a in [(0, 0, 0.5), (1, 0, 0.5), (1, 1, 0.75)]:
        ...     record_accuracy(m, i, j, a)
        >>> stability(m)
        1.0
    """
    vector = stability_vector(matrix)
    if not vector or any(v is None for v in vector):
        return None
    return float(np.mean(vector))


@dataclass(frozen=True)
class CapacityReport:
    """Capacity figures recorded after one task.

    Attributes:
        task: 0-based task index.
        sparsity: Fraction of nodes that are unimportant.
        used_capacity: Fraction of nodes whose group did not move during the
            task; zero for the first task.
        g0_size: Number of unimportant nodes.
        frozen_count: Number of nodes whose group did not move.
        reg_param_count: Number of stored regularization strengths.
    """

    task: int
    sparsity: float
    used_capacity: float
    g0_size: int
    frozen_count: int
    reg_param_count: int


def sparsity(g0_size: int, total_nodes: int) -> float:
    """Fraction of unimportant nodes.

    Raises:
        ValueError: `total_nodes` is not positive or `g0_size` is out of range.
    """
    if total_nodes <= 0:
        raise ValueError("A network needs at least one node")
    if not 0 <= g0_size <= total_nodes:
        raise ValueError(f"{g0_size} unimportant nodes out of {total_nodes}")
    return g0_size / total_nodes


def _frozen_rows(
    layer: np.ndarray, before: np.ndarray, tau: float | None
) -> np.ndarray:
    if tau is None:
        same = layer.view(np.uint64) == np.ascontiguousarray(before).view(np.uint64)
        return same.all(axis=1)
    return np.linalg.norm(layer - before, axis=1) < tau


def frozen_count(params: NetworkParams, prev, tau: float | None = None) -> int:
    """Number of groups that did not move since `prev`.

    Without `tau` the comparison is bitwise; with it, a group is frozen when
    its drift norm is below `tau`.
    """
    return int(
        sum(
            _frozen_rows(np.ascontiguousarray(layer), before, tau).sum()
            for layer, before in zip(params.layers, prev.layers)
        )
    )


def used_capacity(
    params: NetworkParams, prev, layout: GroupLayout, tau: float | None = None
) -> float:
    """Fraction of groups that did not move since `prev`."""
    return frozen_count(params, prev, tau) / layout.node_count


@dataclass(frozen=True)
class AopcCurve:
    """Accuracy as more and more nodes are switched off.

    Attributes:
        mode: Pruning order, by importance (`"highest"` or `"lowest"` first)
            or `"random"`.
        fractions: Fractions of all hidden nodes switched off.
        accuracies: Mean accuracy at each fraction.
        snapshot: 0-based index of the task after which the curve was taken.
    """

    mode: str
    fractions: tuple[float, ...]
    accuracies: tuple[float, ...]
    snapshot: int

    @property
    def area(self) -> float:
        """Area under the accuracy-drop curve."""
        return aopc_area(self)


def _prune_order(
    omega: OmegaRegistry, mode: AopcMode, rng: np.random.Generator | None
) -> list[NodeId]:
    nodes = [
        (float(value), NodeId(layer, n))
        for layer, values in enumerate(omega.values)
        for n, value in enumerate(values)
    ]
    if mode == "highest":
        return [node for _, node in sorted(nodes, key=lambda x: (-x[0], x[1]))]
    if mode == "lowest":
        return [node for _, node in sorted(nodes, key=lambda x: (x[0], x[1]))]
    if mode == "random":
        if rng is None:
            raise ValueError("Random pruning order needs a generator")
        ordered = sorted(node for _, node in nodes)
        return [ordered[i] for i in rng.permutation(len(ordered))]
    raise ValueError(f"Unknown pruning order {mode!r}")


def aopc_curve(
    params: NetworkParams,
    omega: OmegaRegistry,
    evaluations: Sequence[tuple[int, LabeledBatch]],
    mode: AopcMode,
    fractions: Sequence[float],
    *,
    rng: np.random.Generator | None = None,
    snapshot: int = 0,
) -> AopcCurve:
    """Accuracy while switching off nodes in order of importance.

    For each fraction `f`, the first `ceil(f * |G|)` nodes of the chosen order
    have their activations forced to zero and the mean accuracy over
    `evaluations` is measured. Ties in importance go to the smaller node.
    Parameters are not modified.

    Args:
        params: Trained parameters
        omega: Node importances
        evaluations: `(task_id, split)` pairs to average accuracy over
        mode: `"highest"`, `"lowest"` or `"random"`
        fractions: Ascending fractions starting at 0
        rng: Generator for the random order
        snapshot: Task index recorded with the curve

    Returns:
        The curve.

    Raises:
        ValueError: Fractions are not ascending from 0 or `mode` is unknown.
    """
    fractions = tuple(float(f) for f in fractions)
    if not fractions or fractions[0] != 0 or list(fractions) != sorted(fractions):
        raise ValueError("Fractions must be ascending and start at 0")
    if not evaluations:
        raise ValueError("AOPC needs at least one evaluation split")

    order = _prune_order(omega, mode, rng)
    sizes = [len(values) for values in omega.values]
    accuracies = []
    for f in fractions:
        k = min(math.ceil(round(f * len(order), 9)), len(order))
        dropped = None
        if k:
            dropped = node_rows(sizes, order[:k])
        scores = [
            accuracy(params, split, task_id, dropped=dropped)
            for task_id, split in evaluations
        ]
        accuracies.append(float(np.mean(scores)))

    return AopcCurve(mode, fractions, tuple(accuracies), snapshot)


def aopc_area(curve: AopcCurve) -> float:
    """Trapezoid-rule area under the accuracy drop `acc(0) - acc(f)`."""
    acc = np.asarray(curve.accuracies)
    return float(np.trapezoid(acc[0] - acc, np.asarray(curve.fractions)))


class RegParamCount(NamedTuple):
    """Storage needed for regularization strengths, node-wise vs weight-wise."""

    node_count: int
    weight_count: int
    ratio: float


def reg_param_count(layout: GroupLayout) -> RegParamCount:
    """Count the stored importances against a one-per-weight scheme.

    Examples:
        >>> from agscl.groups import build_layout
        >>> from agscl.network import LayerSpec
        >>> specs = [LayerSpec.dense(784, 100), LayerSpec.dense(100, 100)]
        >>> layout = build_layout(specs)
        >>> reg_param_count(layout)[:2]
        (200, 88600)
    """
    nodes = layout.node_count
    weights = layout.hidden_scalar_count
    return RegParamCount(nodes, weights, nodes / weights)

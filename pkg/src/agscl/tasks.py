"""Task streams and the data behind them.

A task stream is an ordered list of classification tasks, each with its own
label space `0..C_t - 1` and its own output head. Streams are built from
seeded Gaussian clusters (no files needed) or from an IDX image dataset,
either split by class or with a fixed pixel permutation per task.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from agscl.exceptions import ConfigurationError, DataError, IdxFormatError
from agscl.network import LabeledBatch
from agscl.utils import open_maybe_compressed, substream

logger = logging.getLogger(__name__)

__all__ = (
    "LabeledBatch",
    "Task",
    "TaskStream",
    "IdxDataset",
    "iterate_batches",
    "load_idx",
    "synth_tasks",
    "split_tasks",
    "permuted_tasks",
)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Task:
    """One classification task.

    Attributes:
        task_id: Position in the stream, which is also the head index.
        name: Human-readable name, e.g. `"classes 0,1"`.
        n_classes: Size of the task's label space.
        train: Training split.
        val: Validation split, used for learning-rate decay.
        test: Test split, used for the accuracy matrix.
        classes: Original labels of the task's classes, in remapped order.
        permutation: Pixel permutation applied to the inputs, if any.
    """

    task_id: int
    name: str
    n_classes: int
    train: LabeledBatch
    val: LabeledBatch
    test: LabeledBatch
    classes: tuple[int, ...] = ()
    permutation: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class TaskStream:
    """Tasks in the order they are learned."""

    tasks: tuple[Task, ...]
    input_shape: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, index: int) -> Task:
        return self.tasks[index]

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    @property
    def head_dims(self) -> tuple[int, ...]:
        """Number of classes of each task, in stream order."""
        return tuple(task.n_classes for task in self.tasks)

    def reordered(self, order: Sequence[int]) -> "TaskStream":
        """Same tasks in a new order, renumbered from 0."""
        if sorted(order) != list(range(len(self.tasks))):
            raise ConfigurationError(f"{list(order)} is not a task order")
        tasks = tuple(
            replace(self.tasks[old], task_id=new) for new, old in enumerate(order)
        )
        return TaskStream(tasks, self.input_shape)


@dataclass(frozen=True)
class IdxDataset:
    """Images scaled to [0, 1] and their labels.

    Attributes:
        images: `(N, H, W)` float64 array.
        labels: `(N,)` uint8 array.
    """

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int]:
        """Height and width of one image."""
        return self.images.shape[1], self.images.shape[2]

    def flat(self) -> np.ndarray:
        """Images as `(N, H * W)` rows."""
        return self.images.reshape(len(self.images), -1)


def iterate_batches(split: LabeledBatch, batch_size: int) -> Iterator[LabeledBatch]:
    """Consecutive minibatches of a split, in order."""
    for start in range(0, len(split.labels), batch_size):
        stop = start + batch_size
        yield LabeledBatch(split.inputs[start:stop], split.labels[start:stop])


def _read_idx(
    path: str | os.PathLike, magic: int, ndim: int, kind: str
) -> np.ndarray:
    try:
        with open_maybe_compressed(path) as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"Could not read {path}: {e}") from e

    header = 4 + 4 * ndim
    if len(data) < 4:
        raise IdxFormatError(
            f"{path}: truncated at byte offset 0: expected 4 header bytes, "
            f"found {len(data)}"
        )
    found = int.from_bytes(data[:4], "big")
    if found != magic:
        raise IdxFormatError(
            f"{path}: byte offset 0: expected {kind} magic {magic:#010x}, "
            f"found {found:#010x}"
        )
    if len(data) < header:
        raise IdxFormatError(
            f"{path}: truncated at byte offset {len(data)}: expected {header} "
            f"header bytes, found {len(data)}"
        )
    dims = tuple(int(d) for d in np.frombuffer(data, ">u4", count=ndim, offset=4))
    expected = int(np.prod(dims))
    actual = len(data) - header
    if actual != expected:
        raise IdxFormatError(
            f"{path}: byte offset {header}: expected {expected} bytes of {kind} "
            f"data, found {actual}"
        )
    return np.frombuffer(data, np.uint8, offset=header).reshape(dims)


def load_idx(
    images_path: str | os.PathLike, labels_path: str | os.PathLike
) -> IdxDataset:
    """Read an IDX image file and its matching label file.

    Files ending in ".gz" are inflated on the fly.

    Args:
        images_path: Big-endian IDX file with magic `0x00000803`
        labels_path: Big-endian IDX file with magic `0x00000801`

    Returns:
        The dataset, pixels scaled to [0, 1].

    Raises:
        IdxFormatError: A file has the wrong magic number, a truncated
            payload, or the image and label counts differ.
        DataError: A file cannot be read.
    """
    pixels = _read_idx(images_path, IMAGES_MAGIC, 3, "image")
    labels = _read_idx(labels_path, LABELS_MAGIC, 1, "label")
    if len(pixels) != len(labels):
        raise IdxFormatError(
            f"{len(pixels)} images in {images_path} but {len(labels)} labels "
            f"in {labels_path}"
        )
    logger.info("loaded %d images of shape %s", len(pixels), pixels.shape[1:])
    return IdxDataset(pixels.astype(np.float64) / 255.0, labels.copy())


def _three_way(
    inputs: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    val_fraction: float,
    test_fraction: float,
) -> tuple[LabeledBatch, LabeledBatch, LabeledBatch]:
    n = len(labels)
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    test_idx = np.sort(order[:n_test])
    val_idx = np.sort(order[n_test : n_test + n_val])
    train_idx = np.sort(order[n_test + n_val :])
    return tuple(
        LabeledBatch(inputs[idx], labels[idx]) for idx in (train_idx, val_idx, test_idx)
    )


def synth_tasks(
    n_tasks: int,
    classes_per_task: int,
    dim: int,
    samples: int,
    separation: float,
    seed: int,
) -> TaskStream:
    """Gaussian-cluster classification tasks.

    Each class is a unit-covariance Gaussian whose mean lies on a sphere of
    radius `separation`. Every task gets `samples` points per class, split
    80/10/10 into train, validation and test.

    Raises:
        ConfigurationError: A count is below 1 or `separation` is negative.

    Examples:
        >>> stream = synth_tasks(2, 3, 4, 10, 5.0, seed=0)
        >>> stream.head_dims, stream[0].train.inputs.shape
        ((3, 3), (24, 4))
    """
    if min(n_tasks, classes_per_task, dim, samples) < 1:
        raise ConfigurationError("Synthetic task sizes must be at least 1")
    if separation < 0:
        raise ConfigurationError("Cluster separation must be non-negative")

    rng = substream(seed, "synth_tasks")
    tasks = []
    for t in range(n_tasks):
        directions = rng.normal(size=(classes_per_task, dim))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        means = separation * directions / np.where(norms > 0, norms, 1.0)
        labels = np.repeat(np.arange(classes_per_task), samples)
        inputs = means[labels] + rng.normal(size=(len(labels), dim))
        train, val, test = _three_way(inputs, labels, rng, 0.1, 0.1)
        first = t * classes_per_task
        classes = tuple(range(first, first + classes_per_task))
        tasks.append(
            Task(t, f"synthetic {t}", classes_per_task, train, val, test, classes)
        )
    return TaskStream(tuple(tasks), (dim,))


def _check_partition(partition: Sequence[Sequence[int]]) -> None:
    seen: set[int] = set()
    for cell in partition:
        if len(cell) == 0:
            raise ConfigurationError("Class partition cells must not be empty")
        overlap = seen.intersection(cell)
        if overlap or len(set(cell)) != len(cell):
            raise ConfigurationError(
                f"Class partition cells overlap on {sorted(overlap) or list(cell)}"
            )
        seen.update(cell)


def _select(
    dataset: IdxDataset, cell: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    keep = np.isin(dataset.labels, cell)
    lookup = {c: i for i, c in enumerate(cell)}
    labels = np.array([lookup[int(y)] for y in dataset.labels[keep]], dtype=np.intp)
    return dataset.flat()[keep], labels


def split_tasks(
    dataset: IdxDataset,
    class_partition: Sequence[Sequence[int]],
    seed: int,
    *,
    test: IdxDataset | None = None,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
) -> TaskStream:
    """One task per cell of a class partition.

    Task `j` holds exactly the examples whose label is in cell `j`, relabeled
    by position within the cell. A validation fraction of each task is held
    out; the test split comes from `test` when given and is otherwise held
    out from `dataset` as well.

    Raises:
        ConfigurationError: Cells overlap or are empty.
        DataError: A cell has no examples.
    """
    _check_partition(class_partition)
    rng = substream(seed, "split_tasks")
    tasks = []
    for j, cell in enumerate(class_partition):
        cell = [int(c) for c in cell]
        inputs, labels = _select(dataset, cell)
        if len(labels) == 0:
            raise DataError(f"No examples for classes {cell}")
        if test is None:
            train, val, held = _three_way(
                inputs, labels, rng, val_fraction, test_fraction
            )
        else:
            train, val, _ = _three_way(inputs, labels, rng, val_fraction, 0.0)
            held = LabeledBatch(*_select(test, cell))
        name = "classes " + ",".join(str(c) for c in cell)
        tasks.append(Task(j, name, len(cell), train, val, held, tuple(cell)))
    return TaskStream(tuple(tasks), (1,) + dataset.image_shape)


def permuted_tasks(
    dataset: IdxDataset,
    n_tasks: int,
    seed: int,
    *,
    test: IdxDataset | None = None,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
) -> TaskStream:
    """Tasks that share all classes but shuffle the pixels differently.

    The first task uses the identity permutation; every later task draws its
    own fixed permutation from `seed`.

    Raises:
        ConfigurationError: `n_tasks` is below 1.
    """
    if n_tasks < 1:
        raise ConfigurationError("A permuted stream needs at least one task")
    classes = tuple(int(c) for c in np.unique(dataset.labels))
    inputs, labels = _select(dataset, classes)
    split_rng = substream(seed, "permuted_split")
    if test is None:
        train, val, held = _three_way(
            inputs, labels, split_rng, val_fraction, test_fraction
        )
    else:
        train, val, _ = _three_way(inputs, labels, split_rng, val_fraction, 0.0)
        held = LabeledBatch(*_select(test, classes))

    rng = substream(seed, "permutations")
    size = inputs.shape[1]
    tasks = []
    for t in range(n_tasks):
        perm = np.arange(size) if t == 0 else rng.permutation(size)
        splits = [LabeledBatch(s.inputs[:, perm], s.labels) for s in (train, val, held)]
        tasks.append(Task(t, f"permutation {t}", len(classes), *splits, classes, perm))
    return TaskStream(tuple(tasks), (1,) + dataset.image_shape)

"""Proximal gradient training with adaptive moments.

Each epoch runs plain Adam steps on the task loss and then applies the
closed-form group proximal map once to every hidden node:

* unimportant nodes get group-Lasso shrinkage toward zero, with threshold
  `lr * mu`;
* important nodes are pulled toward their value after the previous task, with
  threshold `lr * lambda * omega`.

Both maps land *exactly* on their target once the group is within the
threshold, which is what lets whole nodes be switched off or frozen.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np

from agscl.config import Hyperparams
from agscl.exceptions import NumericError
from agscl.groups import GroupLayout, node_rows
from agscl.importance import OmegaRegistry, UnimportantSet, ZeroMask, apply_mask
from agscl.network import (
    GradientSet,
    LabeledBatch,
    NetworkParams,
    evaluate_loss,
    task_loss_and_grad,
)

logger = logging.getLogger(__name__)

__all__ = (
    "AdamState",
    "PrevParams",
    "PlateauScheduler",
    "TaskTrainingResult",
    "gradient_step",
    "prox_group_lasso",
    "prox_group_freeze",
    "prox_sweep",
    "regularization_loss",
    "penalty_gradient",
    "lr_schedule_step",
    "train_task",
)


@dataclass
class AdamState:
    """First and second moment estimates, shaped like the parameters."""

    m_layers: list[np.ndarray]
    v_layers: list[np.ndarray]
    m_heads: list[np.ndarray]
    v_heads: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(
        cls,
        params: NetworkParams,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> "AdamState":
        """Zero moments and a zero step counter."""
        return cls(
            m_layers=[np.zeros_like(a) for a in params.layers],
            v_layers=[np.zeros_like(a) for a in params.layers],
            m_heads=[np.zeros_like(a) for a in params.heads],
            v_heads=[np.zeros_like(a) for a in params.heads],
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
        )


def _adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    adam: AdamState,
    lr: float,
) -> None:
    m *= adam.beta1
    m += (1 - adam.beta1) * grad
    v *= adam.beta2
    v += (1 - adam.beta2) * grad * grad
    m_hat = m / (1 - adam.beta1**adam.step)
    v_hat = v / (1 - adam.beta2**adam.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + adam.eps)


def gradient_step(
    params: NetworkParams,
    grads: GradientSet,
    adam: AdamState,
    lr: float,
    *,
    task_id: int,
    mask: ZeroMask | None = None,
) -> NetworkParams:
    """One bias-corrected Adam step, in place.

    Only the hidden layers and the head of `task_id` move. Masked
    coordinates have their gradient zeroed before it reaches the moments and
    are forced back to zero afterwards.

    Raises:
        NumericError: A gradient is not finite. Nothing is modified.
    """
    arrays = grads.layers + [grads.heads[task_id]]
    if not all(np.isfinite(g).all() for g in arrays):
        raise NumericError("Non-finite gradient encountered")

    adam.step += 1
    for i, (param, grad) in enumerate(zip(params.layers, grads.layers)):
        if mask is not None:
            grad = np.where(mask.masks[i], 0.0, grad)
        _adam_update(param, grad, adam.m_layers[i], adam.v_layers[i], adam, lr)
    _adam_update(
        params.heads[task_id],
        grads.heads[task_id],
        adam.m_heads[task_id],
        adam.v_heads[task_id],
        adam,
        lr,
    )
    if mask is not None:
        apply_mask(params, mask)
    return params


def _check_threshold(threshold) -> np.ndarray:
    threshold = np.asarray(threshold, dtype=np.float64)
    if np.any(threshold < 0):
        raise ValueError("Proximal thresholds must be non-negative")
    return threshold


def _shrink_rows(rows: np.ndarray, threshold: np.ndarray) -> np.ndarray:
    """Group-Lasso prox applied to every row of a matrix."""
    norms = np.linalg.norm(rows, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.maximum(1.0 - threshold / norms, 0.0)
    shrunk = np.expand_dims(gamma, -1) * rows
    out = np.where(np.expand_dims(norms <= threshold, -1), 0.0, shrunk)
    return np.where(np.expand_dims(threshold == 0, -1), rows, out)


def _freeze_rows(
    rows: np.ndarray, anchor: np.ndarray, threshold: np.ndarray
) -> np.ndarray:
    """Freeze prox applied to every row of a matrix."""
    drift = rows - anchor
    norms = np.linalg.norm(drift, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.maximum(1.0 - threshold / norms, 0.0)
    g = np.expand_dims(gamma, -1)
    moved = g * rows + (1.0 - g) * anchor
    out = np.where(np.expand_dims(norms <= threshold, -1), anchor, moved)
    return np.where(np.expand_dims(threshold == 0, -1), rows, out)


def prox_group_lasso(v: np.ndarray, threshold: float) -> np.ndarray:
    """Proximal map of `threshold * ||.||_2`.

    Returns `(1 - threshold / ||v||)_+ * v`, which is the exact zero vector
    whenever `||v|| <= threshold`.

    Raises:
        ValueError: `threshold` is negative.

    Examples:
        >>> prox_group_lasso(np.array([3.0, 0.0]), 1.0)
        array([2., 0.])
        >>> prox_group_lasso(np.array([0.3, 0.4]), 1.0)
        array([0., 0.])
    """
    t = _check_threshold(threshold)
    return _shrink_rows(np.asarray(v, dtype=np.float64), t)


def prox_group_freeze(
    v: np.ndarray, anchor: np.ndarray, threshold: float
) -> np.ndarray:
    """Proximal map of `threshold * ||. - anchor||_2`.

    Moves `v` toward `anchor` by `threshold` along the segment joining them,
    and returns `anchor` itself (bitwise) when it is within reach.

    Raises:
        ValueError: `threshold` is negative or the shapes differ.
    """
    t = _check_threshold(threshold)
    v = np.asarray(v, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if v.shape != anchor.shape:
        raise ValueError(f"Shape mismatch: {v.shape} vs {anchor.shape}")
    return _freeze_rows(v, anchor, t)


@dataclass(frozen=True)
class PrevParams:
    """Read-only snapshot of the hidden layers at the end of the previous task."""

    layers: tuple[np.ndarray, ...]

    @classmethod
    def from_params(cls, params: NetworkParams) -> "PrevParams":
        """Copy the hidden layers of `params` and lock the copies."""
        layers = []
        for layer in params.layers:
            frozen = layer.copy()
            frozen.flags.writeable = False
            layers.append(frozen)
        return cls(tuple(layers))


def _layer_thresholds(
    omega: OmegaRegistry, g0_rows: list[np.ndarray], hp: Hyperparams, lr: float
) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for values, unimportant in zip(omega.values, g0_rows):
        lasso = np.where(unimportant, lr * hp.effective_mu, 0.0)
        freeze = np.where(unimportant, 0.0, lr * hp.effective_lam * values)
        out.append((lasso, freeze))
    return out


def _g0_rows(omega: OmegaRegistry, g0: UnimportantSet | None) -> list[np.ndarray]:
    if g0 is None:
        return [values == 0.0 for values in omega.values]
    return node_rows([len(values) for values in omega.values], g0)


def prox_sweep(
    params: NetworkParams,
    layout: GroupLayout,
    omega: OmegaRegistry,
    prev: PrevParams,
    hp: Hyperparams,
    lr: float,
    g0: UnimportantSet | None = None,
    mask: ZeroMask | None = None,
) -> NetworkParams:
    """Apply the proximal map to every hidden node group, in place.

    Nodes in the unimportant set (by default those with Ω exactly zero) are
    shrunk toward zero with threshold `lr * mu`; all others are pulled toward
    `prev` with threshold `lr * lambda * Ω`. Output heads are untouched.
    """
    if len(params.layers) != len(layout.specs):
        raise ValueError("Parameters do not match the group layout")
    g0_rows = _g0_rows(omega, g0)
    thresholds = _layer_thresholds(omega, g0_rows, hp, lr)
    for index, layer in enumerate(params.layers):
        unimportant = g0_rows[index]
        lasso, freeze = thresholds[index]
        shrunk = _shrink_rows(layer, lasso)
        frozen = _freeze_rows(layer, prev.layers[index], freeze)
        layer[...] = np.where(unimportant[:, None], shrunk, frozen)
    if mask is not None:
        apply_mask(params, mask)
    return params


def regularization_loss(
    params: NetworkParams,
    omega: OmegaRegistry,
    prev: PrevParams,
    hp: Hyperparams,
    g0: UnimportantSet | None = None,
) -> float:
    """Value of the node-wise penalty that the proximal sweep handles exactly."""
    total = 0.0
    for index, unimportant in enumerate(_g0_rows(omega, g0)):
        layer = params.layers[index]
        norms = np.linalg.norm(layer, axis=1)
        drift = np.linalg.norm(layer - prev.layers[index], axis=1)
        total += hp.effective_mu * norms[unimportant].sum()
        total += hp.effective_lam * (omega.values[index] * drift)[~unimportant].sum()
    return float(total)


def penalty_gradient(
    params: NetworkParams,
    omega: OmegaRegistry,
    prev: PrevParams,
    hp: Hyperparams,
    g0: UnimportantSet | None = None,
) -> list[np.ndarray]:
    """Subgradient of `regularization_loss` for training without the prox step.

    Groups sitting exactly on their target contribute a zero subgradient.
    """
    out = []
    for index, unimportant in enumerate(_g0_rows(omega, g0)):
        layer = params.layers[index]
        target = np.where(unimportant[:, None], 0.0, prev.layers[index])
        drift = layer - target
        norms = np.linalg.norm(drift, axis=1)
        weight = np.where(
            unimportant, hp.effective_mu, hp.effective_lam * omega.values[index]
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norms > 0, weight / norms, 0.0)
        out.append(scale[:, None] * drift)
    return out


@dataclass
class PlateauScheduler:
    """Divide the learning rate after the validation loss stops improving.

    Attributes:
        lr: Current learning rate.
        lr_min: Floor.
        factor: Divisor applied on a plateau.
        patience: Epochs without improvement that trigger a decay.
        best: Best validation loss seen so far.
        bad_epochs: Epochs since the last improvement.
        initial_lr: Learning rate at the start of the task.
    """

    lr: float
    lr_min: float = 1e-6
    factor: float = 3.0
    patience: int = 5
    best: float = float("inf")
    bad_epochs: int = 0
    initial_lr: float = field(default=0.0)

    def __post_init__(self):
        if not self.initial_lr:
            self.initial_lr = self.lr

    @classmethod
    def from_hyperparams(cls, hp: Hyperparams) -> "PlateauScheduler":
        """Scheduler starting at the configured base learning rate."""
        return cls(
            lr=hp.lr, lr_min=hp.lr_min, factor=hp.lr_factor, patience=hp.lr_patience
        )


def lr_schedule_step(scheduler: PlateauScheduler, val_loss: float) -> float:
    """Feed one epoch's validation loss to the scheduler and return the new lr.

    Raises:
        NumericError: The validation loss is not finite.

    Examples:
        >>> s = PlateauScheduler(lr=0.75, patience=2)
        >>> [lr_schedule_step(s, loss) for loss in (1.0, 1.0, 1.0)]
        [0.75, 0.75, 0.25]
    """
    if not np.isfinite(val_loss):
        raise NumericError(f"Validation loss is not finite: {val_loss}")
    if val_loss < scheduler.best:
        scheduler.best = val_loss
        scheduler.bad_epochs = 0
        return scheduler.lr

    scheduler.bad_epochs += 1
    if scheduler.bad_epochs >= scheduler.patience:
        scheduler.lr = max(scheduler.lr / scheduler.factor, scheduler.lr_min)
        scheduler.bad_epochs = 0
        if scheduler.lr == scheduler.lr_min:
            logger.warning("learning rate reached its floor %g", scheduler.lr_min)
        else:
            logger.debug("validation loss plateaued, lr -> %g", scheduler.lr)
    return scheduler.lr


@dataclass
class TaskTrainingResult:
    """Parameters after a task together with its training history."""

    params: NetworkParams
    train_losses: list[float]
    val_losses: list[float]
    lrs: list[float]
    penalties: list[float]


def _minibatches(
    split: LabeledBatch, batch_size: int, rng: np.random.Generator
) -> Iterator[LabeledBatch]:
    order = rng.permutation(len(split.labels))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield LabeledBatch(split.inputs[idx], split.labels[idx])


def train_task(
    params: NetworkParams,
    train: LabeledBatch,
    val: LabeledBatch,
    task_id: int,
    layout: GroupLayout,
    omega: OmegaRegistry,
    prev: PrevParams,
    hp: Hyperparams,
    adam: AdamState,
    scheduler: PlateauScheduler,
    rng: np.random.Generator,
    *,
    mask: ZeroMask | None = None,
    regularizer: Literal["prox", "subgradient", "none"] = "prox",
    g0: UnimportantSet | None = None,
) -> TaskTrainingResult:
    """Train on one task.

    Each epoch visits the training split in a fresh random order, taking one
    Adam step per minibatch, then applies `prox_sweep` (once, or after every
    step when `hp.prox_every` is `"minibatch"`). The validation loss at the
    end of each epoch drives the plateau scheduler.

    With `regularizer="subgradient"` the penalty is instead added to the
    gradient, which never produces exact zeros; `"none"` trains on the task
    loss alone.

    Args:
        params: Parameters at the start of the task; updated in place
        train: Training split
        val: Validation split; the training split is used when it is empty
        task_id: Index of the task and its output head
        layout: Group layout of `params`
        omega: Importances after the previous task
        prev: Snapshot of the hidden layers after the previous task
        hp: Hyperparameters
        adam: Optimizer state for this task
        scheduler: Learning-rate schedule for this task
        rng: Source of minibatch order
        mask: Persistent zero mask
        regularizer: How the node-wise penalty enters training
        g0: Unimportant set; defaults to nodes with Ω exactly zero

    Returns:
        Final parameters plus per-epoch losses, penalty values and learning
        rates.

    Raises:
        NumericError: Training produced non-finite values.
    """
    if len(val.labels) == 0:
        val = train
    use_prox = regularizer == "prox"
    per_step = hp.prox_every == "minibatch"
    train_losses, val_losses, lrs, penalties = [], [], [], []

    def _prox():
        alpha = scheduler.lr if hp.prox_lr == "current" else scheduler.initial_lr
        prox_sweep(params, layout, omega, prev, hp, alpha, g0=g0, mask=mask)

    for epoch in range(hp.epochs):
        seen, total = 0, 0.0
        for batch in _minibatches(train, hp.batch_size, rng):
            loss, grads = task_loss_and_grad(params, batch, task_id)
            if regularizer == "subgradient":
                extra = penalty_gradient(params, omega, prev, hp, g0)
                for g, p in zip(grads.layers, extra):
                    g += p
            gradient_step(params, grads, adam, scheduler.lr, task_id=task_id, mask=mask)
            if use_prox and per_step:
                _prox()
            total += loss * len(batch.labels)
            seen += len(batch.labels)
        if use_prox and not per_step:
            _prox()

        val_loss = evaluate_loss(params, val, task_id)
        train_losses.append(total / max(seen, 1))
        val_losses.append(val_loss)
        lrs.append(scheduler.lr)
        penalties.append(
            0.0
            if regularizer == "none"
            else regularization_loss(params, omega, prev, hp, g0)
        )
        lr_schedule_step(scheduler, val_loss)
        logger.debug(
            "task %d epoch %d: train %.4f val %.4f penalty %.4f lr %g",
            task_id,
            epoch,
            train_losses[-1],
            val_loss,
            penalties[-1],
            lrs[-1],
        )

    return TaskTrainingResult(params, train_losses, val_losses, lrs, penalties)

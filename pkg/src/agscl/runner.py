"""Run whole task streams and write out what happened.

One run learns every task of a stream in order. After each task the node
importances are refreshed, unimportant nodes are cut off from the layer
above and partly re-drawn, and every task seen so far is evaluated. The same
loop, stripped of its regularization and re-initialization, gives the
fine-tuning baseline.
"""
import json
import logging
import os
import pathlib
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Literal, Sequence

import numpy as np
import pandas as pd

from agscl.checkpoint import RunState, load_checkpoint, save_checkpoint
from agscl.config import (
    ExperimentConfig,
    ModelConfig,
    config_to_dict,
    dump_config,
    parse_config,
)
from agscl.exceptions import ConfigurationError, DataError, NumericError
from agscl.groups import GroupLayout, build_layout
from agscl.importance import (
    OmegaRegistry,
    ZeroMask,
    derive_g0,
    rand_init,
    update_omega,
    zero_init,
)
from agscl.metrics import (
    AccuracyMatrix,
    AopcCurve,
    CapacityReport,
    RegParamCount,
    aopc_curve,
    average_accuracy,
    frozen_count,
    plasticity,
    plasticity_vector,
    record_accuracy,
    reg_param_count,
    sparsity,
    stability,
    stability_vector,
)
from agscl.network import LayerSpec, accuracy, init_network, mean_node_activations
from agscl.optim import AdamState, PlateauScheduler, PrevParams, train_task
from agscl.tasks import (
    TaskStream,
    iterate_batches,
    load_idx,
    permuted_tasks,
    split_tasks,
    synth_tasks,
)
from agscl.utils import substream

logger = logging.getLogger(__name__)

__all__ = (
    "RunReport",
    "build_specs",
    "build_stream",
    "run_directory",
    "checkpoint_run_directory",
    "idx_paths",
    "run_agscl",
    "run_finetune",
    "run_no_pgd_ablation",
    "run_rho_sweep",
    "run_experiment",
    "resume_run",
    "report_from_state",
    "aopc_from_checkpoint",
    "aopc_frame",
    "emit_results",
)

Mode = Literal["agscl", "finetune", "no_pgd"]

RNG_STREAMS = ("init", "batch_order", "rand_init", "aopc")
AOPC_MODES = ("highest", "lowest", "random")
_REGULARIZER = {"agscl": "prox", "no_pgd": "subgradient", "finetune": "none"}
IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class RunReport:
    """Everything measured during one run.

    Attributes:
        name: Experiment name.
        method: `"agscl"`, `"finetune"` or `"no_pgd"`.
        seed: Run seed.
        config: JSON-safe echo of the configuration.
        accuracy: Accuracy matrix, with the fine-tuning reference if any.
        capacity: Capacity report after each task.
        aopc: AOPC curves.
        reg_params: Node-wise vs weight-wise regularization storage.
        timings: Wall-clock seconds per task.
        task_names: Task names in learning order.
        aborted: Whether the run stopped on a numeric failure.
    """

    name: str
    method: str
    seed: int
    config: dict[str, Any]
    accuracy: AccuracyMatrix
    capacity: list[CapacityReport]
    aopc: list[AopcCurve]
    reg_params: RegParamCount
    timings: list[float] = field(default_factory=list)
    task_names: list[str] = field(default_factory=list)
    aborted: bool = False

    @property
    def completed_tasks(self) -> int:
        """Number of tasks fully processed."""
        return self.accuracy.completed

    @property
    def average_accuracies(self) -> list[float]:
        """Average accuracy over the tasks seen so far, after each task."""
        return [average_accuracy(self.accuracy, i) for i in range(self.completed_tasks)]

    @property
    def final_average_accuracy(self) -> float | None:
        """Average accuracy after the last completed task."""
        averages = self.average_accuracies
        return averages[-1] if averages else None

    @property
    def plasticity(self) -> float | None:
        """Mean ratio of just-learned accuracy to the fine-tuning reference."""
        return plasticity(self.accuracy)

    @property
    def stability(self) -> float | None:
        """Mean ratio of final accuracy to best accuracy per task."""
        return stability(self.accuracy)

    def summary(self) -> dict[str, Any]:
        """JSON-safe summary; identical runs give identical summaries."""
        reference = self.accuracy.reference
        return {
            "name": self.name,
            "method": self.method,
            "seed": self.seed,
            "aborted": self.aborted,
            "completed_tasks": self.completed_tasks,
            "task_names": list(self.task_names),
            "final_average_accuracy": self.final_average_accuracy,
            "average_accuracy": self.average_accuracies,
            "plasticity": self.plasticity,
            "stability": self.stability,
            "plasticity_per_task": plasticity_vector(self.accuracy),
            "stability_per_task": stability_vector(self.accuracy),
            "reference_accuracy": (
                None
                if reference is None
                else [None if np.isnan(a) else float(a) for a in reference]
            ),
            "aopc_area": [
                {"snapshot": c.snapshot + 1, "mode": c.mode, "area": c.area}
                for c in self.aopc
            ],
            "reg_params": self.reg_params._asdict(),
            "config": self.config,
        }


def build_specs(model: ModelConfig, input_shape: Sequence[int]) -> list[LayerSpec]:
    """Turn the configured hidden layers into a chain of layer specs.

    Raises:
        ConfigurationError: A conv layer has no image input, or the chain is
            inconsistent.
    """
    shape = tuple(model.input_shape or input_shape)
    specs = []
    for i, layer in enumerate(model.hidden):
        if layer.kind == "conv2d":
            if len(shape) == 2:
                shape = (1,) + shape
            if len(shape) != 3:
                raise ConfigurationError(
                    f"Hidden layer {i}: conv layers need an image input, "
                    f"got shape {shape}"
                )
            spec = LayerSpec.conv2d(
                shape[0],
                shape[1],
                shape[2],
                layer.units,
                kernel=tuple(layer.kernel),
                stride=layer.stride,
                padding=layer.padding,
            )
            shape = (spec.node_count, spec.out_height, spec.out_width)
        else:
            spec = LayerSpec.dense(int(np.prod(shape)), layer.units)
            shape = (layer.units,)
        specs.append(spec)
    return specs


def _default_partition(labels: np.ndarray, n_tasks: int, per_task: int) -> list:
    classes = [int(c) for c in np.unique(labels)]
    if n_tasks * per_task > len(classes):
        raise ConfigurationError(
            f"{n_tasks} tasks of {per_task} classes need {n_tasks * per_task} "
            f"classes; the dataset has {len(classes)}"
        )
    return [classes[i * per_task : (i + 1) * per_task] for i in range(n_tasks)]


def build_stream(config: ExperimentConfig, seed: int) -> TaskStream:
    """Build the configured task stream, in its original order."""
    tc = config.tasks
    if tc.kind == "synthetic":
        return synth_tasks(
            tc.n_tasks, tc.classes_per_task, tc.dim, tc.samples, tc.separation, seed
        )

    train = load_idx(tc.train_images, tc.train_labels)
    test = None
    if tc.test_images is not None:
        test = load_idx(tc.test_images, tc.test_labels)
    fractions = {"val_fraction": tc.val_fraction, "test_fraction": tc.test_fraction}
    if tc.kind == "split":
        partition = tc.class_partition or _default_partition(
            train.labels, tc.n_tasks, tc.classes_per_task
        )
        return split_tasks(train, partition, seed, test=test, **fractions)
    return permuted_tasks(train, tc.n_tasks, seed, test=test, **fractions)


def idx_paths(data_dir: str | os.PathLike) -> dict[str, pathlib.Path]:
    """Locate the four standard IDX files in a directory.

    Each file may be stored plain or gzipped.

    Raises:
        DataError: A file is missing.
    """
    data_dir = pathlib.Path(data_dir)
    paths = {}
    for key, stem in IDX_FILES.items():
        for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
            if candidate.exists():
                paths[key] = candidate
                break
        else:
            raise DataError(f"No {stem}[.gz] in {data_dir}")
    return paths


def run_directory(root: str | os.PathLike, name: str, seed: int) -> pathlib.Path:
    """Directory holding the results of one seed of one experiment."""
    return pathlib.Path(root) / name / f"seed_{seed}"


def _task_order(config: ExperimentConfig, seed: int, n_tasks: int) -> list[int]:
    if not config.shuffle_tasks:
        return list(range(n_tasks))
    return [int(i) for i in substream(seed, "task_order").permutation(n_tasks)]


def _generator(state: dict) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


class _Run:
    """Mutable state of one run while its tasks are processed."""

    def __init__(
        self,
        config: ExperimentConfig,
        stream: TaskStream,
        layout: GroupLayout,
        state: RunState,
        output_dir: pathlib.Path | None = None,
    ):
        self.config = config
        self.stream = stream
        self.layout = layout
        self.state = state
        self.output_dir = output_dir
        self.rngs = {name: _generator(s) for name, s in state.rng_states.items()}

    @property
    def mode(self) -> Mode:
        return self.state.method

    def _save(self, name: str) -> None:
        if self.config.checkpoint and self.output_dir is not None:
            save_checkpoint(self.state, self.output_dir / "checkpoints" / name)

    def report(self, aborted: bool = False) -> RunReport:
        return report_from_state(self.state, layout=self.layout, aborted=aborted)

    def run(self) -> RunReport:
        for t in range(self.state.completed_tasks, len(self.stream)):
            try:
                self._learn(t)
            except NumericError:
                logger.error(
                    "numeric failure in task %d, keeping last good state", t + 1
                )
                self._save("aborted.ckpt")
                if self.output_dir is not None:
                    emit_results(self.report(aborted=True), self.output_dir)
                raise
            self._save(f"task_{t + 1}.ckpt")

        report = self.report()
        if self.output_dir is not None:
            emit_results(report, self.output_dir)
        return report

    def _learn(self, t: int) -> None:
        state, layout, task = self.state, self.layout, self.stream[t]
        hp = self.config.resolved_hyperparams
        ablations = self.config.ablations
        tau = ablations.tau if self.mode == "no_pgd" else None
        start = time.perf_counter()

        params = state.params
        backup = params.copy()
        prev = PrevParams.from_params(params)
        adam = AdamState.fresh(params, hp.adam_betas, hp.adam_eps)
        scheduler = PlateauScheduler.from_hyperparams(hp)
        try:
            train_task(
                params,
                task.train,
                task.val,
                t,
                layout,
                state.omega,
                prev,
                hp,
                adam,
                scheduler,
                self.rngs["batch_order"],
                mask=state.mask,
                regularizer=_REGULARIZER[self.mode],
                g0=derive_g0(state.omega, tau) if tau is not None else None,
            )
        except NumericError:
            state.params = backup
            raise

        frozen = frozen_count(params, prev, tau) if t > 0 else 0
        means = mean_node_activations(
            params, iterate_batches(task.train, hp.batch_size), t
        )
        state.omega = update_omega(state.omega, means)

        if self.config.aopc.enabled and t in (0, len(self.stream) - 1):
            evaluations = [(j, self.stream[j].test) for j in range(t + 1)]
            for mode in AOPC_MODES:
                state.aopc.append(
                    aopc_curve(
                        params,
                        state.omega,
                        evaluations,
                        mode,
                        self.config.aopc.fractions,
                        rng=self.rngs["aopc"],
                        snapshot=t,
                    )
                )

        g0 = derive_g0(state.omega, tau)
        if self.mode != "finetune":
            if not ablations.no_zero_init:
                zero_init(params, layout, g0, state.mask, task=t)
            if not ablations.no_rand_init:
                rand_init(
                    params, layout, g0, state.mask, hp.rho, self.rngs["rand_init"]
                )

        for j in range(t + 1):
            record_accuracy(
                state.accuracy, t, j, accuracy(params, self.stream[j].test, j)
            )
        state.capacity.append(
            CapacityReport(
                task=t,
                sparsity=sparsity(len(g0), layout.node_count),
                used_capacity=frozen / layout.node_count,
                g0_size=len(g0),
                frozen_count=frozen,
                reg_param_count=layout.node_count,
            )
        )
        state.adam = adam
        state.completed_tasks = t + 1
        state.timings.append(time.perf_counter() - start)
        state.rng_states = {
            name: g.bit_generator.state for name, g in self.rngs.items()
        }

        logger.info(
            "task %d/%d (%s): accuracy %s, sparsity %.3f, used capacity %.3f, %.1fs",
            t + 1,
            len(self.stream),
            task.name,
            np.round(state.accuracy.values[t, : t + 1], 4).tolist(),
            state.capacity[-1].sparsity,
            state.capacity[-1].used_capacity,
            state.timings[-1],
        )


def _prepare(
    config: ExperimentConfig, seed: int
) -> tuple[TaskStream, GroupLayout, list[int]]:
    stream = build_stream(config, seed)
    order = _task_order(config, seed, len(stream))
    stream = stream.reordered(order)
    layout = build_layout(build_specs(config.model, stream.input_shape))
    return stream, layout, order


def _fresh_state(
    config: ExperimentConfig,
    seed: int,
    mode: Mode,
    stream: TaskStream,
    layout: GroupLayout,
    order: list[int],
    reference: np.ndarray | None = None,
) -> RunState:
    hp = config.resolved_hyperparams
    rngs = {name: substream(seed, name) for name in RNG_STREAMS}
    params = init_network(layout.specs, stream.head_dims, rngs["init"])
    return RunState(
        seed=seed,
        method=mode,
        config=config_to_dict(config),
        completed_tasks=0,
        task_order=order,
        params=params,
        omega=OmegaRegistry.fresh(layout, hp.eta),
        mask=ZeroMask.empty(layout),
        adam=AdamState.fresh(params, hp.adam_betas, hp.adam_eps),
        rng_states={name: g.bit_generator.state for name, g in rngs.items()},
        accuracy=AccuracyMatrix.empty(len(stream), reference),
        task_names=[task.name for task in stream],
    )


def _execute(
    config: ExperimentConfig,
    seed: int,
    mode: Mode,
    output_dir: str | os.PathLike | None,
    prepared: tuple[TaskStream, GroupLayout, list[int]] | None = None,
    reference: np.ndarray | None = None,
) -> RunReport:
    stream, layout, order = prepared or _prepare(config, seed)
    state = _fresh_state(config, seed, mode, stream, layout, order, reference)
    if output_dir is not None:
        output_dir = pathlib.Path(output_dir)
        logger.info("writing %s run with seed %d to %s", mode, seed, output_dir)
    return _Run(config, stream, layout, state, output_dir).run()


def run_finetune(
    config: ExperimentConfig,
    seed: int | None = None,
    *,
    output_dir: str | os.PathLike | None = None,
) -> RunReport:
    """Fine-tune on each task in turn with plain Adam steps.

    No penalty, importance-driven thresholding or re-initialization is
    applied. The diagonal of the resulting accuracy matrix is the reference
    used for plasticity.
    """
    seed = config.seeds[0] if seed is None else seed
    return _execute(config, seed, "finetune", output_dir)


def run_agscl(
    config: ExperimentConfig,
    seed: int | None = None,
    *,
    output_dir: str | os.PathLike | None = None,
) -> RunReport:
    """Learn the task stream with adaptive group sparsity.

    When `config.finetune_reference` is set, the fine-tuning baseline is run
    first on the same stream and seed to provide the plasticity reference.
    With `config.ablations.no_pgd` set this is `run_no_pgd_ablation`.

    Args:
        config: Experiment configuration
        seed: Run seed; defaults to the first configured seed
        output_dir: Where to write checkpoints and results, if anywhere

    Returns:
        The run report.

    Raises:
        ConfigurationError: The configuration is unusable.
        DataError: The task data is unusable.
        NumericError: Training diverged. The last good state has been
            checkpointed and a partial report written when `output_dir` is
            given.
    """
    if config.method != "agscl":
        raise ConfigurationError(f"Cannot run method {config.method!r} as agscl")
    seed = config.seeds[0] if seed is None else seed
    mode: Mode = "no_pgd" if config.ablations.no_pgd else "agscl"

    prepared = _prepare(config, seed)
    reference = None
    if config.finetune_reference:
        logger.info("running the fine-tuning reference for seed %d", seed)
        baseline = _execute(config, seed, "finetune", None, prepared)
        reference = baseline.accuracy.diagonal()
    return _execute(config, seed, mode, output_dir, prepared, reference)


def run_no_pgd_ablation(
    config: ExperimentConfig,
    seed: int | None = None,
    *,
    output_dir: str | os.PathLike | None = None,
) -> RunReport:
    """Train with the penalty as a plain (sub)gradient term instead of a prox.

    Unimportant nodes are those with importance below `tau`, and a group
    counts as frozen when it moved less than `tau`.

    Raises:
        ConfigurationError: `tau` is not positive.
    """
    ablations = config.ablations
    if not ablations.tau > 0:
        raise ConfigurationError(f"tau must be positive, got {ablations.tau}")
    config = config.model_copy(
        update={"ablations": ablations.model_copy(update={"no_pgd": True})}
    )
    return run_agscl(config, seed, output_dir=output_dir)


def run_rho_sweep(
    config: ExperimentConfig,
    rhos: Iterable[float],
    seed: int | None = None,
    *,
    output_root: str | os.PathLike | None = None,
) -> list[RunReport]:
    """Run the method once per re-initialization probability.

    Each run is named `<name>_rho<rho>`; everything else stays fixed.

    Raises:
        ConfigurationError: A probability is outside (0, 1].
    """
    seed = config.seeds[0] if seed is None else seed
    reports = []
    for rho in rhos:
        if not 0 < rho <= 1:
            raise ConfigurationError(f"rho must lie in (0, 1], got {rho}")
        swept = config.model_copy(
            update={
                "name": f"{config.name}_rho{rho:g}",
                "hyperparams": config.hyperparams.model_copy(update={"rho": rho}),
            }
        )
        output_dir = None
        if output_root is not None:
            output_dir = run_directory(output_root, swept.name, seed)
        reports.append(run_agscl(swept, seed, output_dir=output_dir))
    return reports


def run_experiment(
    config: ExperimentConfig,
    output_root: str | os.PathLike | None = None,
    seeds: Sequence[int] | None = None,
) -> list[RunReport]:
    """Run every seed of an experiment and write each to its own directory."""
    root = pathlib.Path(output_root) if output_root is not None else config.output_dir
    runner = run_finetune if config.method == "finetune" else run_agscl
    reports = []
    for seed in seeds or config.seeds:
        output_dir = run_directory(root, config.name, seed)
        reports.append(runner(config, seed, output_dir=output_dir))
    return reports


def checkpoint_run_directory(checkpoint: str | os.PathLike) -> pathlib.Path:
    """Directory a checkpoint's run results belong to.

    That is the parent of a `checkpoints/` directory, or else the directory
    holding the checkpoint file.
    """
    checkpoint = pathlib.Path(checkpoint)
    if checkpoint.parent.name == "checkpoints":
        return checkpoint.parent.parent
    return checkpoint.parent


def resume_run(
    checkpoint: str | os.PathLike, *, output_dir: str | os.PathLike | None = None
) -> RunReport:
    """Continue a run from a task-boundary checkpoint.

    The result is identical to that of an uninterrupted run. By default
    results go to the run directory the checkpoint belongs to.
    """
    checkpoint = pathlib.Path(checkpoint)
    state = load_checkpoint(checkpoint)
    config = parse_config(state.config, source=str(checkpoint))
    if output_dir is None:
        output_dir = checkpoint_run_directory(checkpoint)

    stream = build_stream(config, state.seed).reordered(state.task_order)
    layout = build_layout(state.params.specs)
    output_dir = pathlib.Path(output_dir)
    logger.info(
        "resuming %s run with seed %d after task %d",
        state.method,
        state.seed,
        state.completed_tasks,
    )
    return _Run(config, stream, layout, state, output_dir).run()


def report_from_state(
    state: RunState, *, layout: GroupLayout | None = None, aborted: bool = False
) -> RunReport:
    """Build a run report from a (possibly partial) run state."""
    layout = layout or build_layout(state.params.specs)
    accuracy = state.accuracy
    if state.method == "finetune" and accuracy.reference is None:
        # fine-tuning is its own plasticity reference
        accuracy = AccuracyMatrix(accuracy.values, accuracy.diagonal())
    return RunReport(
        name=state.config.get("name", "agscl"),
        method=state.method,
        seed=state.seed,
        config=state.config,
        accuracy=accuracy,
        capacity=list(state.capacity),
        aopc=list(state.aopc),
        reg_params=reg_param_count(layout),
        timings=list(state.timings),
        task_names=list(state.task_names),
        aborted=aborted,
    )


def aopc_from_checkpoint(
    checkpoint: str | os.PathLike,
    fractions: Sequence[float] | None = None,
    data_dir: str | os.PathLike | None = None,
) -> list[AopcCurve]:
    """AOPC curves of a checkpointed model over every task it has learned.

    Args:
        checkpoint: Checkpoint to evaluate
        fractions: Pruning fractions; defaults to the run's configuration
        data_dir: Directory holding the IDX files, overriding the paths in
            the run's configuration

    Returns:
        One curve per pruning order.
    """
    state = load_checkpoint(checkpoint)
    raw = dict(state.config)
    if data_dir is not None:
        raw["tasks"] = {
            **raw["tasks"],
            **{k: str(v) for k, v in idx_paths(data_dir).items()},
        }
    config = parse_config(raw, source=str(checkpoint))
    fractions = list(fractions) if fractions is not None else config.aopc.fractions

    stream = build_stream(config, state.seed).reordered(state.task_order)
    done = state.completed_tasks
    if done == 0:
        raise DataError(f"{checkpoint} holds no completed task")
    evaluations = [(j, stream[j].test) for j in range(done)]
    rng = substream(state.seed, "aopc")
    return [
        aopc_curve(
            state.params,
            state.omega,
            evaluations,
            mode,
            fractions,
            rng=rng,
            snapshot=done - 1,
        )
        for mode in AOPC_MODES
    ]


def aopc_frame(curves: Iterable[AopcCurve]) -> pd.DataFrame:
    """One row per curve point: snapshot (1-based), mode, fraction, accuracy."""
    rows = [
        (c.snapshot + 1, c.mode, f, a)
        for c in curves
        for f, a in zip(c.fractions, c.accuracies)
    ]
    return pd.DataFrame(rows, columns=["snapshot", "mode", "fraction", "accuracy"])


def emit_results(report: RunReport, directory: str | os.PathLike) -> list[pathlib.Path]:
    """Write a run's results as CSV, JSON and YAML files.

    Task numbers in the output files are 1-based.

    Returns:
        Paths of the files written.

    Raises:
        OSError: A file could not be written; the message names it.
    """
    directory = pathlib.Path(directory)
    accuracy_rows = [
        (i + 1, j + 1, a) for i, j, a in report.accuracy.lower_triangle()
    ]
    capacity_rows = [
        (
            c.task + 1,
            c.sparsity,
            c.used_capacity,
            c.g0_size,
            c.frozen_count,
            c.reg_param_count,
        )
        for c in report.capacity
    ]
    tables = {
        "accuracy_matrix.csv": pd.DataFrame(
            accuracy_rows, columns=["after_task", "task", "accuracy"]
        ),
        "capacity.csv": pd.DataFrame(
            capacity_rows,
            columns=[
                "task",
                "sparsity",
                "used_capacity",
                "g0_size",
                "frozen_count",
                "reg_param_count",
            ],
        ),
        "aopc.csv": aopc_frame(report.aopc),
        "timing.csv": pd.DataFrame(
            [(t + 1, s) for t, s in enumerate(report.timings)],
            columns=["task", "seconds"],
        ),
    }

    written = []
    path = directory
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, frame in tables.items():
            path = directory / name
            frame.to_csv(path, index=False)
            written.append(path)
        path = directory / "summary.json"
        path.write_text(
            json.dumps(report.summary(), indent=2, sort_keys=True), encoding="utf-8"
        )
        written.append(path)
        path = directory / "config.yaml"
        dump_config(parse_config(report.config), path)
        written.append(path)
    except OSError as e:
        message = f"Could not write results: {e.strerror}"
        raise OSError(e.errno, message, str(path)) from e

    logger.info("wrote %d result files to %s", len(written), directory)
    return written

"""Actions on the run ledger."""
import os
import pathlib

import pandas as pd
from sqlalchemy import create_engine, select
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

from agscl.db import models
from agscl.runner import RunReport


def ledger_engine(path: str | os.PathLike) -> Engine:
    """Open (and if needed create) a SQLite ledger.

    Args:
        path: Location of the database file

    Returns:
        An engine with every ledger table created.
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f"sqlite+pysqlite:///{path}")
    models.Base.metadata.create_all(engine)
    return engine


def ledger_session(path: str | os.PathLike) -> sessionmaker:
    """Session factory bound to the ledger at `path`."""
    return sessionmaker(ledger_engine(path))


def record_report(session: Session, report: RunReport) -> models.Run:
    """Insert a run report, with its accuracy matrix and capacity history.

    Task numbers are stored 1-based, as in the CSV outputs. The caller
    commits.
    """
    run = models.Run(
        name=report.name,
        seed=report.seed,
        method=report.method,
        aborted=report.aborted,
        completed_tasks=report.completed_tasks,
        final_average_accuracy=report.final_average_accuracy,
        plasticity=report.plasticity,
        stability=report.stability,
        node_count=report.reg_params.node_count,
        weight_count=report.reg_params.weight_count,
    )
    run.accuracies = [
        models.AccuracyEntry(after_task=i + 1, task=j + 1, accuracy=a)
        for i, j, a in report.accuracy.lower_triangle()
    ]
    run.capacities = [
        models.CapacityEntry(
            task=c.task + 1,
            sparsity=c.sparsity,
            used_capacity=c.used_capacity,
            g0_size=c.g0_size,
            frozen_count=c.frozen_count,
        )
        for c in report.capacity
    ]
    session.add(run)
    return run


def seed_summary(session: Session, name: str) -> pd.DataFrame:
    """Mean and standard deviation across seeds for one experiment.

    Aborted runs are left out.

    Args:
        session: Open ledger session
        name: Experiment name

    Returns:
        One row per method, with the number of seeds and the mean and standard
            deviation of final average accuracy, plasticity and stability.
            Empty if nothing was recorded under `name`.
    """
    query = select(
        models.Run.method,
        models.Run.seed,
        models.Run.final_average_accuracy,
        models.Run.plasticity,
        models.Run.stability,
    ).where(models.Run.name == name, models.Run.aborted.is_(False))
    query = query.order_by(models.Run.id)
    runs = pd.DataFrame(
        session.execute(query).all(),
        columns=["method", "seed", "final_average_accuracy", "plasticity", "stability"],
    )
    if runs.empty:
        return runs

    # latest record per (method, seed) wins when a run was repeated
    runs = runs.drop_duplicates(["method", "seed"], keep="last")
    metrics = ["final_average_accuracy", "plasticity", "stability"]
    summary = runs.groupby("method")[metrics].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary.insert(0, "seeds", runs.groupby("method")["seed"].count())
    return summary.reset_index()

"""Test module for the run ledger database."""
import numpy as np
import pytest
from sqlalchemy import create_engine, select
from sqlalchemy.orm import Session

from agscl.db import Base
from agscl.db.actions import ledger_session, record_report, seed_summary
from agscl.db.models import AccuracyEntry, CapacityEntry, Run
from agscl.metrics import AccuracyMatrix, CapacityReport, RegParamCount
from agscl.runner import RunReport


@pytest.fixture
def session():
    """In-memory database session for testing."""
    engine = create_engine("sqlite:///:memory:")
    Base.metadata.create_all(engine)
    session = Session(engine)
    yield session
    session.rollback()
    session.close()


def make_report(final, seed=0, method="agscl", name="unit", aborted=False):
    """Two-task report whose final row averages to `final`."""
    accuracy = AccuracyMatrix(
        np.array([[0.9, np.nan], [2 * final - 0.8, 0.8]]), np.array([0.9, 1.0])
    )
    return RunReport(
        name=name,
        method=method,
        seed=seed,
        config={"name": name},
        accuracy=accuracy,
        capacity=[
            CapacityReport(0, 0.5, 0.0, 5, 0, 10),
            CapacityReport(1, 0.3, 0.5, 3, 5, 10),
        ],
        aopc=[],
        reg_params=RegParamCount(10, 200, 0.05),
        aborted=aborted,
    )


class TestLedger:
    """Test cases for recording runs."""

    def test_record(self, session):
        """A report becomes a run with its accuracies and capacities."""
        record_report(session, make_report(0.75))
        session.commit()
        run = session.scalars(select(Run)).one()
        assert (run.name, run.seed, run.method) == ("unit", 0, "agscl")
        assert run.completed_tasks == 2
        assert run.final_average_accuracy == pytest.approx(0.75)
        assert run.plasticity == pytest.approx(0.9)
        assert (run.node_count, run.weight_count) == (10, 200)
        assert len(run.accuracies) == 3

    def test_one_based(self, session):
        """Task numbers are stored from one."""
        record_report(session, make_report(0.75))
        session.commit()
        tasks = session.execute(select(AccuracyEntry.after_task, AccuracyEntry.task))
        assert sorted(tasks.all()) == [(1, 1), (2, 1), (2, 2)]
        capacity = session.scalars(select(CapacityEntry.task)).all()
        assert sorted(capacity) == [1, 2]

    def test_file_ledger(self, tmp_path):
        """A ledger file is created on first use."""
        path = tmp_path / "nested" / "ledger.db"
        with ledger_session(path)() as session:
            record_report(session, make_report(0.5))
            session.commit()
        assert path.exists()
        with ledger_session(path)() as session:
            assert len(session.scalars(select(Run)).all()) == 1


class TestSeedSummary:
    """Test cases for summarizing across seeds."""

    def test_mean_and_std(self, session):
        """Seeds are averaged per method."""
        for seed, final in enumerate([0.6, 0.7, 0.8]):
            record_report(session, make_report(final, seed=seed))
        record_report(session, make_report(0.5, method="finetune"))
        session.commit()
        summary = seed_summary(session, "unit").set_index("method")
        assert summary.loc["agscl", "seeds"] == 3
        assert summary.loc["agscl", "final_average_accuracy_mean"] == pytest.approx(0.7)
        assert summary.loc["agscl", "final_average_accuracy_std"] == pytest.approx(0.1)
        assert summary.loc["finetune", "seeds"] == 1

    def test_latest_record_wins(self, session):
        """A repeated seed counts once, with its latest result."""
        record_report(session, make_report(0.6))
        record_report(session, make_report(0.8))
        session.commit()
        summary = seed_summary(session, "unit")
        assert summary["seeds"].tolist() == [1]
        assert summary["final_average_accuracy_mean"].tolist() == pytest.approx([0.8])

    def test_aborted_excluded(self, session):
        """Aborted runs are left out."""
        record_report(session, make_report(0.6))
        record_report(session, make_report(0.45, seed=1, aborted=True))
        session.commit()
        summary = seed_summary(session, "unit")
        assert summary["seeds"].tolist() == [1]

    def test_unknown_name(self, session):
        """Nothing recorded gives an empty frame."""
        record_report(session, make_report(0.6, name="other"))
        session.commit()
        assert seed_summary(session, "unit").empty

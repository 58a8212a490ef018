"""Run ledger database models."""
from sqlalchemy import Boolean, Column, Float, ForeignKey, Integer, String
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class Run(Base):
    """One finished (or aborted) run of one seed."""

    __tablename__ = "run"

    id = Column(Integer, primary_key=True)
    name = Column(String, index=True)
    seed = Column(Integer)
    method = Column(String)
    aborted = Column(Boolean, default=False)
    completed_tasks = Column(Integer)
    final_average_accuracy = Column(Float)
    plasticity = Column(Float)
    stability = Column(Float)
    node_count = Column(Integer)
    weight_count = Column(Integer)

    accuracies = relationship("AccuracyEntry", back_populates="run")
    capacities = relationship("CapacityEntry", back_populates="run")

    def __repr__(self):
        """Pretty print run."""
        return "Run(id={0}, name={1}, seed={2}, method={3})".format(
            self.id, self.name, self.seed, self.method
        )


class AccuracyEntry(Base):
    """Accuracy of one task after training another."""

    __tablename__ = "accuracy"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("run.id"))
    after_task = Column(Integer)
    task = Column(Integer)
    accuracy = Column(Float)

    run = relationship("Run", back_populates="accuracies")


class CapacityEntry(Base):
    """Capacity figures after one task."""

    __tablename__ = "capacity"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("run.id"))
    task = Column(Integer)
    sparsity = Column(Float)
    used_capacity = Column(Float)
    g0_size = Column(Integer)
    frozen_count = Column(Integer)

    run = relationship("Run", back_populates="capacities")

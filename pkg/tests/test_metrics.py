"""Test module for run metrics."""
import numpy as np
import pytest

from agscl.groups import build_layout
from agscl.importance import OmegaRegistry
from agscl.metrics import (
    AccuracyMatrix,
    aopc_area,
    aopc_curve,
    average_accuracy,
    frozen_count,
    plasticity,
    plasticity_vector,
    reg_param_count,
    record_accuracy,
    sparsity,
    stability,
    stability_vector,
    used_capacity,
)
from agscl.network import LabeledBatch, LayerSpec, NetworkParams
from agscl.optim import PrevParams


def _matrix(entries, n_tasks=2, reference=None):
    m = AccuracyMatrix.empty(n_tasks, reference)
    for i, j, a in entries:
        record_accuracy(m, i, j, a)
    return m


class TestAccuracyMatrix:
    """Test cases for the accuracy matrix and derived scores."""

    def test_average(self):
        """Average accuracy is over the tasks seen so far."""
        m = _matrix([(0, 0, 0.9), (1, 0, 0.7), (1, 1, 0.8)])
        assert average_accuracy(m, 0) == 0.9
        assert average_accuracy(m, 1) == pytest.approx(0.75)

    def test_upper_triangle(self):
        """Tasks not yet learned have no accuracy."""
        m = AccuracyMatrix.empty(3)
        with pytest.raises(IndexError):
            record_accuracy(m, 0, 1, 0.5)
        with pytest.raises(IndexError):
            m[0, 2]

    def test_out_of_range(self):
        """Accuracies outside [0, 1] are rejected."""
        with pytest.raises(ValueError):
            record_accuracy(AccuracyMatrix.empty(1), 0, 0, 1.2)

    def test_completed(self):
        """Only fully recorded rows count as completed."""
        m = _matrix([(0, 0, 0.9), (1, 1, 0.8)], n_tasks=3)
        assert m.completed == 1
        assert m.lower_triangle() == [(0, 0, 0.9), (1, 1, 0.8)]

    def test_plasticity_and_stability(self):
        """Two tasks: full plasticity, and task 1 kept 2/3 of its best."""
        m = _matrix(
            [(0, 0, 0.9), (1, 0, 0.6), (1, 1, 0.8)], reference=[0.9, 0.8]
        )
        assert plasticity(m) == pytest.approx(1.0)
        assert stability(m) == pytest.approx((0.6 / 0.9 + 1.0) / 2)
        assert stability_vector(m)[0] == pytest.approx(2 / 3)

    def test_no_forgetting(self):
        """Unchanged accuracies give a stability of one."""
        m = _matrix([(0, 0, 0.5), (1, 0, 0.5), (1, 1, 0.75)])
        assert stability(m) == 1.0

    def test_missing_reference(self, caplog):
        """Plasticity is undefined without a reference."""
        m = _matrix([(0, 0, 0.5)], n_tasks=1)
        assert plasticity_vector(m) == [None]
        assert plasticity(m) is None
        assert "undefined" in caplog.text

    def test_zero_reference(self):
        """A zero reference leaves that task's plasticity undefined."""
        m = _matrix([(0, 0, 0.5)], n_tasks=1, reference=[0.0])
        assert plasticity(m) is None


class TestCapacity:
    """Test cases for sparsity and used capacity."""

    def test_sparsity(self):
        """Sparsity is the unimportant fraction."""
        assert sparsity(200, 200) == 1.0
        assert sparsity(50, 200) == 0.25
        with pytest.raises(ValueError):
            sparsity(1, 0)
        with pytest.raises(ValueError):
            sparsity(3, 2)

    def test_all_frozen(self, dense_specs, dense_net):
        """An unchanged network has used all of its capacity."""
        layout = build_layout(dense_specs)
        prev = PrevParams.from_params(dense_net)
        assert used_capacity(dense_net, prev, layout) == 1.0

    def test_tiny_change_counts(self, dense_specs, dense_net):
        """Any bitwise change unfreezes a group."""
        layout = build_layout(dense_specs)
        dense_net.layers[0][0, 0] = 0.0
        prev = PrevParams.from_params(dense_net)
        dense_net.layers[0][0, 0] = 1e-300
        assert frozen_count(dense_net, prev) == layout.node_count - 1

    def test_threshold_variant(self, dense_specs, dense_net):
        """With tau, groups that moved less than tau count as frozen."""
        prev = PrevParams.from_params(dense_net)
        dense_net.layers[0][0, 0] += 1e-6
        dense_net.layers[1][0, 0] += 1.0
        assert frozen_count(dense_net, prev, tau=1e-4) == 8

    def test_reg_param_count(self):
        """Node-wise strengths need far less storage than weight-wise ones."""
        layout = build_layout([LayerSpec.dense(784, 100), LayerSpec.dense(100, 100)])
        count = reg_param_count(layout)
        assert (count.node_count, count.weight_count) == (200, 88600)
        assert count.ratio < 1 / 400

    def test_reg_param_count_conv(self, conv_specs):
        """Conv filters count as one node each."""
        count = reg_param_count(build_layout(conv_specs))
        assert count.node_count == 3 + 2 + 4


@pytest.fixture
def pruning_net():
    """Two signal nodes, two dead nodes, and a head biased toward class 1.

    Class 0 reads node 0 (`relu(x0)`), class 1 reads node 1 (`relu(-x0)`).
    """
    layer = np.array(
        [
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0],
            [0.0, 0.0, -1.0],
        ]
    )
    head = np.array([[1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.01]])
    params = NetworkParams((LayerSpec.dense(2, 4),), [layer], [head])
    omega = OmegaRegistry([np.array([2.0, 1.0, 0.0, 0.0])])
    rng = np.random.default_rng(0)
    x0 = np.concatenate([rng.uniform(1, 2, 10), -rng.uniform(1, 2, 10)])
    inputs = np.column_stack([x0, rng.normal(size=20)])
    labels = np.repeat([0, 1], 10)
    return params, omega, [(0, LabeledBatch(inputs, labels))]


class TestAopc:
    """Test cases for importance-ordered pruning curves."""

    fractions = [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_highest_first(self, pruning_net):
        """Pruning the most important node first hurts immediately."""
        params, omega, evals = pruning_net
        curve = aopc_curve(params, omega, evals, "highest", self.fractions)
        assert curve.accuracies == (1.0, 0.5, 0.5, 0.5, 0.5)
        assert aopc_area(curve) == pytest.approx(0.4375)

    def test_lowest_first(self, pruning_net):
        """Pruning dead nodes first costs nothing."""
        params, omega, evals = pruning_net
        curve = aopc_curve(params, omega, evals, "lowest", self.fractions)
        assert curve.accuracies == (1.0, 1.0, 1.0, 1.0, 0.5)
        assert curve.area == pytest.approx(0.0625)

    def test_random(self, pruning_net):
        """Random order agrees at the end points."""
        params, omega, evals = pruning_net
        curve = aopc_curve(
            params,
            omega,
            evals,
            "random",
            self.fractions,
            rng=np.random.default_rng(0),
            snapshot=4,
        )
        assert curve.accuracies[0] == 1.0
        assert curve.accuracies[-1] == 0.5
        assert curve.snapshot == 4

    def test_random_needs_generator(self, pruning_net):
        """A random order cannot be drawn without a generator."""
        params, omega, evals = pruning_net
        with pytest.raises(ValueError):
            aopc_curve(params, omega, evals, "random", self.fractions)

    def test_bad_fractions(self, pruning_net):
        """Fractions must ascend from zero."""
        params, omega, evals = pruning_net
        with pytest.raises(ValueError):
            aopc_curve(params, omega, evals, "highest", [0.5, 1.0])
        with pytest.raises(ValueError):
            aopc_curve(params, omega, evals, "highest", [0.0, 1.0, 0.5])

    def test_parameters_untouched(self, pruning_net):
        """Pruning only masks activations."""
        params, omega, evals = pruning_net
        before = params.copy()
        aopc_curve(params, omega, evals, "highest", self.fractions)
        assert np.array_equal(params.layers[0], before.layers[0])
        assert np.array_equal(params.heads[0], before.heads[0])

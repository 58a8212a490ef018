"""Test module for binary checkpoints."""
import hashlib
import struct

import numpy as np
import pytest

from agscl.checkpoint import (
    FORMAT_VERSION,
    RunState,
    load_checkpoint,
    save_checkpoint,
)
from agscl.exceptions import CheckpointError, CheckpointVersionError
from agscl.groups import NodeId, build_layout
from agscl.importance import OmegaRegistry, ZeroMask, zero_init
from agscl.metrics import AccuracyMatrix, AopcCurve, CapacityReport, record_accuracy
from agscl.optim import AdamState


@pytest.fixture
def state(dense_specs, dense_net):
    """A run state after one of two tasks."""
    layout = build_layout(dense_specs)
    mask = ZeroMask.empty(layout)
    zero_init(dense_net, layout, {NodeId(0, 1), NodeId(0, 3)}, mask, task=0)
    omega = OmegaRegistry([np.array([0.5, 0.0, 1.25, 0.0, 2.0]), np.ones(4)], 0.9)
    adam = AdamState.fresh(dense_net)
    adam.step = 17
    adam.m_layers[0] += 0.125
    accuracy = AccuracyMatrix.empty(2, [0.9, 0.8])
    record_accuracy(accuracy, 0, 0, 0.875)
    return RunState(
        seed=3,
        method="agscl",
        config={"name": "unit", "seeds": [3]},
        completed_tasks=1,
        task_order=[1, 0],
        params=dense_net,
        omega=omega,
        mask=mask,
        adam=adam,
        rng_states={"init": np.random.default_rng(1).bit_generator.state},
        accuracy=accuracy,
        capacity=[CapacityReport(0, 0.4, 0.0, 2, 0, 9)],
        aopc=[AopcCurve("highest", (0.0, 1.0), (0.875, 0.5), 0)],
        timings=[1.5],
        task_names=["classes 2,3", "classes 0,1"],
    )


def _rewrite(path, body):
    path.write_bytes(body + hashlib.sha256(body).digest())


class TestCheckpoint:
    """Test cases for saving and loading run state."""

    def test_round_trip(self, state, tmp_path):
        """Everything written is read back unchanged."""
        path = save_checkpoint(state, tmp_path / "run" / "task_1.ckpt")
        loaded = load_checkpoint(path)
        for a, b in zip(
            state.params.layers + state.params.heads,
            loaded.params.layers + loaded.params.heads,
        ):
            assert np.array_equal(a, b)
        assert loaded.params.specs == state.params.specs
        assert loaded.mask.entries == state.mask.entries
        for a, b in zip(state.mask.masks, loaded.mask.masks):
            assert np.array_equal(a, b)
        assert loaded.omega.eta == 0.9
        assert np.array_equal(loaded.omega.values[0], state.omega.values[0])
        assert loaded.adam.step == 17
        assert np.array_equal(loaded.adam.m_layers[0], state.adam.m_layers[0])
        assert loaded.capacity == state.capacity
        assert loaded.aopc == state.aopc
        assert loaded.task_order == [1, 0]
        assert loaded.rng_states == state.rng_states
        assert np.array_equal(
            loaded.accuracy.values, state.accuracy.values, equal_nan=True
        )
        assert loaded.accuracy.reference.tolist() == [0.9, 0.8]

    def test_stable_bytes(self, state, tmp_path):
        """Saving a loaded checkpoint reproduces the file byte for byte."""
        first = save_checkpoint(state, tmp_path / "a.ckpt")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.ckpt")
        assert first.read_bytes() == second.read_bytes()

    def test_omega_size(self, state, tmp_path):
        """One importance is stored per node."""
        loaded = load_checkpoint(save_checkpoint(state, tmp_path / "a.ckpt"))
        assert len(loaded.omega) == 9

    def test_rng_resumes(self, state, tmp_path):
        """A restored generator state continues the same stream."""
        loaded = load_checkpoint(save_checkpoint(state, tmp_path / "a.ckpt"))
        expected = np.random.default_rng(1).random(3)
        bit_generator = np.random.PCG64()
        bit_generator.state = loaded.rng_states["init"]
        assert np.array_equal(np.random.Generator(bit_generator).random(3), expected)

    def test_flipped_byte(self, state, tmp_path):
        """Any corruption fails the checksum."""
        path = save_checkpoint(state, tmp_path / "a.ckpt")
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncated(self, state, tmp_path):
        """A truncated file is rejected."""
        path = save_checkpoint(state, tmp_path / "a.ckpt")
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_other_version(self, state, tmp_path):
        """Files from another format version are refused."""
        path = save_checkpoint(state, tmp_path / "a.ckpt")
        body = bytearray(path.read_bytes()[:-32])
        struct.pack_into(">I", body, 8, FORMAT_VERSION + 1)
        _rewrite(path, bytes(body))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_bad_magic(self, state, tmp_path):
        """Files that are not checkpoints are refused."""
        path = save_checkpoint(state, tmp_path / "a.ckpt")
        body = b"NOTACKPT" + path.read_bytes()[8:-32]
        _rewrite(path, body)
        with pytest.raises(CheckpointError, match="not an agscl checkpoint"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        """A missing file is a checkpoint error."""
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.ckpt")

"""Binary checkpoints of a run at a task boundary.

Layout::

    b"AGSCKPT\\0"       magic, 8 bytes
    version            u32, big-endian
    header length      u64, big-endian
    header             UTF-8 JSON, sorted keys
    payload            arrays, row-major, in manifest order
    digest             SHA-256 over everything above, 32 bytes

The header holds every scalar piece of state plus a manifest entry
(`name`, `dtype`, `shape`, `offset`, `nbytes`) for each array. Saving the
same state twice gives identical bytes.
"""
import hashlib
import json
import logging
import os
import pathlib
import struct
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from agscl.exceptions import CheckpointError, CheckpointVersionError
from agscl.groups import NodeId, OutgoingCoord
from agscl.importance import OmegaRegistry, ZeroMask
from agscl.metrics import AccuracyMatrix, AopcCurve, CapacityReport
from agscl.network import LayerSpec, NetworkParams
from agscl.optim import AdamState

logger = logging.getLogger(__name__)

__all__ = ("RunState", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION")

MAGIC = b"AGSCKPT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct(">IQ")
_DIGEST_SIZE = 32


@dataclass
class RunState:
    """Everything needed to continue a run after a task boundary.

    Attributes:
        seed: Run seed.
        method: `"agscl"`, `"finetune"` or `"no_pgd"`.
        config: JSON-safe echo of the experiment configuration.
        completed_tasks: Number of tasks fully processed.
        task_order: Original index of each task in learning order.
        params: Network parameters after re-initialization.
        omega: Node importances.
        mask: Persistent zero mask.
        adam: Optimizer state at the end of the last task.
        rng_states: Bit-generator state of every named random stream.
        accuracy: Accuracy matrix so far, with the reference if any.
        capacity: Capacity report of each completed task.
        aopc: AOPC curves taken so far.
        timings: Wall-clock seconds of each completed task.
        task_names: Name of each task in learning order.
    """

    seed: int
    method: str
    config: dict[str, Any]
    completed_tasks: int
    task_order: list[int]
    params: NetworkParams
    omega: OmegaRegistry
    mask: ZeroMask
    adam: AdamState
    rng_states: dict[str, dict]
    accuracy: AccuracyMatrix
    capacity: list[CapacityReport] = field(default_factory=list)
    aopc: list[AopcCurve] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)
    task_names: list[str] = field(default_factory=list)


def _arrays(state: RunState) -> list[tuple[str, np.ndarray]]:
    arrays = []
    arrays += [(f"layers/{i}", a) for i, a in enumerate(state.params.layers)]
    arrays += [(f"heads/{i}", a) for i, a in enumerate(state.params.heads)]
    arrays += [(f"omega/{i}", a) for i, a in enumerate(state.omega.values)]
    for part in ("m_layers", "v_layers", "m_heads", "v_heads"):
        moments = getattr(state.adam, part)
        arrays += [(f"adam/{part}/{i}", a) for i, a in enumerate(moments)]
    arrays.append(("accuracy/values", state.accuracy.values))
    if state.accuracy.reference is not None:
        arrays.append(("accuracy/reference", state.accuracy.reference))
    return arrays


def _header(state: RunState) -> dict[str, Any]:
    mask_entries = sorted(
        [c.upper.layer, c.upper.node, c.start, c.stop, task]
        for c, task in state.mask.entries.items()
    )
    return {
        "seed": state.seed,
        "method": state.method,
        "config": state.config,
        "completed_tasks": state.completed_tasks,
        "task_order": list(state.task_order),
        "specs": [asdict(spec) for spec in state.params.specs],
        "eta": state.omega.eta,
        "mask": mask_entries,
        "adam": {
            "step": state.adam.step,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
        },
        "rng_states": state.rng_states,
        "capacity": [asdict(c) for c in state.capacity],
        "aopc": [
            {
                "mode": c.mode,
                "fractions": list(c.fractions),
                "accuracies": list(c.accuracies),
                "snapshot": c.snapshot,
            }
            for c in state.aopc
        ],
        "timings": list(state.timings),
        "task_names": list(state.task_names),
    }


def save_checkpoint(state: RunState, path: str | os.PathLike) -> pathlib.Path:
    """Write a checkpoint.

    Args:
        state: State to save
        path: Destination file; parent directories are created

    Returns:
        The path written.
    """
    path = pathlib.Path(path)
    manifest, payload, offset = [], [], 0
    for name, array in _arrays(state):
        array = np.ascontiguousarray(array)
        dtype = array.dtype
        if dtype.kind == "f":
            dtype = dtype.newbyteorder("<")
        data = array.astype(dtype, copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": dtype.str,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payload.append(data)
        offset += len(data)

    header = _header(state)
    header["arrays"] = manifest
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    body = b"".join(
        [MAGIC, _PREAMBLE.pack(FORMAT_VERSION, len(header_bytes)), header_bytes]
        + payload
    )
    digest = hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(body + digest)
    partial.replace(path)
    logger.debug("wrote checkpoint %s (%d bytes)", path, len(body) + _DIGEST_SIZE)
    return path


def _restore_arrays(header: dict, payload: bytes) -> dict[str, np.ndarray]:
    arrays = {}
    for entry in header["arrays"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"Array {entry['name']} runs past the payload")
        array = np.frombuffer(payload[start:stop], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = array.reshape(entry["shape"]).astype(
            np.float64 if array.dtype.kind == "f" else array.dtype
        )
    return arrays


def _numbered(arrays: dict[str, np.ndarray], prefix: str) -> list[np.ndarray]:
    out, i = [], 0
    while f"{prefix}/{i}" in arrays:
        out.append(arrays[f"{prefix}/{i}"])
        i += 1
    return out


def load_checkpoint(path: str | os.PathLike) -> RunState:
    """Read a checkpoint written by `save_checkpoint`.

    The digest is verified before anything else is interpreted.

    Raises:
        CheckpointError: The file is unreadable, truncated, corrupted or not a
            checkpoint.
        CheckpointVersionError: The file uses another format version.
    """
    path = pathlib.Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e

    minimum = len(MAGIC) + _PREAMBLE.size + _DIGEST_SIZE
    if len(blob) < minimum:
        raise CheckpointError(f"{path} is truncated ({len(blob)} bytes)")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path} failed its checksum")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not an agscl checkpoint")

    version, header_len = _PREAMBLE.unpack_from(body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} uses checkpoint format {version}; this version of agscl "
            f"reads format {FORMAT_VERSION} only"
        )
    start = len(MAGIC) + _PREAMBLE.size
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has an unreadable header") from e
    arrays = _restore_arrays(header, body[start + header_len :])

    specs = tuple(LayerSpec(**spec) for spec in header["specs"])
    params = NetworkParams(
        specs=specs,
        layers=_numbered(arrays, "layers"),
        heads=_numbered(arrays, "heads"),
    )
    omega = OmegaRegistry(_numbered(arrays, "omega"), header["eta"])
    mask = ZeroMask(
        {}, [np.zeros((s.node_count, s.group_size), bool) for s in specs]
    )
    for layer, node, lo, hi, task in header["mask"]:
        mask.add(OutgoingCoord(NodeId(layer, node), lo, hi), task)
    adam = AdamState(
        m_layers=_numbered(arrays, "adam/m_layers"),
        v_layers=_numbered(arrays, "adam/v_layers"),
        m_heads=_numbered(arrays, "adam/m_heads"),
        v_heads=_numbered(arrays, "adam/v_heads"),
        **header["adam"],
    )
    accuracy = AccuracyMatrix(
        arrays["accuracy/values"], arrays.get("accuracy/reference")
    )
    aopc = [
        AopcCurve(
            c["mode"], tuple(c["fractions"]), tuple(c["accuracies"]), c["snapshot"]
        )
        for c in header["aopc"]
    ]
    return RunState(
        seed=header["seed"],
        method=header["method"],
        config=header["config"],
        completed_tasks=header["completed_tasks"],
        task_order=header["task_order"],
        params=params,
        omega=omega,
        mask=mask,
        adam=adam,
        rng_states=header["rng_states"],
        accuracy=accuracy,
        capacity=[CapacityReport(**c) for c in header["capacity"]],
        aopc=aopc,
        timings=header["timings"],
        task_names=header["task_names"],
    )

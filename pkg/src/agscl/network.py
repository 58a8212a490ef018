"""Small ReLU networks with multi-headed outputs and exact gradients.

Hidden layers are dense or 2-D convolutional and are always followed by a
ReLU. Each hidden layer is stored as a float64 matrix with one row per node:
the row holds the node's incoming weights (for a conv filter, flattened
channel-major as `(in_channel, kernel_row, kernel_col)`) and, in the last
column, the node's bias. Output heads use the same layout, one per task.
"""
from dataclasses import dataclass, field
from typing import Iterable, Literal, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from agscl.exceptions import ConfigurationError, DataError
from agscl.groups import NodeId

__all__ = (
    "LayerSpec",
    "NetworkParams",
    "ForwardTrace",
    "GradientSet",
    "LabeledBatch",
    "validate_specs",
    "initial_weights",
    "init_network",
    "forward",
    "task_loss_and_grad",
    "mean_node_activations",
    "evaluate_loss",
    "accuracy",
)


class LabeledBatch(NamedTuple):
    """Inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one hidden layer.

    Attributes:
        kind: `"dense"` or `"conv2d"`.
        fan_in: Incoming weights per node (excluding the bias).
        node_count: Units, or filters for a conv layer.
        in_channels: Conv only; channels of the incoming feature map.
        in_height: Conv only; height of the incoming feature map.
        in_width: Conv only; width of the incoming feature map.
        kernel_height: Conv only.
        kernel_width: Conv only.
        stride: Conv only.
        padding: Conv only; zero padding on every side.
    """

    kind: Literal["dense", "conv2d"]
    fan_in: int
    node_count: int
    in_channels: int = 0
    in_height: int = 0
    in_width: int = 0
    kernel_height: int = 0
    kernel_width: int = 0
    stride: int = 1
    padding: int = 0

    @classmethod
    def dense(cls, fan_in: int, node_count: int) -> "LayerSpec":
        """Fully connected layer."""
        return cls("dense", fan_in, node_count)

    @classmethod
    def conv2d(
        cls,
        in_channels: int,
        in_height: int,
        in_width: int,
        filters: int,
        kernel: tuple[int, int] = (3, 3),
        stride: int = 1,
        padding: int = 0,
    ) -> "LayerSpec":
        """Convolution layer over an `in_channels x in_height x in_width` map."""
        kh, kw = kernel
        return cls(
            "conv2d",
            in_channels * kh * kw,
            filters,
            in_channels=in_channels,
            in_height=in_height,
            in_width=in_width,
            kernel_height=kh,
            kernel_width=kw,
            stride=stride,
            padding=padding,
        )

    @property
    def out_height(self) -> int:
        """Height of the output feature map (conv only)."""
        span = self.in_height + 2 * self.padding - self.kernel_height
        return span // self.stride + 1

    @property
    def out_width(self) -> int:
        """Width of the output feature map (conv only)."""
        span = self.in_width + 2 * self.padding - self.kernel_width
        return span // self.stride + 1

    @property
    def out_features(self) -> int:
        """Size of the layer's output once flattened."""
        if self.kind == "conv2d":
            return self.node_count * self.out_height * self.out_width
        return self.node_count

    @property
    def group_size(self) -> int:
        """Scalars in one node group: incoming weights plus bias."""
        return self.fan_in + 1


def validate_specs(specs: Sequence[LayerSpec]) -> None:
    """Check that a list of layer specs forms a consistent chain.

    Raises:
        ConfigurationError: On an empty chain, non-positive sizes, a conv layer
            after a dense one, or mismatched fan-in/fan-out between layers.
    """
    if len(specs) == 0:
        raise ConfigurationError("A network needs at least one hidden layer")

    seen_dense = False
    for i, spec in enumerate(specs):
        if spec.kind not in ("dense", "conv2d"):
            raise ConfigurationError(f"Layer {i}: unknown kind {spec.kind!r}")
        if spec.node_count < 1 or spec.fan_in < 1:
            raise ConfigurationError(f"Layer {i}: sizes must be positive")
        if spec.kind == "conv2d":
            if seen_dense:
                raise ConfigurationError(
                    f"Layer {i}: conv layers must precede all dense layers"
                )
            geometry = (
                spec.in_channels,
                spec.in_height,
                spec.in_width,
                spec.kernel_height,
                spec.kernel_width,
                spec.stride,
            )
            if min(geometry) < 1 or spec.padding < 0:
                raise ConfigurationError(f"Layer {i}: invalid conv geometry")
            if spec.fan_in != spec.in_channels * spec.kernel_height * spec.kernel_width:
                raise ConfigurationError(f"Layer {i}: fan_in does not match kernel")
            if spec.out_height < 1 or spec.out_width < 1:
                raise ConfigurationError(f"Layer {i}: kernel larger than input")
        else:
            seen_dense = True

        if i == 0:
            continue
        prev = specs[i - 1]
        if spec.kind == "conv2d":
            chained = (
                spec.in_channels == prev.node_count
                and spec.in_height == prev.out_height
                and spec.in_width == prev.out_width
            )
        else:
            chained = spec.fan_in == prev.out_features
        if not chained:
            raise ConfigurationError(
                f"Layer {i} does not fit the output of layer {i - 1} "
                f"({prev.out_features} features)"
            )


@dataclass
class NetworkParams:
    """All trainable parameters.

    Attributes:
        specs: Hidden layer specifications.
        layers: One `(node_count, fan_in + 1)` matrix per hidden layer.
        heads: One `(n_classes, head_fan_in + 1)` matrix per task.
    """

    specs: tuple[LayerSpec, ...]
    layers: list[np.ndarray]
    heads: list[np.ndarray]

    def weights(self, layer: int) -> np.ndarray:
        """Incoming weight matrix of a hidden layer (view)."""
        return self.layers[layer][:, :-1]

    def bias(self, layer: int) -> np.ndarray:
        """Bias vector of a hidden layer (view)."""
        return self.layers[layer][:, -1]

    @property
    def head_fan_in(self) -> int:
        """Width of the representation read by the output heads."""
        return self.specs[-1].out_features

    def copy(self) -> "NetworkParams":
        """Deep copy."""
        return NetworkParams(
            specs=self.specs,
            layers=[layer.copy() for layer in self.layers],
            heads=[head.copy() for head in self.heads],
        )


@dataclass
class ForwardTrace:
    """Everything a forward pass computed for one minibatch.

    Attributes:
        activations: Post-ReLU output of each hidden layer, `(B, N)` for dense
            and `(B, N, H, W)` for conv layers.
        logits: Output of the active head, `(B, n_classes)`.
    """

    activations: list[np.ndarray]
    logits: np.ndarray
    layer_inputs: list[np.ndarray] = field(default_factory=list, repr=False)
    head_input: np.ndarray | None = field(default=None, repr=False)


@dataclass
class GradientSet:
    """Gradients shaped exactly like `NetworkParams.layers` and `.heads`."""

    layers: list[np.ndarray]
    heads: list[np.ndarray]


def initial_weights(
    rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]
) -> np.ndarray:
    """Draw zero-mean normal weights with variance `2 / fan_in`."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _fresh_matrix(rng: np.random.Generator, rows: int, fan_in: int) -> np.ndarray:
    matrix = np.zeros((rows, fan_in + 1), dtype=np.float64)
    matrix[:, :-1] = initial_weights(rng, fan_in, (rows, fan_in))
    return matrix


def init_network(
    specs: Sequence[LayerSpec], head_dims: Sequence[int], rng: np.random.Generator
) -> NetworkParams:
    """Randomly initialize a network.

    Weights are drawn with variance `2 / fan_in`; biases start at zero. Heads
    are drawn after all hidden layers, in task order.

    Args:
        specs: Hidden layer specifications
        head_dims: Number of classes of each task's output head
        rng: Source of randomness

    Returns:
        Freshly initialized parameters.

    Raises:
        ConfigurationError: The layer chain is inconsistent or a head has no
            classes.
    """
    specs = tuple(specs)
    validate_specs(specs)
    if any(c < 1 for c in head_dims):
        raise ConfigurationError("Every output head needs at least one class")

    layers = [_fresh_matrix(rng, spec.node_count, spec.fan_in) for spec in specs]
    fan = specs[-1].out_features
    heads = [_fresh_matrix(rng, c, fan) for c in head_dims]
    return NetworkParams(specs=specs, layers=layers, heads=heads)


def _im2col(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    p, s = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(
        x, (spec.kernel_height, spec.kernel_width), axis=(2, 3)
    )[:, :, ::s, ::s]
    # (B, C, Ho, Wo, kh, kw) -> (B * Ho * Wo, C * kh * kw)
    batch = x.shape[0]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(
        batch * spec.out_height * spec.out_width, spec.fan_in
    )


def _col2im(cols: np.ndarray, spec: LayerSpec, batch: int) -> np.ndarray:
    p, s = spec.padding, spec.stride
    ho, wo = spec.out_height, spec.out_width
    kh, kw = spec.kernel_height, spec.kernel_width
    grads = cols.reshape(batch, ho, wo, spec.in_channels, kh, kw)
    padded = np.zeros(
        (batch, spec.in_channels, spec.in_height + 2 * p, spec.in_width + 2 * p)
    )
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + s * ho : s, j : j + s * wo : s] += grads[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return padded[:, :, p : p + spec.in_height, p : p + spec.in_width]


def _as_input(spec: LayerSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if spec.kind == "conv2d":
        shape = (spec.in_channels, spec.in_height, spec.in_width)
        if x.ndim == 2 and x.shape[1] == int(np.prod(shape)):
            return x.reshape((x.shape[0],) + shape)
        if x.ndim == 4 and x.shape[1:] == shape:
            return x
        raise DataError(f"Input of shape {x.shape[1:]} does not match {shape}")
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != spec.fan_in:
        raise DataError(f"Input has {x.shape[1]} features, expected {spec.fan_in}")
    return x


def forward(
    params: NetworkParams,
    batch: np.ndarray,
    task_id: int,
    dropped: Sequence[np.ndarray | None] | None = None,
) -> ForwardTrace:
    """Run a minibatch through the hidden layers and one task's head.

    Args:
        params: Network parameters
        batch: Inputs, `(B, features)`; conv networks also accept
            `(B, C, H, W)`
        task_id: Which output head to use
        dropped: Optional boolean node selector per hidden layer; selected
            nodes have their activation forced to zero

    Returns:
        Activations of every hidden layer and the head's logits.

    Raises:
        KeyError: There is no head for `task_id`.
        DataError: The inputs do not match the first layer.
    """
    if not 0 <= task_id < len(params.heads):
        raise KeyError(f"No output head for task {task_id}")

    x = _as_input(params.specs[0], batch)
    n = x.shape[0]
    activations, layer_inputs = [], []
    for index, (spec, layer) in enumerate(zip(params.specs, params.layers)):
        if spec.kind == "conv2d":
            cols = _im2col(x, spec)
            pre = cols @ layer[:, :-1].T + layer[:, -1]
            pre = pre.reshape(n, spec.out_height, spec.out_width, spec.node_count)
            pre = pre.transpose(0, 3, 1, 2)
            layer_inputs.append(cols)
        else:
            x = x.reshape(n, -1)
            pre = x @ layer[:, :-1].T + layer[:, -1]
            layer_inputs.append(x)
        act = np.maximum(pre, 0.0)
        if dropped is not None and dropped[index] is not None:
            act[:, dropped[index]] = 0.0
        activations.append(act)
        x = act

    head_input = x.reshape(n, -1)
    head = params.heads[task_id]
    logits = head_input @ head[:, :-1].T + head[:, -1]
    return ForwardTrace(
        activations=activations,
        logits=logits,
        layer_inputs=layer_inputs,
        head_input=head_input,
    )


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"Labels must lie in 0..{n_classes - 1}")
    return labels.astype(np.intp, copy=False)


def _softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def task_loss_and_grad(
    params: NetworkParams, batch: LabeledBatch, task_id: int
) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy of one task and its exact gradient.

    Heads of other tasks receive an all-zero gradient.

    Raises:
        KeyError: There is no head for `task_id`.
        DataError: A label is outside the head's class range.
    """
    if not 0 <= task_id < len(params.heads):
        raise KeyError(f"No output head for task {task_id}")
    head = params.heads[task_id]
    labels = _check_labels(batch.labels, head.shape[0])

    trace = forward(params, batch.inputs, task_id)
    loss, dlogits = _softmax_cross_entropy(trace.logits, labels)

    grads = GradientSet(
        layers=[np.zeros_like(layer) for layer in params.layers],
        heads=[np.zeros_like(h) for h in params.heads],
    )
    g_head = grads.heads[task_id]
    g_head[:, :-1] = dlogits.T @ trace.head_input
    g_head[:, -1] = dlogits.sum(axis=0)

    n = dlogits.shape[0]
    delta = (dlogits @ head[:, :-1]).reshape(trace.activations[-1].shape)
    for index in reversed(range(len(params.layers))):
        spec, layer = params.specs[index], params.layers[index]
        delta = delta * (trace.activations[index] > 0.0)
        if spec.kind == "conv2d":
            delta = delta.transpose(0, 2, 3, 1).reshape(-1, spec.node_count)
        grads.layers[index][:, :-1] = delta.T @ trace.layer_inputs[index]
        grads.layers[index][:, -1] = delta.sum(axis=0)
        if index == 0:
            break
        upstream = delta @ layer[:, :-1]
        if spec.kind == "conv2d":
            upstream = _col2im(upstream, spec, n)
        delta = upstream.reshape(trace.activations[index - 1].shape)

    return loss, grads


def _node_scalars(activation: np.ndarray) -> np.ndarray:
    # conv channels are summarized by the spatial mean of their map
    if activation.ndim == 4:
        return activation.mean(axis=(2, 3))
    return activation


def mean_node_activations(
    params: NetworkParams,
    dataset: Iterable[LabeledBatch | np.ndarray],
    task_id: int,
) -> dict[NodeId, float]:
    """Mean post-ReLU activation of every hidden node over a dataset.

    Per-example node scalars are gathered first and averaged in one pass, so
    the result does not depend on how the dataset is cut into minibatches.

    Raises:
        DataError: The dataset is empty.
    """
    per_layer: list[list[np.ndarray]] = [[] for _ in params.layers]
    for batch in dataset:
        inputs = batch.inputs if isinstance(batch, LabeledBatch) else batch
        if len(inputs) == 0:
            continue
        trace = forward(params, inputs, task_id)
        for index, act in enumerate(trace.activations):
            per_layer[index].append(_node_scalars(act))

    if not per_layer[0]:
        raise DataError("Cannot average activations over an empty dataset")

    means: dict[NodeId, float] = {}
    for index, chunks in enumerate(per_layer):
        layer_means = np.concatenate(chunks, axis=0).mean(axis=0)
        for n, value in enumerate(layer_means):
            means[NodeId(index, n)] = float(value)
    return means


def _batches(split: LabeledBatch, batch_size: int):
    for start in range(0, len(split.labels), batch_size):
        stop = start + batch_size
        yield LabeledBatch(split.inputs[start:stop], split.labels[start:stop])


def evaluate_loss(
    params: NetworkParams, split: LabeledBatch, task_id: int, batch_size: int = 1024
) -> float:
    """Mean cross-entropy of a task over a whole split."""
    n = len(split.labels)
    if n == 0:
        raise DataError("Cannot evaluate the loss of an empty split")
    labels = _check_labels(split.labels, params.heads[task_id].shape[0])
    total = 0.0
    for batch in _batches(LabeledBatch(split.inputs, labels), batch_size):
        trace = forward(params, batch.inputs, task_id)
        loss, _ = _softmax_cross_entropy(trace.logits, batch.labels)
        total += loss * len(batch.labels)
    return total / n


def accuracy(
    params: NetworkParams,
    split: LabeledBatch,
    task_id: int,
    batch_size: int = 1024,
    dropped: Sequence[np.ndarray | None] | None = None,
) -> float:
    """Fraction of a split classified correctly by one task's head."""
    n = len(split.labels)
    if n == 0:
        raise DataError("Cannot evaluate the accuracy of an empty split")
    correct = 0
    for batch in _batches(split, batch_size):
        trace = forward(params, batch.inputs, task_id, dropped=dropped)
        correct += int(np.sum(trace.logits.argmax(axis=1) == batch.labels))
    return correct / n

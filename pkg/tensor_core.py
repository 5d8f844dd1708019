"""
Numeric core for simsmith networks.

Batched float64 layers with forward and backward passes, the squared-error
loss and the Adam optimizer. Everything here is a pure function of its
arguments except the Tape, which records one forward pass so that
backward() can differentiate it.

Shapes:
- Tensor3: numpy array (b datasets, n samples, k columns)
- Matrix2: numpy array (rows, cols), one row per dataset

Layer kinds:
- coordinate_dense: affine map + activation applied to every sample row
  with weights shared across samples and datasets
- collapse: pools the sample axis (mean, sdev, cov, projection)
- dense: affine map + activation on collapsed rows
- activation: elementwise relu / identity on either shape

Collapse layers sum over samples in sorted order, so their output does not
depend on the order of the sample axis, bit for bit.

Canonical parameter order is the order of the layer list handed to the
Tape / flatten_parameters, and within a layer weights (row-major) before
bias.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from utils import ConfigurationError, DimensionError, InsufficientSamplesError, TapeStateError

LAYER_KINDS = ("coordinate_dense", "collapse", "dense", "activation")
COLLAPSE_KINDS = ("mean", "sdev", "cov", "projection")
ACTIVATIONS = ("relu", "identity")


# ==================== LAYERS ====================

@dataclass
class Layer:
    """
    One network layer.

    weights/bias are None for mean/sdev/cov collapsing and activation
    layers. Projection collapsing carries weights of shape
    (input cols, n_proj) and a bias of length n_proj.
    """
    kind: str
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    activation: str = "identity"
    collapse: Optional[str] = None
    n_proj: int = 0

    @property
    def trainable(self) -> bool:
        return self.weights is not None

    @property
    def n_parameters(self) -> int:
        if not self.trainable:
            return 0
        return int(self.weights.size + self.bias.size)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Weights uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def coordinate_dense_layer(in_cols: int, out_cols: int, rng: np.random.Generator,
                           activation: str = "relu") -> Layer:
    _check_activation(activation)
    return Layer("coordinate_dense", glorot_uniform(in_cols, out_cols, rng),
                 np.zeros(out_cols), activation=activation)


def dense_layer(in_cols: int, out_cols: int, rng: np.random.Generator,
                activation: str = "relu") -> Layer:
    _check_activation(activation)
    return Layer("dense", glorot_uniform(in_cols, out_cols, rng),
                 np.zeros(out_cols), activation=activation)


def collapse_layer(kind: str, in_cols: int, rng: Optional[np.random.Generator] = None,
                   n_proj: int = 0) -> Layer:
    """Build a collapse layer; projection needs rng and n_proj >= 1."""
    if kind not in COLLAPSE_KINDS:
        raise ConfigurationError(f"collapsing must be one of {COLLAPSE_KINDS}, got {kind!r}")
    if kind != "projection":
        return Layer("collapse", collapse=kind)
    if n_proj < 1:
        raise ConfigurationError(f"n_proj must be >= 1 for projection collapsing, got {n_proj}")
    return Layer("collapse", glorot_uniform(in_cols, n_proj, rng), np.zeros(n_proj),
                 activation="relu", collapse="projection", n_proj=n_proj)


def activation_layer(activation: str = "relu") -> Layer:
    _check_activation(activation)
    return Layer("activation", activation=activation)


def collapse_width(kind: str, in_cols: int, n_proj: int = 0) -> int:
    """Number of features a collapse kind emits per dataset."""
    if kind in ("mean", "sdev"):
        return in_cols
    if kind == "cov":
        return in_cols * (in_cols + 1) // 2
    if kind == "projection":
        return n_proj
    raise ConfigurationError(f"collapsing must be one of {COLLAPSE_KINDS}, got {kind!r}")


def _check_activation(activation: str) -> None:
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")


def _require_kind(layer: Layer, kind: str) -> None:
    if layer.kind != kind:
        raise ValueError(f"Expected a {kind} layer, got {layer.kind}")


# ==================== SHAPE HELPERS ====================

def as_tensor3(values) -> np.ndarray:
    """Return values as a float64 (b, n, k) array or raise DimensionError."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 3:
        raise DimensionError(f"Expected a (datasets, samples, columns) tensor, got {array.ndim} axes")
    return array


def as_matrix2(values) -> np.ndarray:
    """Return values as a float64 (rows, cols) array or raise DimensionError."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise DimensionError(f"Expected a (rows, columns) matrix, got {array.ndim} axes")
    return array


def _check_columns(x: np.ndarray, layer: Layer) -> None:
    expected = layer.weights.shape[0]
    if x.shape[-1] != expected:
        raise DimensionError(f"column axis: input has {x.shape[-1]} columns, layer expects {expected}")


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, grad: np.ndarray, activation: str) -> np.ndarray:
    # relu subgradient at exactly 0 is 0
    if activation == "relu":
        return grad * (z > 0.0)
    return grad


def _sorted_sum(values: np.ndarray) -> np.ndarray:
    """Sum over the sample axis (1) independent of sample order."""
    return np.sort(values, axis=1).sum(axis=1)


def _rowwise_affine(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # elementwise accumulation: each row is computed with identical operations
    z = np.broadcast_to(bias, x.shape[:-1] + bias.shape).copy()
    for j in range(x.shape[-1]):
        z += x[..., j, None] * weights[j]
    return z


# ==================== FORWARD ====================

def _layer_forward(layer: Layer, x: np.ndarray):
    """Run one layer; returns (output, cache needed by backward)."""
    if layer.kind == "coordinate_dense":
        x = as_tensor3(x)
        _check_columns(x, layer)
        z = _rowwise_affine(x, layer.weights, layer.bias)
        return _activate(z, layer.activation), z

    if layer.kind == "dense":
        x = as_matrix2(x)
        _check_columns(x, layer)
        z = x @ layer.weights + layer.bias
        return _activate(z, layer.activation), z

    if layer.kind == "activation":
        x = np.asarray(x, dtype=np.float64)
        return _activate(x, layer.activation), x

    if layer.kind == "collapse":
        return _collapse(as_tensor3(x), layer)

    raise ConfigurationError(f"Unknown layer kind: {layer.kind}")


def _collapse(x: np.ndarray, layer: Layer):
    b, n, k = x.shape
    kind = layer.collapse

    if kind == "mean":
        return _sorted_sum(x) / n, None

    if kind == "projection":
        _check_columns(x, layer)
        z = _rowwise_affine(x, layer.weights, layer.bias)
        return _sorted_sum(np.maximum(z, 0.0)) / n, z

    if n < 2:
        raise InsufficientSamplesError(f"{kind} collapsing needs at least 2 samples per dataset, got {n}")

    centered = x - (_sorted_sum(x) / n)[:, None, :]

    if kind == "sdev":
        sdev = np.sqrt(_sorted_sum(centered * centered) / (n - 1))
        return sdev, (centered, sdev)

    if kind == "cov":
        rows, cols = np.triu_indices(k)
        products = centered[:, :, rows] * centered[:, :, cols]
        return _sorted_sum(products) / (n - 1), centered

    raise ConfigurationError(f"collapsing must be one of {COLLAPSE_KINDS}, got {kind!r}")


def coordinate_dense_forward(x, layer: Layer) -> np.ndarray:
    """
    Apply a coordinate-wise dense layer to every sample row.

    Args:
        x: Tensor3 (b, n, k)
        layer: coordinate_dense layer with weights (k, l)

    Returns:
        Tensor3 (b, n, l)

    Raises:
        DimensionError: input columns do not match the layer
    """
    _require_kind(layer, "coordinate_dense")
    return _layer_forward(layer, x)[0]


def collapse_forward(x, layer: Layer) -> np.ndarray:
    """
    Pool the sample axis of every dataset into a feature row.

    mean and sdev emit k features, cov the k(k+1)/2 upper-triangle entries
    of the sample covariance (row-major, diagonal included), projection the
    mean over samples of relu(row . w_p + b_p) for each of n_proj
    projections. sdev and cov use the n-1 divisor.
    """
    _require_kind(layer, "collapse")
    return _layer_forward(layer, x)[0]


def dense_forward(x, layer: Layer) -> np.ndarray:
    """Apply a dense layer to every row of a Matrix2."""
    _require_kind(layer, "dense")
    return _layer_forward(layer, x)[0]


def activation_forward(x, layer: Layer) -> np.ndarray:
    _require_kind(layer, "activation")
    return _layer_forward(layer, x)[0]


# ==================== LOSS ====================

def mse_loss(pred, target) -> float:
    """Mean over all entries of the squared differences."""
    pred, target = as_matrix2(pred), as_matrix2(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_loss_grad(pred, target) -> np.ndarray:
    """Gradient of mse_loss with respect to pred."""
    pred, target = as_matrix2(pred), as_matrix2(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return 2.0 * (pred - target) / pred.size


# ==================== TAPE / BACKWARD ====================

@dataclass(frozen=True)
class Node:
    """A value produced during a recorded forward pass."""
    index: int
    value: np.ndarray


@dataclass
class _Entry:
    op: str
    inputs: tuple
    output: int
    layer: Optional[Layer] = None
    value_in: Optional[np.ndarray] = None
    cache: object = None
    widths: tuple = ()


class Tape:
    """
    Records a forward pass over a graph of layers.

    layers is the list of trainable layers in canonical parameter order;
    backward() returns gradients laid out in that order. With record=False
    the tape only evaluates (no intermediates kept, backward unavailable).
    """

    def __init__(self, layers, record: bool = True):
        self.layers = [layer for layer in layers if layer.trainable]
        self.record = record
        self._positions = {id(layer): i for i, layer in enumerate(self.layers)}
        self._entries: list[_Entry] = []
        self._inputs: set[int] = set()
        self._count = 0
        self.output: Optional[Node] = None

    def _node(self, value: np.ndarray) -> Node:
        node = Node(self._count, value)
        self._count += 1
        self.output = node
        return node

    def input(self, value) -> Node:
        node = self._node(np.asarray(value, dtype=np.float64))
        self._inputs.add(node.index)
        return node

    def apply(self, layer: Layer, node: Node) -> Node:
        value, cache = _layer_forward(layer, node.value)
        out = self._node(value)
        if self.record:
            self._entries.append(_Entry("layer", (node.index,), out.index, layer, node.value, cache))
        return out

    def concat(self, nodes) -> Node:
        nodes = list(nodes)
        if len(nodes) == 1:
            return nodes[0]
        value = np.concatenate([node.value for node in nodes], axis=1)
        out = self._node(value)
        if self.record:
            widths = tuple(node.value.shape[1] for node in nodes)
            self._entries.append(_Entry("concat", tuple(node.index for node in nodes), out.index,
                                        widths=widths))
        return out

    @property
    def recorded(self) -> bool:
        return bool(self._entries)


def _layer_backward(layer: Layer, x: np.ndarray, cache, grad: np.ndarray, need_input: bool):
    """Returns (grad wrt input or None, grad weights or None, grad bias or None)."""
    if layer.kind in ("coordinate_dense", "dense"):
        gz = _activation_grad(cache, grad, layer.activation)
        k, l = layer.weights.shape
        gw = x.reshape(-1, k).T @ gz.reshape(-1, l)
        gb = gz.reshape(-1, l).sum(axis=0)
        gx = gz @ layer.weights.T if need_input else None
        return gx, gw, gb

    if layer.kind == "activation":
        return _activation_grad(cache, grad, layer.activation), None, None

    b, n, k = x.shape
    kind = layer.collapse

    if kind == "mean":
        return np.broadcast_to(grad[:, None, :] / n, x.shape).copy(), None, None

    if kind == "sdev":
        centered, sdev = cache
        safe = np.where(sdev > 0.0, sdev, 1.0)
        coef = np.where(sdev > 0.0, grad / ((n - 1) * safe), 0.0)
        return centered * coef[:, None, :], None, None

    if kind == "cov":
        rows, cols = np.triu_indices(k)
        upper = np.zeros((b, k, k))
        upper[:, rows, cols] = grad
        return cache @ (upper + upper.transpose(0, 2, 1)) / (n - 1), None, None

    # projection
    gz = grad[:, None, :] / n * (cache > 0.0)
    p = layer.n_proj
    gw = x.reshape(-1, k).T @ gz.reshape(-1, p)
    gb = gz.reshape(-1, p).sum(axis=0)
    gx = gz @ layer.weights.T if need_input else None
    return gx, gw, gb


def _accumulate(store: dict, key: int, value: np.ndarray) -> None:
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


def backward(tape: Tape, loss_grad) -> np.ndarray:
    """
    Reverse-mode pass over a recorded tape.

    Args:
        tape: Tape holding a forward pass
        loss_grad: d loss / d output, same shape as tape.output.value

    Returns:
        Flat gradient over the tape's trainable layers in canonical order.
        Layers that did not take part in the pass get zero gradients.

    Raises:
        TapeStateError: nothing was recorded
        DimensionError: loss_grad shape does not match the output
    """
    if not tape.recorded:
        raise TapeStateError("backward called without a recorded forward pass")

    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != tape.output.value.shape:
        raise DimensionError(f"loss gradient shape {loss_grad.shape} does not match output shape "
                             f"{tape.output.value.shape}")

    grads = {tape.output.index: loss_grad}
    weight_grads: dict[int, np.ndarray] = {}
    bias_grads: dict[int, np.ndarray] = {}

    for entry in reversed(tape._entries):
        grad = grads.pop(entry.output, None)
        if grad is None:
            continue

        if entry.op == "concat":
            parts = np.split(grad, np.cumsum(entry.widths)[:-1], axis=1)
            for index, part in zip(entry.inputs, parts):
                _accumulate(grads, index, part)
            continue

        source = entry.inputs[0]
        gx, gw, gb = _layer_backward(entry.layer, entry.value_in, entry.cache, grad,
                                     need_input=source not in tape._inputs)
        if gw is not None:
            position = tape._positions[id(entry.layer)]
            _accumulate(weight_grads, position, gw)
            _accumulate(bias_grads, position, gb)
        if gx is not None:
            _accumulate(grads, source, gx)

    flat = []
    for position, layer in enumerate(tape.layers):
        flat.append(weight_grads.get(position, np.zeros_like(layer.weights)).ravel())
        flat.append(bias_grads.get(position, np.zeros_like(layer.bias)).ravel())
    return np.concatenate(flat) if flat else np.zeros(0)


# ==================== PARAMETERS ====================

def count_parameters(layers) -> int:
    return sum(layer.n_parameters for layer in layers)


def flatten_parameters(layers) -> np.ndarray:
    """Concatenate weights then bias of every trainable layer, in order."""
    parts = []
    for layer in layers:
        if layer.trainable:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def assign_parameters(layers, flat) -> None:
    """
    Write a flat parameter vector back into the layers (in place).

    Raises DimensionError if the length does not match the layers exactly.
    """
    flat = np.asarray(flat, dtype=np.float64)
    expected = count_parameters(layers)
    if flat.ndim != 1 or flat.size != expected:
        raise DimensionError(f"parameter vector has {flat.size} values, layers need {expected}")
    offset = 0
    for layer in layers:
        if not layer.trainable:
            continue
        size = layer.weights.size
        layer.weights = flat[offset:offset + size].reshape(layer.weights.shape).copy()
        offset += size
        size = layer.bias.size
        layer.bias = flat[offset:offset + size].copy()
        offset += size


# ==================== OPTIMIZER ====================

@dataclass
class AdamState:
    """First/second moment estimates and hyperparameters of Adam."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise DimensionError(f"moment lengths differ: {self.m.shape} vs {self.v.shape}")
        if self.t < 0:
            raise ConfigurationError(f"step counter must be >= 0, got {self.t}")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {getattr(self, name)}")


def new_adam_state(n_parameters: int, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n_parameters), np.zeros(n_parameters), 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState):
    """
    One Adam update with bias correction.

    Returns (new params, new state); the inputs are left untouched.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(f"length mismatch: params {params.shape}, grads {grads.shape}, "
                             f"state {state.m.shape}")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)

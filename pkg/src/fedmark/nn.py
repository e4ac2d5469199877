"""Minimal dense-network machinery on float64 numpy arrays.

Networks are plain values: a list of (weight, bias, activation) layers.
All training code in the package goes through `forward` / `backward` /
`sgd_step`, and every gradient here is verifiable against central finite
differences (see tests).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass
class SGDConfig:
    learning_rate: float = 0.01
    batch_size: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class DenseLayer:
    weight: np.ndarray  # [fan_in, fan_out]
    bias: np.ndarray  # [fan_out]
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weight must be 2-d and bias 1-d")
        if self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeError(
                f"bias size {self.bias.shape[0]} != fan_out {self.weight.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class DenseNet:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("DenseNet needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {a.weight.shape[1]} -> {b.weight.shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_net(dims, rng, hidden_activation="relu", out_activation="identity") -> DenseNet:
    """Build a net with layer sizes ``dims`` = [in, h1, ..., out].

    Weights are uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
    """
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        act = out_activation if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


def _apply_act(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def forward(net: DenseNet, x) -> np.ndarray:
    """Run the net on a [batch, input_dim] array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected [batch, {net.input_dim}] input, got {x.shape}")
    a = x
    for layer in net.layers:
        a = _apply_act(a @ layer.weight + layer.bias, layer.activation)
    _require_finite(a, "forward output")
    return a


def forward_trace(net: DenseNet, x):
    """Like `forward` but also returns the per-layer pre-activations
    and inputs needed for `backward_from_trace`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected [batch, {net.input_dim}] input, got {x.shape}")
    inputs, preacts = [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weight + layer.bias
        preacts.append(z)
        a = _apply_act(z, layer.activation)
    _require_finite(a, "forward output")
    return a, (inputs, preacts)


def backward_from_trace(net: DenseNet, trace, upstream_grad):
    """Backprop given the trace from `forward_trace`.

    Returns ([(dW, db) per layer], input_grad).
    """
    inputs, preacts = trace
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != (inputs[0].shape[0], net.output_dim):
        raise ShapeError(
            f"upstream_grad shape {g.shape} != ({inputs[0].shape[0]}, {net.output_dim})"
        )
    param_grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * (preacts[i] > 0.0) if layer.activation == "relu" else g
        param_grads[i] = (inputs[i].T @ dz, dz.sum(axis=0))
        g = dz @ layer.weight.T
    _require_finite(g, "input gradient")
    return param_grads, g


def backward(net: DenseNet, x, upstream_grad):
    """Gradients of sum(forward(net, x) * upstream_grad) w.r.t. params and x."""
    _, trace = forward_trace(net, x)
    return backward_from_trace(net, trace, upstream_grad)


def sgd_step(net: DenseNet, param_grads, cfg: SGDConfig) -> DenseNet:
    """One SGD update, w' = w - lr * g. Returns a new net."""
    if len(param_grads) != len(net.layers):
        raise ShapeError("gradient list length != number of layers")
    lr = cfg.learning_rate
    layers = []
    for layer, (dw, db) in zip(net.layers, param_grads):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ShapeError(
                f"gradient shapes {dw.shape}/{db.shape} do not match layer "
                f"{layer.weight.shape}/{layer.bias.shape}"
            )
        layers.append(
            DenseLayer(layer.weight - lr * dw, layer.bias - lr * db, layer.activation)
        )
    return DenseNet(layers)


def l2_normalize(v) -> np.ndarray:
    """Scale each row of [batch, d] to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected a [batch, d] array, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize an all-zero row")
    out = v / norms
    _require_finite(out, "l2_normalize output")
    return out


def l2_normalize_backward(v, grad_out) -> np.ndarray:
    """Gradient w.r.t. the pre-normalization rows `v`."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != v.shape:
        raise ShapeError(f"grad shape {g.shape} != input shape {v.shape}")
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize an all-zero row")
    y = v / norms
    return (g - (g * y).sum(axis=1, keepdims=True) * y) / norms

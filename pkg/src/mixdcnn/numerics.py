"""
Dense layers with hand-written backward rules, softmax/cross-entropy and plain SGD.

Tensors are float64 numpy arrays. Every layer exposes

    forward(x)            -> (y, cache)
    backward(cache, dy)   -> dx       (parameter gradients are accumulated into .grad)

so a forward pass never mutates the layer and can be shared across samples.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite during training."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


# -----------------------------------------------------------------------------
# Softmax / loss
# -----------------------------------------------------------------------------


def softmax(z, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = as_tensor(z)
    if z.ndim == 0 or z.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = as_tensor(z)
    if z.ndim == 0 or z.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_labels(labels: np.ndarray, n: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range [0, {n})")


def cross_entropy(logits, label):
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is (N,) with an integer ``label`` or (B, N) with a label array.
    Returns ``(loss, grad)`` where loss is per-sample (scalar or (B,)) and
    ``grad = softmax(logits) - one_hot(label)`` (not divided by B).
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {z.shape[0]} rows")
    _check_labels(y, z.shape[1])
    rows = np.arange(z.shape[0])
    loss = -log_softmax(z)[rows, y]
    grad = softmax(z)
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


# -----------------------------------------------------------------------------
# Parameters and layers
# -----------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass(frozen=True)
class LayerSpec:
    """kind is one of linear, relu, conv2d, maxpool2d, flatten.

    dims: linear (in, out); conv2d (in_channels, out_channels, kernel, stride);
    maxpool2d (size,); relu/flatten ().
    """

    kind: str
    dims: tuple = ()

    def __post_init__(self):
        arity = {"linear": 2, "relu": 0, "conv2d": 4, "maxpool2d": 1, "flatten": 0}
        if self.kind not in arity:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if len(self.dims) != arity[self.kind]:
            raise ValueError(f"{self.kind} expects {arity[self.kind]} dims, got {self.dims}")
        if any(int(d) <= 0 for d in self.dims):
            raise ValueError(f"{self.kind} dims must be positive, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def __str__(self) -> str:
        return ":".join([self.kind, *map(str, self.dims)])

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        kind, *dims = text.strip().split(":")
        return cls(kind, tuple(int(d) for d in dims))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    spec: LayerSpec
    params: list[Parameter] = []

    def output_shape(self, input_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, prefix: str):
        n_in, n_out = spec.dims
        self.spec = spec
        self.weight = Parameter(f"{prefix}.weight", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(n_out))
        self.params = [self.weight, self.bias]

    def output_shape(self, input_shape):
        if input_shape != (self.spec.dims[0],):
            raise ValueError(f"linear expects input shape ({self.spec.dims[0]},), got {input_shape}")
        return (self.spec.dims[1],)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.spec.dims[0]:
            raise ValueError(f"linear expects (B, {self.spec.dims[0]}), got {x.shape}")
        return x @ self.weight.value + self.bias.value, x

    def backward(self, x, dy):
        self.weight.grad += x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


class ReLU(Layer):
    def __init__(self, spec: LayerSpec, rng=None, prefix: str = ""):
        self.spec = spec
        self.params = []

    def output_shape(self, input_shape):
        return input_shape

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, x, dy):
        # subgradient 0 at x == 0
        return dy * (x > 0)


class Flatten(Layer):
    def __init__(self, spec: LayerSpec, rng=None, prefix: str = ""):
        self.spec = spec
        self.params = []

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, dy):
        return dy.reshape(shape)


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View (B, C, H, W) as (B, C, Ho, Wo, k, k) sliding windows."""
    w = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


class Conv2d(Layer):
    """Valid (no padding) 2-D convolution over (B, C, H, W) inputs."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, prefix: str):
        c_in, c_out, k, _ = spec.dims
        self.spec = spec
        fan_in, fan_out = c_in * k * k, c_out * k * k
        self.weight = Parameter(f"{prefix}.weight", glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(c_out))
        self.params = [self.weight, self.bias]

    def output_shape(self, input_shape):
        c_in, c_out, k, s = self.spec.dims
        if len(input_shape) != 3 or input_shape[0] != c_in:
            raise ValueError(f"conv2d expects ({c_in}, H, W), got {input_shape}")
        _, h, w = input_shape
        if k > h or k > w:
            raise ValueError(f"conv2d kernel {k} exceeds input extent {h}x{w}")
        return (c_out, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x):
        c_in, _, k, s = self.spec.dims
        if x.ndim != 4 or x.shape[1] != c_in or k > x.shape[2] or k > x.shape[3]:
            raise ValueError(f"conv2d got input of shape {x.shape}")
        cols = _windows(x, k, s)
        y = np.einsum("bchwij,ocij->bohw", cols, self.weight.value, optimize=True)
        y += self.bias.value[None, :, None, None]
        return y, x

    def backward(self, x, dy):
        _, _, k, s = self.spec.dims
        cols = _windows(x, k, s)
        self.weight.grad += np.einsum("bchwij,bohw->ocij", cols, dy, optimize=True)
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        dx = np.zeros_like(x)
        ho, wo = dy.shape[2], dy.shape[3]
        contrib = np.einsum("bohw,ocij->bchwij", dy, self.weight.value, optimize=True)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib[..., i, j]
        return dx


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    def __init__(self, spec: LayerSpec, rng=None, prefix: str = ""):
        self.spec = spec
        self.params = []

    def output_shape(self, input_shape):
        (p,) = self.spec.dims
        c, h, w = input_shape
        if p > h or p > w:
            raise ValueError(f"pool size {p} exceeds input extent {h}x{w}")
        return (c, h // p, w // p)

    def forward(self, x):
        (p,) = self.spec.dims
        b, c, h, w = x.shape
        ho, wo = h // p, w // p
        blocks = x[:, :, : ho * p, : wo * p].reshape(b, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5)
        flat = blocks.reshape(b, c, ho, wo, p * p)
        idx = flat.argmax(axis=-1)  # lowest index on ties
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        (p,) = self.spec.dims
        shape, idx = cache
        b, c, h, w = shape
        ho, wo = h // p, w // p
        flat = np.zeros((b, c, ho, wo, p * p))
        np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
        blocks = flat.reshape(b, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * p, wo * p)
        dx = np.zeros(shape)
        dx[:, :, : ho * p, : wo * p] = blocks
        return dx


LAYER_TYPES = {"linear": Linear, "relu": ReLU, "conv2d": Conv2d, "maxpool2d": MaxPool2d, "flatten": Flatten}


class Network:
    """Feed-forward stack of layers producing a length-N logit vector per sample."""

    def __init__(self, specs, input_shape, rng: np.random.Generator):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.parse(s) for s in specs]
        if not self.specs:
            raise ValueError("network needs at least one layer")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer = LAYER_TYPES[spec.kind](spec, rng, f"layer{i}")
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        if len(shape) != 1:
            raise ValueError(f"network output must be a vector, got shape {shape}")
        self.output_dim = shape[0]

    @classmethod
    def mlp(cls, sizes, rng: np.random.Generator) -> "Network":
        """Linear/ReLU stack: sizes = (in, hidden..., out)."""
        specs = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            specs += [LayerSpec("linear", (a, b)), LayerSpec("relu")]
        return cls(specs[:-1], (sizes[0],), rng)

    @property
    def layout(self) -> str:
        return "x".join(map(str, self.input_shape)) + "|" + ",".join(map(str, self.specs))

    @classmethod
    def from_layout(cls, layout: str) -> "Network":
        shape, _, layers = layout.partition("|")
        return cls(layers.split(","), tuple(int(d) for d in shape.split("x")), np.random.default_rng(0))

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def _check_input(self, x) -> np.ndarray:
        x = as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected input (B, {self.input_shape}), got {x.shape}")
        return x

    def forward(self, x, upto: int | None = None):
        """Run layers [0, upto] (all by default); returns (output, caches)."""
        x = self._check_input(x)
        last = len(self.layers) - 1 if upto is None else upto
        caches = []
        for layer in self.layers[: last + 1]:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, caches, dy) -> np.ndarray:
        for layer, cache in zip(reversed(self.layers[: len(caches)]), reversed(caches)):
            dy = layer.backward(cache, dy)
        return dy

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.value.shape}")
            p.value[...] = state[p.name]


def sgd_step(parameters, learning_rate: float) -> None:
    """value -= lr * grad for every parameter, then zero the grads.

    Gradients are expected to already be averaged over the mini-batch.
    """
    if not learning_rate > 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    parameters = list(parameters)
    for p in parameters:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name}")
    for p in parameters:
        p.value -= learning_rate * p.grad
        p.zero_grad()

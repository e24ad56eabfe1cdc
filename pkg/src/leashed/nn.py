"""Minimal feed-forward networks over a flat parameter array.

Layers: dense, 2-D convolution (valid padding, stride 1), max-pooling
(stride = window, trailing remainder truncated), ReLU and softmax
activations, cross-entropy loss, and exact backpropagation.  All learnable
parameters of a network live in one contiguous 1-D array; the layout is
layer-major with weights before bias inside each layer, so the mapping
between structured parameters and flat indices is a fixed bijection.

Everything here is pure: given the same parameter array and batch, forward
and gradient results are identical, and concurrent calls on shared read-only
parameter views are safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

# -- layer and network specification ------------------------------------------


@dataclass(frozen=True)
class Dense:
    neurons: int
    activation: str = "relu"


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple[int, int]
    activation: str = "relu"


@dataclass(frozen=True)
class MaxPool:
    window: tuple[int, int]
    activation: str = "identity"


Layer = Union[Dense, Conv2D, MaxPool]

_ACTIVATIONS = ("relu", "softmax", "identity")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the input shape (flat size or (c, h, w))."""

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]

    def __post_init__(self) -> None:
        if len(self.input_shape) not in (1, 3):
            raise ValueError("input_shape must be (n,) or (channels, height, width)")
        if not self.layers:
            raise ValueError("network needs at least one layer")
        last = self.layers[-1]
        if not (isinstance(last, Dense) and last.activation == "softmax"):
            raise ValueError("last layer must be Dense with softmax activation")
        for layer in self.layers:
            act = getattr(layer, "activation", "identity")
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")


def mlp_spec() -> NetworkSpec:
    """784 -> three 128-neuron ReLU dense layers -> 10-way softmax."""
    return NetworkSpec(
        input_shape=(784,),
        layers=(
            Dense(128, "relu"),
            Dense(128, "relu"),
            Dense(128, "relu"),
            Dense(10, "softmax"),
        ),
    )


def cnn_spec() -> NetworkSpec:
    """1x28x28 -> conv4@3x3 -> pool2x2 -> conv8@3x3 -> pool2x2 -> 128 -> 10."""
    return NetworkSpec(
        input_shape=(1, 28, 28),
        layers=(
            Conv2D(4, (3, 3), "relu"),
            MaxPool((2, 2), "relu"),
            Conv2D(8, (3, 3), "relu"),
            MaxPool((2, 2), "relu"),
            Dense(128, "relu"),
            Dense(10, "softmax"),
        ),
    )


def tiny_spec(input_dim: int, classes: int, hidden: int = 16) -> NetworkSpec:
    """Small dense net for synthetic desk-scale experiments."""
    return NetworkSpec(
        input_shape=(input_dim,),
        layers=(Dense(hidden, "relu"), Dense(classes, "softmax")),
    )


# -- shape walking and parameter layout ----------------------------------------


def _walk_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Output shape after each layer; raises on any inconsistency."""
    shapes = [spec.input_shape]
    shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            n_in = int(np.prod(shape))
            shape = (layer.neurons,)
        elif isinstance(layer, Conv2D):
            if len(shape) != 3:
                raise ValueError(f"layer {i}: convolution needs a (c, h, w) input")
            c, h, w = shape
            kh, kw = layer.kernel
            if kh < 1 or kw < 1 or kh > h or kw > w:
                raise ValueError(f"layer {i}: kernel {layer.kernel} exceeds input {h}x{w}")
            shape = (layer.filters, h - kh + 1, w - kw + 1)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ValueError(f"layer {i}: max-pool needs a (c, h, w) input")
            c, h, w = shape
            ph, pw = layer.window
            if ph < 1 or pw < 1 or ph > h or pw > w:
                raise ValueError(f"layer {i}: window {layer.window} exceeds input {h}x{w}")
            shape = (c, h // ph, w // pw)
        else:  # pragma: no cover - spec types are closed
            raise TypeError(f"unknown layer type {type(layer)!r}")
        shapes.append(shape)
    return shapes


def param_count(spec: NetworkSpec) -> int:
    """Exact total number of learnable parameters."""
    total = 0
    shapes = _walk_shapes(spec)
    for layer, shape_in in zip(spec.layers, shapes[:-1]):
        if isinstance(layer, Dense):
            n_in = int(np.prod(shape_in))
            total += layer.neurons * n_in + layer.neurons
        elif isinstance(layer, Conv2D):
            c = shape_in[0]
            kh, kw = layer.kernel
            total += layer.filters * (c * kh * kw + 1)
    return total


class Network:
    """A spec bound to its flat parameter layout.

    ``views(theta)`` exposes each layer's weight and bias as reshaped views
    into the flat array, so writes through the views land in ``theta`` and
    the structured/flat mapping is exercised without copies.
    """

    def __init__(self, spec: NetworkSpec) -> None:
        self.spec = spec
        self.shapes = _walk_shapes(spec)
        offsets = []
        pos = 0
        for layer, shape_in in zip(spec.layers, self.shapes[:-1]):
            if isinstance(layer, Dense):
                n_in = int(np.prod(shape_in))
                w_shape = (layer.neurons, n_in)
            elif isinstance(layer, Conv2D):
                w_shape = (layer.filters, shape_in[0], *layer.kernel)
            else:
                offsets.append(None)
                continue
            w_size = int(np.prod(w_shape))
            b_size = w_shape[0]
            offsets.append((pos, w_shape, pos + w_size, b_size))
            pos += w_size + b_size
        self.offsets = offsets
        self.d = pos

    def views(self, theta: np.ndarray) -> list[Optional[tuple[np.ndarray, np.ndarray]]]:
        if theta.shape[0] != self.d:
            raise ValueError(f"theta length {theta.shape[0]} != layout dimension {self.d}")
        out = []
        for entry in self.offsets:
            if entry is None:
                out.append(None)
                continue
            w_pos, w_shape, b_pos, b_size = entry
            w = theta[w_pos : w_pos + int(np.prod(w_shape))].reshape(w_shape)
            b = theta[b_pos : b_pos + b_size]
            out.append((w, b))
        return out

    @property
    def input_is_flat(self) -> bool:
        return len(self.spec.input_shape) == 1

    @property
    def classes(self) -> int:
        last = self.spec.layers[-1]
        assert isinstance(last, Dense)
        return last.neurons


def build_network(arch: str, input_dim: int = 8, classes: int = 3) -> Network:
    """Construct one of the named architectures: mlp, cnn, or tiny."""
    if arch == "mlp":
        return Network(mlp_spec())
    if arch == "cnn":
        return Network(cnn_spec())
    if arch == "tiny":
        return Network(tiny_spec(input_dim, classes))
    raise ValueError(f"unknown architecture {arch!r}")


# -- activations ---------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for numerical stability."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# -- max-pool primitives ---------------------------------------------------------


def forward_maxpool(x: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Non-overlapping max-pool, stride = window, trailing remainder dropped."""
    ph, pw = window
    if ph < 1 or pw < 1:
        raise ValueError("pool window dims must be >= 1")
    h, w = x.shape[-2], x.shape[-1]
    if ph > h or pw > w:
        raise ValueError(f"pool window ({ph},{pw}) larger than input ({h},{w})")
    oh, ow = h // ph, w // pw
    cropped = x[..., : oh * ph, : ow * pw]
    blocks = cropped.reshape(*x.shape[:-2], oh, ph, ow, pw)
    return blocks.max(axis=(-3, -1))


def backward_maxpool(
    x: np.ndarray, window: tuple[int, int], grad_out: np.ndarray
) -> np.ndarray:
    """Route each pooled gradient entirely to its window's argmax position."""
    ph, pw = window
    h, w = x.shape[-2], x.shape[-1]
    oh, ow = h // ph, w // pw
    lead = x.shape[:-2]
    cropped = x[..., : oh * ph, : ow * pw]
    # (..., oh, ow, ph*pw) with the window contents flattened in the last axis
    blocks = cropped.reshape(*lead, oh, ph, ow, pw)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, oh, ow, ph * pw)
    arg = blocks.argmax(axis=-1)
    grad_blocks = np.zeros_like(blocks, dtype=grad_out.dtype)
    np.put_along_axis(grad_blocks, arg[..., None], grad_out[..., None], axis=-1)
    grad_blocks = np.moveaxis(
        grad_blocks.reshape(*lead, oh, ow, ph, pw), -2, -3
    ).reshape(*lead, oh * ph, ow * pw)
    dx = np.zeros_like(x, dtype=grad_out.dtype)
    dx[..., : oh * ph, : ow * pw] = grad_blocks
    return dx


# -- convolution helpers ---------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    """(B, C, H, W) -> ((B, OH*OW, C*kh*kw) patch matrix, OH, OW) for valid conv."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # (B, C, OH, OW, kh, kw) -> (B, OH, OW, C, kh, kw)
    windows = windows.transpose(0, 2, 3, 1, 4, 5)
    b, oh, ow = windows.shape[:3]
    return np.ascontiguousarray(windows).reshape(b, oh * ow, -1), oh, ow


def _col2im(
    dpatches: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int, oh: int, ow: int
) -> np.ndarray:
    b, c, h, w = x_shape
    dp = dpatches.reshape(b, oh, ow, c, kh, kw)
    dx = np.zeros(x_shape, dtype=dpatches.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + oh, j : j + ow] += dp[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


# -- forward / backward -----------------------------------------------------------


def _apply_activation(act: str, z: np.ndarray) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0)
    if act == "identity":
        return z
    raise ValueError(f"activation {act!r} only valid on the output layer")


def _forward(network: Network, theta: np.ndarray, x: np.ndarray):
    """Run the network, returning per-layer caches for backprop.

    Returns (logits, caches, activations): caches hold whatever each layer's
    backward pass needs; activations are the post-activation outputs per layer.
    """
    spec = network.spec
    views = network.views(theta)
    if network.input_is_flat:
        a = x.reshape(x.shape[0], -1)
        if a.shape[1] != spec.input_shape[0]:
            raise ValueError(
                f"input size {a.shape[1]} != expected {spec.input_shape[0]}"
            )
    else:
        if x.ndim != 4 or x.shape[1:] != spec.input_shape:
            raise ValueError(
                f"input shape {x.shape[1:]} != expected {spec.input_shape}"
            )
        a = x
    a = a.astype(theta.dtype, copy=False)
    caches = []
    activations = []
    logits = None
    for i, layer in enumerate(spec.layers):
        last = i == len(spec.layers) - 1
        if isinstance(layer, Dense):
            flat_in = a.reshape(a.shape[0], -1)
            w, b = views[i]
            z = flat_in @ w.T + b
            if last:
                caches.append(("dense_out", flat_in, a.shape))
                logits = z
                a = softmax(z)
            else:
                caches.append(("dense", flat_in, a.shape, z))
                a = _apply_activation(layer.activation, z)
        elif isinstance(layer, Conv2D):
            w, b = views[i]
            kh, kw = layer.kernel
            patches, oh, ow = _im2col(a, kh, kw)
            wcol = w.reshape(layer.filters, -1)
            z = patches @ wcol.T + b  # (B, OH*OW, F)
            z = z.transpose(0, 2, 1).reshape(a.shape[0], layer.filters, oh, ow)
            caches.append(("conv", patches, a.shape, (oh, ow), z))
            a = _apply_activation(layer.activation, z)
        else:  # MaxPool
            pooled = forward_maxpool(a, layer.window)
            caches.append(("pool", a, pooled))
            a = _apply_activation(layer.activation, pooled)
        activations.append(a)
    return logits, caches, activations


def forward(
    network: Network, theta: np.ndarray, x: np.ndarray, trace: bool = False
):
    """Class-probability rows for a batch; optionally per-layer activations."""
    _, _, activations = _forward(network, theta, x)
    probs = activations[-1]
    if trace:
        return probs, activations
    return probs


def mean_loss(
    network: Network, theta: np.ndarray, x: np.ndarray, labels: np.ndarray
) -> float:
    """Mean cross-entropy over the batch, without gradients."""
    logits, _, _ = _forward(network, theta, x)
    logp = _log_softmax(logits)
    batch = x.shape[0]
    return float(-np.sum(logp[np.arange(batch), labels], dtype=np.float64) / batch)


def loss_and_gradient(
    network: Network,
    theta: np.ndarray,
    x: np.ndarray,
    labels: np.ndarray,
    grad_out: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. theta.

    The gradient is laid out exactly like ``theta``; pass ``grad_out`` to
    reuse a buffer.  NaN/Inf in the parameters propagate into the loss so the
    caller can classify numerical failures.
    """
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    spec = network.spec
    views = network.views(theta)
    logits, caches, _ = _forward(network, theta, x)
    batch = x.shape[0]
    logp = _log_softmax(logits)
    loss = float(-np.sum(logp[np.arange(batch), labels], dtype=np.float64) / batch)

    if grad_out is None:
        grad_out = np.empty(network.d, dtype=theta.dtype)
    elif grad_out.shape[0] != network.d:
        raise ValueError("grad_out has wrong length")
    grad_views = network.views(grad_out)

    probs = np.exp(logp)
    delta = probs.astype(theta.dtype, copy=True)
    delta[np.arange(batch), labels] -= 1
    delta /= theta.dtype.type(batch)

    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            if cache[0] == "dense_out":
                _, flat_in, in_shape = cache
            else:
                _, flat_in, in_shape, z = cache
                delta = delta * (z > 0) if layer.activation == "relu" else delta
            w, _ = views[i]
            gw, gb = grad_views[i]
            np.matmul(delta.T, flat_in, out=gw)
            gb[:] = np.sum(delta, axis=0, dtype=np.float64)
            if i == 0:
                break
            delta = (delta @ w).reshape(in_shape)
        elif isinstance(layer, Conv2D):
            _, patches, in_shape, (oh, ow), z = cache
            if layer.activation == "relu":
                delta = delta * (z > 0)
            b_, f = delta.shape[0], layer.filters
            dz = delta.reshape(b_, f, oh * ow).transpose(0, 2, 1)  # (B, OH*OW, F)
            w, _ = views[i]
            gw, gb = grad_views[i]
            gw.reshape(f, -1)[:] = np.tensordot(dz, patches, axes=([0, 1], [0, 1]))
            gb[:] = np.sum(dz, axis=(0, 1), dtype=np.float64)
            if i == 0:
                break
            kh, kw = layer.kernel
            dpatches = dz @ w.reshape(f, -1)
            delta = _col2im(dpatches, in_shape, kh, kw, oh, ow)
        else:  # MaxPool
            _, pool_in, pooled = cache
            if layer.activation == "relu":
                delta = delta * (pooled > 0)
            delta = backward_maxpool(pool_in, layer.window, delta)
    return loss, grad_out

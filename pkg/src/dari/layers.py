"""Feature sub-network: conv-ReLU-pool x2, fully connected, L2 normalization.

All layer functions accept a single sample (``[C, H, W]`` or ``[D]``) or a
leading batch axis (``[N, C, H, W]`` / ``[N, D]``).  Parameter gradients are
summed over the batch, which is exactly the per-image summation of the
image-based gradient terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, ShapeError, StateError


@dataclass
class ConvLayer:
    weights: np.ndarray  # [outC, inC, kH, kW]
    bias: np.ndarray  # [outC]
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")

    def output_shape(self, in_shape):
        c, h, w = in_shape
        out_c, in_c, kh, kw = self.weights.shape
        if c != in_c:
            raise ShapeError(f"conv expects {in_c} input channels, got {c}")
        if h < kh or w < kw:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        return (out_c, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)


@dataclass
class ReLULayer:
    def output_shape(self, in_shape):
        return tuple(in_shape)


@dataclass
class MaxPoolLayer:
    window: int = 3
    stride: int = 3

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ShapeError("pool window and stride must be >= 1")

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.window, self.stride
        if h < k or w < k:
            raise ShapeError(f"input {h}x{w} smaller than pool window {k}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)


@dataclass
class FCLayer:
    weights: np.ndarray  # [outDim, inDim]
    bias: np.ndarray  # [outDim]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"fc weights {self.weights.shape} / bias {self.bias.shape} inconsistent")

    def output_shape(self, in_shape):
        n = int(np.prod(in_shape))
        if n != self.weights.shape[1]:
            raise ShapeError(f"fc expects {self.weights.shape[1]} inputs, got {n}")
        return (self.weights.shape[0],)


@dataclass
class L2NormLayer:
    epsilon: float = 1e-12

    def output_shape(self, in_shape):
        return tuple(in_shape)


def _batched(x, sample_ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == sample_ndim:
        return x[None], True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise ShapeError(f"expected a {sample_ndim}-d sample or batch, got shape {x.shape}")


def _unbatch(y, single):
    return y[0] if single else y


# -- convolution -------------------------------------------------------------


def _patches(x, kh, kw, stride):
    # [N, C, oh, ow, kh, kw] view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _correlate(x, w, stride):
    # x [N, C, H, W], w [O, C, kh, kw] -> [N, O, oh, ow]
    cols = _patches(x, w.shape[2], w.shape[3], stride)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, oh, ow, O]
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv_forward(layer: ConvLayer, x):
    """Valid cross-correlation plus per-channel bias."""
    xb, single = _batched(x, 3)
    layer.output_shape(xb.shape[1:])
    y = _correlate(xb, layer.weights, layer.stride)
    y += layer.bias[None, :, None, None]
    return _unbatch(y, single), {"x": xb, "single": single}


def conv_backward(layer: ConvLayer, cache, grad_out, input_grad=True):
    """Return ``(grad_in, grad_w, grad_b)``; ``grad_in`` is None if not requested."""
    xb = cache["x"]
    g, _ = _batched(grad_out, 3)
    s = layer.stride
    out_c, in_c, kh, kw = layer.weights.shape
    expected = (xb.shape[0],) + layer.output_shape(xb.shape[1:])
    if g.shape != expected:
        raise ShapeError(f"grad_out shape {g.shape} does not match conv output {expected}")
    grad_w = np.tensordot(g, _patches(xb, kh, kw, s), axes=([0, 2, 3], [0, 2, 3]))
    grad_b = g.sum(axis=(0, 2, 3))
    if not input_grad:
        return None, grad_w, grad_b
    # Input gradient: full correlation of the stride-dilated, zero-padded
    # output gradient with the spatially flipped, channel-transposed kernel.
    n, _, oh, ow = g.shape
    dh, dw = (oh - 1) * s + 1, (ow - 1) * s + 1
    padded = np.zeros((n, out_c, dh + 2 * (kh - 1), dw + 2 * (kw - 1)))
    padded[:, :, kh - 1 : kh - 1 + dh : s, kw - 1 : kw - 1 + dw : s] = g
    flipped = np.ascontiguousarray(layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    covered = _correlate(padded, flipped, 1)  # [N, C, dh + kh - 1, dw + kw - 1]
    grad_in = np.zeros_like(xb)
    grad_in[:, :, : covered.shape[2], : covered.shape[3]] = covered
    return _unbatch(grad_in, cache["single"]), grad_w, grad_b


# -- ReLU --------------------------------------------------------------------


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(cache, grad_out):
    mask = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match {mask.shape}")
    return np.where(mask, grad_out, 0.0)


# -- max pooling -------------------------------------------------------------


def maxpool_forward(layer: MaxPoolLayer, x):
    """Max over each window; ties resolve to the first row-major position."""
    xb, single = _batched(x, 3)
    layer.output_shape(xb.shape[1:])
    k = layer.window
    win = _patches(xb, k, k, layer.stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, k * k)
    argmax = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return _unbatch(y, single), {"shape": xb.shape, "argmax": argmax, "single": single}


def maxpool_backward(layer: MaxPoolLayer, cache, grad_out):
    argmax = cache["argmax"]
    g, _ = _batched(grad_out, 3)
    if g.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {g.shape} does not match pool output {argmax.shape}")
    k, s = layer.window, layer.stride
    oh, ow = g.shape[2:]
    grad_in = np.zeros(cache["shape"])
    for a in range(k):
        for b in range(k):
            routed = np.where(argmax == a * k + b, g, 0.0)
            grad_in[:, :, a : a + s * (oh - 1) + 1 : s, b : b + s * (ow - 1) + 1 : s] += routed
    return _unbatch(grad_in, cache["single"])


# -- fully connected ---------------------------------------------------------


def fc_forward(layer: FCLayer, x):
    x = np.asarray(x, dtype=np.float64)
    in_dim = layer.weights.shape[1]
    if x.ndim == 2 and x.shape[1] == in_dim:
        xb, single = x, False
    elif x.ndim != 2 and x.size == in_dim:
        xb, single = x.reshape(1, in_dim), True
    else:
        raise ShapeError(f"fc expects {in_dim} inputs per sample, got shape {x.shape}")
    y = xb @ layer.weights.T + layer.bias
    return _unbatch(y, single), {"x": xb, "in_shape": x.shape, "single": single}


def fc_backward(layer: FCLayer, cache, grad_out):
    xb = cache["x"]
    out_dim = layer.weights.shape[0]
    g = np.asarray(grad_out, dtype=np.float64)
    if g.size != xb.shape[0] * out_dim:
        raise ShapeError(f"grad_out shape {g.shape} does not match fc output")
    g = g.reshape(xb.shape[0], out_dim)
    grad_w = g.T @ xb
    grad_b = g.sum(axis=0)
    grad_in = (g @ layer.weights).reshape(cache["in_shape"])
    return grad_in, grad_w, grad_b


# -- L2 normalization --------------------------------------------------------


def l2norm_forward(layer: L2NormLayer, x):
    xb, single = _batched(x, 1)
    norms = np.sqrt(np.einsum("nd,nd->n", xb, xb))
    if np.any(norms <= layer.epsilon):
        raise DegenerateInputError("cannot normalize a (near-)zero feature vector")
    y = xb / norms[:, None]
    return _unbatch(y, single), {"y": y, "norm": norms, "single": single}


def l2norm_backward(cache, grad_out):
    """grad_in = (g - y (y.g)) / ||x||."""
    y, norms = cache["y"], cache["norm"]
    g, _ = _batched(grad_out, 1)
    if g.shape != y.shape:
        raise ShapeError(f"grad_out shape {g.shape} does not match {y.shape}")
    radial = np.einsum("nd,nd->n", y, g)
    grad_in = (g - y * radial[:, None]) / norms[:, None]
    return _unbatch(grad_in, cache["single"])


# -- the full feature network ------------------------------------------------


@dataclass
class LayerCache:
    """Per-layer state recorded by :func:`net_forward`, in layer order."""

    entries: list[Any] = field(default_factory=list)
    batch_size: int = 1
    single: bool = True


class FeatureNet:
    """Ordered stack of named layers mapping an image to a unit-norm feature.

    Layer parameters are shared (not copied) with the arrays passed in, so a
    parameter update performed elsewhere is seen by the next forward pass.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)  # [(name, layer)]
        self.shapes = [self.input_shape]
        for _, layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))

    @property
    def output_dim(self):
        return self.shapes[-1][0]


def net_forward(net: FeatureNet, image):
    """Return ``(feature, cache)``; a batch of images gives a batch of features."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape == net.input_shape:
        single = True
        x = x[None]
    elif x.shape[1:] == net.input_shape:
        single = False
    else:
        raise ShapeError(f"image shape {x.shape} does not match network input {net.input_shape}")
    cache = LayerCache(batch_size=x.shape[0], single=single)
    for _, layer in net.layers:
        if isinstance(layer, ConvLayer):
            x, c = conv_forward(layer, x)
        elif isinstance(layer, ReLULayer):
            x, c = relu_forward(x)
        elif isinstance(layer, MaxPoolLayer):
            x, c = maxpool_forward(layer, x)
        elif isinstance(layer, FCLayer):
            x, c = fc_forward(layer, x.reshape(x.shape[0], -1))
        elif isinstance(layer, L2NormLayer):
            x, c = l2norm_forward(layer, x)
        else:  # pragma: no cover
            raise TypeError(f"unknown layer {layer!r}")
        cache.entries.append(c)
    return (x[0] if single else x), cache


def net_backward(net: FeatureNet, cache: LayerCache | None, grad_feature):
    """Back-propagate d(loss)/d(feature) and return ``{"<layer>.w"/"<layer>.b": grad}``."""
    if cache is None or len(cache.entries) != len(net.layers):
        raise StateError("net_backward called without a matching forward cache")
    g = np.asarray(grad_feature, dtype=np.float64).reshape(cache.batch_size, net.output_dim)
    grads = {}
    first = net.layers[0][0]
    for (name, layer), c in zip(reversed(net.layers), reversed(cache.entries)):
        if isinstance(layer, L2NormLayer):
            g = l2norm_backward(c, g)
        elif isinstance(layer, FCLayer):
            g, gw, gb = fc_backward(layer, c, g)
            grads[f"{name}.w"], grads[f"{name}.b"] = gw, gb
        elif isinstance(layer, MaxPoolLayer):
            g = maxpool_backward(layer, c, g.reshape(c["argmax"].shape))
        elif isinstance(layer, ReLULayer):
            g = relu_backward(c, g.reshape(c.shape))
        elif isinstance(layer, ConvLayer):
            g, gw, gb = conv_backward(layer, c, g, input_grad=name != first)
            grads[f"{name}.w"], grads[f"{name}.b"] = gw, gb
    return grads

"""Sequential conv/relu/maxpool inference engine with exact input gradients.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 laid out as
(channels, rows, cols). Every kernel accumulates in float64 and rounds its
result back to float32, so a fixed input always produces the same bits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from protofaith.errors import ConfigurationError, InvariantError

DTYPE = np.float32


def as_tensor(values, *, copy: bool = False) -> np.ndarray:
    """Coerce ``values`` to a C-contiguous float32 array."""
    if copy:
        return np.array(values, dtype=DTYPE, order="C")
    return np.ascontiguousarray(values, dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)
    stride: int = 1
    padding: int = 0

    kind = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight))
        object.__setattr__(self, "bias", as_tensor(self.bias))
        if self.weight.ndim != 4:
            raise ConfigurationError(f"conv2d weight must be 4-d, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"conv2d bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )
        if self.stride < 1:
            raise ConfigurationError(f"conv2d stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigurationError(f"conv2d padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool2d:
    window: int
    stride: int

    kind = "maxpool2d"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ConfigurationError(f"maxpool window/stride must be >= 1, got {self.window}/{self.stride}")


Layer = Union[Conv2d, ReLU, MaxPool2d]


@dataclass
class ForwardTrace:
    """Inputs and outputs of every layer of one forward pass."""

    layers: tuple
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    argmax: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1] if self.outputs else self.inputs[0]

    @property
    def input(self) -> np.ndarray:
        return self.inputs[0]


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(x: np.ndarray, spec: Conv2d, index: int = 0) -> np.ndarray:
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ConfigurationError(
            f"layer {index}: conv2d expects {spec.in_channels} input channels, got input shape {x.shape}"
        )
    kh, kw = spec.kernel_size
    p, s = spec.padding, spec.stride
    if x.shape[1] + 2 * p < kh or x.shape[2] + 2 * p < kw:
        raise ConfigurationError(f"layer {index}: kernel {kh}x{kw} larger than padded input {x.shape[1:]}")
    xp = np.pad(x.astype(np.float64), ((0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    out = np.tensordot(spec.weight.astype(np.float64), windows, axes=([1, 2, 3], [0, 3, 4]))
    out += spec.bias.astype(np.float64)[:, None, None]
    return out.astype(DTYPE)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0)).astype(DTYPE)


def maxpool_forward(x: np.ndarray, window: int, stride: int, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Max over each window; floor semantics drop incomplete trailing windows.

    Returns the pooled tensor and, per output element, the flat index (into
    one channel plane of ``x``) of the winning input. Ties go to the first
    element of the window in row-major order.
    """
    c, h, w = x.shape
    if window > h or window > w:
        raise ConfigurationError(f"layer {index}: maxpool window {window} larger than input {h}x{w}")
    oh, ow = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    windows = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    flat = windows.reshape(c, oh, ow, window * window)
    local = np.argmax(flat, axis=-1)  # first max wins
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // window
    cols = np.arange(ow)[None, :] * stride + local % window
    return out.astype(DTYPE), (rows * w + cols).astype(np.int64)


def layer_forward(layer: Layer, x: np.ndarray, index: int = 0):
    if isinstance(layer, Conv2d):
        return conv2d_forward(x, layer, index), None
    if isinstance(layer, ReLU):
        return relu_forward(x), None
    if isinstance(layer, MaxPool2d):
        return maxpool_forward(x, layer.window, layer.stride, index)
    raise ConfigurationError(f"layer {index}: unsupported layer type {type(layer).__name__}")


def forward(layers: Sequence[Layer], x: np.ndarray) -> ForwardTrace:
    x = as_tensor(x)
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("input tensor contains non-finite values")
    trace = ForwardTrace(layers=tuple(layers))
    for i, layer in enumerate(trace.layers):
        trace.inputs.append(x)
        x, idx = layer_forward(layer, x, i)
        if idx is not None:
            trace.argmax[i] = idx
        trace.outputs.append(x)
    if not trace.inputs:
        trace.inputs.append(x)
    if not np.all(np.isfinite(trace.output)):
        raise InvariantError("forward pass produced non-finite values from finite input")
    return trace


def output_shape(layers: Sequence[Layer], shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Shape of the final feature map for an input of ``shape`` (C, H, W)."""
    c, h, w = shape
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2d):
            if c != layer.in_channels:
                raise ConfigurationError(f"layer {i}: conv2d expects {layer.in_channels} channels, got {c}")
            kh, kw = layer.kernel_size
            c = layer.out_channels
            h = _out_size(h, kh, layer.stride, layer.padding)
            w = _out_size(w, kw, layer.stride, layer.padding)
        elif isinstance(layer, MaxPool2d):
            if layer.window > h or layer.window > w:
                raise ConfigurationError(f"layer {i}: maxpool window {layer.window} larger than input {h}x{w}")
            h = _out_size(h, layer.window, layer.stride, 0)
            w = _out_size(w, layer.window, layer.stride, 0)
        if h < 1 or w < 1:
            raise ConfigurationError(f"layer {i}: output would be empty")
    return c, h, w


def conv2d_transpose(g: np.ndarray, weight: np.ndarray, stride: int, padding: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Vector-Jacobian product of a bias-free conv2d w.r.t. its input.

    Returns float64; callers decide when to round.
    """
    o, c, kh, kw = weight.shape
    _, oh, ow = g.shape
    h, w = in_hw
    hp, wp = h + 2 * padding, w + 2 * padding
    acc = np.zeros((c, hp, wp), dtype=np.float64)
    g64 = g.astype(np.float64)
    w64 = weight.astype(np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(w64[:, :, i, j], g64, axes=([0], [0]))
            acc[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib
    return acc[:, padding : padding + h, padding : padding + w]


def maxpool_route(g: np.ndarray, argmax: np.ndarray, in_shape: tuple[int, int, int]) -> np.ndarray:
    """Scatter ``g`` back onto the winning inputs (float64 result)."""
    c, h, w = in_shape
    acc = np.zeros((c, h * w), dtype=np.float64)
    flat_g = g.reshape(c, -1).astype(np.float64)
    flat_idx = argmax.reshape(c, -1)
    for ch in range(c):
        np.add.at(acc[ch], flat_idx[ch], flat_g[ch])
    return acc.reshape(c, h, w)


def backward_input(trace: ForwardTrace, output_grad: np.ndarray) -> np.ndarray:
    """Exact gradient of ``<output_grad, f(x)>`` with respect to the input ``x``.

    The chain runs in float64 and is rounded once at the end; rounding after
    every layer loses digits wherever contributions cancel.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise InvariantError(f"cotangent shape {g.shape} does not match trace output {trace.output.shape}")
    for i in range(len(trace.layers) - 1, -1, -1):
        layer, x_in = trace.layers[i], trace.inputs[i]
        if isinstance(layer, Conv2d):
            g = conv2d_transpose(g, layer.weight, layer.stride, layer.padding, x_in.shape[1:])
        elif isinstance(layer, ReLU):
            g = np.where(x_in > 0, g, 0.0)
        elif isinstance(layer, MaxPool2d):
            if i not in trace.argmax:
                raise InvariantError(f"trace is missing argmax indices for maxpool layer {i}")
            g = maxpool_route(g, trace.argmax[i], x_in.shape)
        else:
            raise InvariantError(f"layer {i}: unsupported layer type in trace")
    if not np.all(np.isfinite(g)):
        raise InvariantError("non-finite values in input gradient")
    return g.astype(DTYPE)

"""Theoretical receptive fields of latent cells in a sequential backbone."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from protofaith.core.engine import Conv2d, Layer, MaxPool2d, output_shape
from protofaith.errors import ArgumentError


@dataclass(frozen=True)
class ReceptiveFieldBox:
    """Input-pixel box, ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, row: int, col: int) -> bool:
        return self.top <= row < self.bottom and self.left <= col < self.right


def _geometry(layer: Layer) -> tuple[int, int, int, int]:
    if isinstance(layer, Conv2d):
        kh, kw = layer.kernel_size
        return kh, kw, layer.stride, layer.padding
    if isinstance(layer, MaxPool2d):
        return layer.window, layer.window, layer.stride, 0
    return 1, 1, 1, 0


def receptive_span(backbone: Sequence[Layer], h: int, w: int) -> ReceptiveFieldBox:
    """Unclipped receptive field of latent cell (h, w); may extend past the image."""
    top, bottom, left, right = h, h, w, w  # inclusive index ranges
    for layer in reversed(list(backbone)):
        kh, kw, s, p = _geometry(layer)
        top, bottom = top * s - p, bottom * s - p + kh - 1
        left, right = left * s - p, right * s - p + kw - 1
    return ReceptiveFieldBox(top, left, bottom + 1, right + 1)


def receptive_field(backbone: Sequence[Layer], h: int, w: int, in_h: int, in_w: int, in_channels: int = 3) -> ReceptiveFieldBox:
    """Receptive field clipped to the image.

    Clipping happens at every layer, not only at the pixels: taps that land in
    the zero padding of an intermediate map reach no input at all.
    """
    layers = list(backbone)
    sizes = [(in_h, in_w)]
    for k in range(len(layers)):
        sizes.append(output_shape(layers[: k + 1], (in_channels, in_h, in_w))[1:])
    out_h, out_w = sizes[-1]
    if not (0 <= h < out_h and 0 <= w < out_w):
        raise ArgumentError(f"latent cell ({h}, {w}) outside feature map of size {out_h}x{out_w}")
    top, bottom, left, right = h, h, w, w
    for k in range(len(layers) - 1, -1, -1):
        kh, kw, s, p = _geometry(layers[k])
        hh, ww = sizes[k]
        top, bottom = max(top * s - p, 0), min(bottom * s - p + kh - 1, hh - 1)
        left, right = max(left * s - p, 0), min(right * s - p + kw - 1, ww - 1)
    return ReceptiveFieldBox(top, left, bottom + 1, right + 1)

"""Numerical engine: layers, gradients, relevance propagation, resampling."""
from protofaith.core.engine import (
    DTYPE,
    Conv2d,
    ForwardTrace,
    Layer,
    MaxPool2d,
    ReLU,
    as_tensor,
    backward_input,
    conv2d_forward,
    forward,
    maxpool_forward,
    output_shape,
    relu_forward,
)
from protofaith.core.lrp import RuleConfig, lrp_backward
from protofaith.core.receptive import ReceptiveFieldBox, receptive_field, receptive_span
from protofaith.core.resample import bicubic_upsample, bilinear_resize, gaussian_blur5, nearest_resize

__all__ = [
    "DTYPE",
    "Conv2d",
    "ForwardTrace",
    "Layer",
    "MaxPool2d",
    "ReLU",
    "ReceptiveFieldBox",
    "RuleConfig",
    "as_tensor",
    "backward_input",
    "bicubic_upsample",
    "bilinear_resize",
    "conv2d_forward",
    "forward",
    "gaussian_blur5",
    "lrp_backward",
    "maxpool_forward",
    "nearest_resize",
    "output_shape",
    "receptive_field",
    "receptive_span",
    "relu_forward",
]

"""Layer-wise relevance propagation over a recorded forward trace."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from protofaith.core.engine import (
    DTYPE,
    Conv2d,
    ForwardTrace,
    MaxPool2d,
    ReLU,
    conv2d_transpose,
    maxpool_route,
)
from protofaith.errors import ConfigurationError, InvariantError

RULES = ("epsilon", "zplus", "zB")


@dataclass(frozen=True)
class RuleConfig:
    """Which propagation rule each conv layer uses.

    The first conv layer (the one touching pixels) uses ``input_rule``, every
    other conv layer uses ``hidden_rule``; ``overrides`` maps a layer index to
    a rule and wins over both. ``low``/``high`` bound the pixel domain for the
    zB rule and default to the min/max of the explained image.
    """

    hidden_rule: str = "zplus"
    input_rule: str = "zB"
    epsilon: float = 1e-9
    low: Optional[float] = None
    high: Optional[float] = None
    overrides: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in (self.hidden_rule, self.input_rule, *self.overrides.values()):
            if name not in RULES:
                raise ConfigurationError(f"unknown relevance rule {name!r}; expected one of {RULES}")
        if self.epsilon <= 0:
            raise ConfigurationError("relevance stabilizer epsilon must be positive")

    def rule_for(self, index: int, first_conv: int) -> str:
        if index in self.overrides:
            return self.overrides[index]
        return self.input_rule if index == first_conv else self.hidden_rule

    def describe(self) -> dict:
        return {
            "hidden_rule": self.hidden_rule,
            "input_rule": self.input_rule,
            "epsilon": self.epsilon,
            "overrides": {str(k): v for k, v in sorted(self.overrides.items())},
        }


def _conv_plain(a: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    # bias-free float64 correlation used only for the relevance denominators
    kh, kw = weight.shape[2:]
    ap = np.pad(a, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(ap, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.tensordot(weight, win, axes=([1, 2, 3], [0, 3, 4]))


def _conv_relevance(layer: Conv2d, a: np.ndarray, relevance: np.ndarray, rule: str, cfg: RuleConfig) -> np.ndarray:
    a64 = a.astype(np.float64)
    w = layer.weight.astype(np.float64)
    s, p = layer.stride, layer.padding
    hw = a.shape[1:]
    r = relevance.astype(np.float64)

    if rule == "zplus":
        wp = np.maximum(w, 0.0)
        z = _conv_plain(a64, wp, s, p) + cfg.epsilon
        return a64 * conv2d_transpose(r / z, wp, s, p, hw)

    if rule == "epsilon":
        z = _conv_plain(a64, w, s, p) + layer.bias.astype(np.float64)[:, None, None]
        z = z + cfg.epsilon * np.where(z >= 0, 1.0, -1.0)
        return a64 * conv2d_transpose(r / z, w, s, p, hw)

    # zB: box-constrained rule for the pixel layer
    low = float(a.min()) if cfg.low is None else cfg.low
    high = float(a.max()) if cfg.high is None else cfg.high
    lo = np.full_like(a64, low)
    hi = np.full_like(a64, high)
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    z = _conv_plain(a64, w, s, p) - _conv_plain(lo, wp, s, p) - _conv_plain(hi, wn, s, p)
    z = z + cfg.epsilon * np.where(z >= 0, 1.0, -1.0)
    q = r / z
    return (
        a64 * conv2d_transpose(q, w, s, p, hw)
        - lo * conv2d_transpose(q, wp, s, p, hw)
        - hi * conv2d_transpose(q, wn, s, p, hw)
    )


def lrp_backward(trace: ForwardTrace, relevance: np.ndarray, rules: Optional[RuleConfig] = None) -> np.ndarray:
    """Propagate relevance placed on the final feature map down to the input.

    Propagation runs in float64; the result is rounded once at the end.

    ReLU layers pass relevance through unchanged and max-pooling hands all of a
    window's relevance to its recorded winner.
    """
    rules = rules or RuleConfig()
    r = np.asarray(relevance, dtype=np.float64)
    if r.shape != trace.output.shape:
        raise InvariantError(f"relevance shape {r.shape} does not match latent shape {trace.output.shape}")
    convs = [i for i, layer in enumerate(trace.layers) if isinstance(layer, Conv2d)]
    first_conv = convs[0] if convs else -1
    for i in range(len(trace.layers) - 1, -1, -1):
        layer, a = trace.layers[i], trace.inputs[i]
        if isinstance(layer, Conv2d):
            r = _conv_relevance(layer, a, r, rules.rule_for(i, first_conv), rules)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool2d):
            r = maxpool_route(r, trace.argmax[i], a.shape)
        else:
            raise InvariantError(f"layer {i}: unsupported layer type in trace")
    if not np.all(np.isfinite(r)):
        raise InvariantError("non-finite values in propagated relevance")
    return r.astype(DTYPE)

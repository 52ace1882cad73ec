"""Part-visualisation methods and the shared mask/crop post-processing.

Three families produce a per-pixel saliency map for one (prototype, latent
cell) target:

* upsampling of the similarity map (ProtoPNet keeps the whole map, ProtoTree
  keeps only the best cell),
* SmoothGrad-averaged gradient times input,
* PRP-style relevance propagation through the backbone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from protofaith.core.engine import DTYPE, as_tensor, backward_input
from protofaith.core.lrp import RuleConfig, lrp_backward
from protofaith.core.resample import bicubic_upsample, gaussian_blur5
from protofaith.errors import ArgumentError, ConfigurationError
from protofaith.model import (
    PROTOPNET_TOP10,
    ModelBundle,
    SimilarityMap,
    extract_features,
    max_similarity,
    similarity_map,
)

UPSAMPLE = "upsample"
UPSAMPLE_PROTOPNET = "upsample_protopnet"
UPSAMPLE_PROTOTREE = "upsample_prototree"
SMOOTHGRADS = "smoothgrads"
PRP = "prp"
OCCLUSION = "occlusion"
RANDOM = "random"
METHODS = (UPSAMPLE, UPSAMPLE_PROTOPNET, UPSAMPLE_PROTOTREE, SMOOTHGRADS, PRP, OCCLUSION, RANDOM)

SMOOTHGRAD_SAMPLES = 10
NOISE_RATIO = 0.2
PRP_STABILIZER = 1e-9
PRP_LABEL = "PRP-style"
CROP_PERCENTILE = 95.0
PATCH_FRACTION = 0.02


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    values: np.ndarray  # (Hin, Win), nonnegative
    method: str
    target: tuple = (0, 0, 0)
    image_id: str = ""
    flags: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class PixelMask:
    mask: np.ndarray  # bool (Hin, Win)
    count: int
    fraction: float


@dataclass(frozen=True, eq=False)
class PartPatch:
    top: int
    left: int
    bottom: int
    right: int
    image_id: str
    mask: PixelMask
    pixels: Optional[np.ndarray] = None

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.top, self.left, self.bottom, self.right

    @property
    def degenerate(self) -> bool:
        return self.mask.count == self.mask.mask.size


def resolve_method(model: ModelBundle, method: str) -> str:
    if method not in METHODS:
        raise ConfigurationError(f"unknown saliency method {method!r}; expected one of {METHODS}")
    if method == UPSAMPLE:
        return UPSAMPLE_PROTOPNET if model.policy.kind == PROTOPNET_TOP10 else UPSAMPLE_PROTOTREE
    return method


def upsample_protopnet(smap: SimilarityMap, in_h: int, in_w: int) -> SaliencyMap:
    up = bicubic_upsample(smap.values, in_h, in_w).astype(np.float64)
    up -= up.min()
    h, w, _ = max_similarity(smap)
    values = up.astype(DTYPE)
    flags = {"degenerate": bool(np.all(values == values.flat[0]))}
    return SaliencyMap(values, UPSAMPLE_PROTOPNET, (smap.prototype, h, w), smap.image_id, flags)


def upsample_prototree(smap: SimilarityMap, in_h: int, in_w: int) -> SaliencyMap:
    h, w, s = max_similarity(smap)
    kept = np.zeros_like(smap.values, dtype=np.float64)
    kept[h, w] = s
    # the cubic kernel's negative lobes are clipped so the map stays nonnegative
    up = np.maximum(bicubic_upsample(kept, in_h, in_w), DTYPE(0))
    flags = {"degenerate": bool(np.all(up == up.flat[0]))}
    return SaliencyMap(up, UPSAMPLE_PROTOTREE, (smap.prototype, h, w), smap.image_id, flags)


def postprocess_saliency(raw: np.ndarray, absolute: bool = True) -> np.ndarray:
    """Channel mean, then |.| (or clamp at zero), then the 5x5 Gaussian blur."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[0] != 3:
        raise ArgumentError(f"expected a 3-channel map, got shape {raw.shape}")
    mean = raw.astype(np.float64).mean(axis=0)
    mean = np.abs(mean) if absolute else np.maximum(mean, 0.0)
    return np.maximum(gaussian_blur5(mean), DTYPE(0))


def _check_target(model: ModelBundle, target) -> tuple[int, int, int]:
    i, h, w = int(target[0]), int(target[1]), int(target[2])
    lh, lw = model.latent_shape
    if not (0 <= i < model.prototypes.count and 0 <= h < lh and 0 <= w < lw):
        raise ArgumentError(f"target {(i, h, w)} outside prototypes/latent grid {model.prototypes.count}x{lh}x{lw}")
    return i, h, w


def similarity_gradient(model: ModelBundle, x: np.ndarray, target) -> np.ndarray:
    """Gradient of the similarity at the target cell w.r.t. the input image."""
    i, h, w = _check_target(model, target)
    feats = extract_features(model, x)
    f = feats.values[h, w].astype(np.float64)
    diff = f - model.prototypes.vectors[i].astype(np.float64)
    d2 = float(np.dot(diff, diff))
    cot = np.zeros(feats.trace.output.shape, dtype=np.float64)
    cot[:, h, w] = model.simfn.derivative(d2) * 2.0 * diff
    return backward_input(feats.trace, cot)


def smoothgrads_raw(model: ModelBundle, x: np.ndarray, target, n: int = SMOOTHGRAD_SAMPLES, noise_ratio: float = NOISE_RATIO, seed: int = 0) -> np.ndarray:
    """Averaged noisy gradients multiplied by the input, per channel."""
    if n < 1:
        raise ArgumentError(f"smoothgrads needs n >= 1 samples, got {n}")
    if noise_ratio < 0:
        raise ArgumentError("noise ratio must be nonnegative")
    x = as_tensor(x)
    sigma = noise_ratio * float(x.max() - x.min())
    rng = np.random.default_rng(seed)
    total = np.zeros(x.shape, dtype=np.float64)
    for _ in range(n):
        if sigma > 0:
            xk = (x.astype(np.float64) + rng.normal(0.0, sigma, size=x.shape)).astype(DTYPE)
        else:
            xk = x
        total += similarity_gradient(model, xk, target)
    grad = (total / n).astype(DTYPE)
    return grad.astype(np.float64) * x.astype(np.float64)


def smoothgrads_x_input(model: ModelBundle, x: np.ndarray, target, n: int = SMOOTHGRAD_SAMPLES, noise_ratio: float = NOISE_RATIO, seed: int = 0, image_id: str = "") -> SaliencyMap:
    i, h, w = _check_target(model, target)
    raw = smoothgrads_raw(model, x, (i, h, w), n, noise_ratio, seed)
    values = postprocess_saliency(raw)
    return SaliencyMap(values, SMOOTHGRADS, (i, h, w), image_id, {"n": n, "noise_ratio": noise_ratio, "seed": seed})


def prp_initial_relevance(f: np.ndarray, r: np.ndarray, score: float, stabilizer: float = PRP_STABILIZER) -> np.ndarray:
    """Split ``score`` over latent channels by their squared-distance share.

    The stabilizer is spread evenly over channels, so a zero distance yields a
    uniform split and the shares always sum to ``score``.
    """
    diff = np.asarray(f, dtype=np.float64) - np.asarray(r, dtype=np.float64)
    sq = diff * diff
    return score * (sq + stabilizer / sq.size) / (sq.sum() + stabilizer)


def prp_relevance(model: ModelBundle, x: np.ndarray, target, rules: Optional[RuleConfig] = None) -> np.ndarray:
    """Raw (3, Hin, Win) relevance for the similarity at the target cell."""
    i, h, w = _check_target(model, target)
    feats = extract_features(model, x)
    f = feats.values[h, w]
    r = model.prototypes.vectors[i]
    diff = f.astype(np.float64) - r.astype(np.float64)
    score = float(model.simfn(np.dot(diff, diff)))
    latent = np.zeros(feats.trace.output.shape, dtype=np.float64)
    latent[:, h, w] = prp_initial_relevance(f, r, score)
    return lrp_backward(feats.trace, latent, rules or RuleConfig(epsilon=PRP_STABILIZER))


def prp(model: ModelBundle, x: np.ndarray, target, rules: Optional[RuleConfig] = None, image_id: str = "") -> SaliencyMap:
    i, h, w = _check_target(model, target)
    raw = prp_relevance(model, x, (i, h, w), rules)
    values = postprocess_saliency(raw, absolute=False)
    return SaliencyMap(values, PRP, (i, h, w), image_id, {"label": PRP_LABEL})


def random_saliency(shape: tuple[int, int], seed: int = 0, target=(0, 0, 0), image_id: str = "") -> SaliencyMap:
    values = np.random.default_rng(seed).random(shape).astype(DTYPE)
    return SaliencyMap(values, RANDOM, tuple(target), image_id, {"seed": seed})


def compute_saliency(model: ModelBundle, x: np.ndarray, target, method: str, *, seed: int = 0, image_id: str = "", fill=None, n: int = SMOOTHGRAD_SAMPLES, noise_ratio: float = NOISE_RATIO, rules: Optional[RuleConfig] = None) -> SaliencyMap:
    """Dispatch to one saliency method for ``target`` = (prototype, h, w[, score])."""
    method = resolve_method(model, method)
    i, h, w = _check_target(model, target)
    _, in_h, in_w = model.input_shape
    if method in (UPSAMPLE_PROTOPNET, UPSAMPLE_PROTOTREE):
        feats = extract_features(model, x).values
        smap = similarity_map(feats, model.prototypes.vectors[i], model.simfn, i, image_id)
        if method == UPSAMPLE_PROTOPNET:
            return upsample_protopnet(smap, in_h, in_w)
        return upsample_prototree(smap, in_h, in_w)
    if method == SMOOTHGRADS:
        return smoothgrads_x_input(model, x, (i, h, w), n, noise_ratio, seed, image_id)
    if method == PRP:
        return prp(model, x, (i, h, w), rules, image_id)
    if method == OCCLUSION:
        from protofaith.fixtures import occlusion_oracle

        values = occlusion_oracle(model, x, (i, h, w), fill=fill)
        return SaliencyMap(np.maximum(values, 0.0).astype(DTYPE), OCCLUSION, (i, h, w), image_id)
    return random_saliency((in_h, in_w), seed, (i, h, w), image_id)


def round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def saliency_order(values: np.ndarray) -> np.ndarray:
    """Flat pixel indices by decreasing saliency, ties in row-major order."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


def mask_from_order(order: np.ndarray, count: int, shape: tuple[int, int]) -> PixelMask:
    mask = np.zeros(shape[0] * shape[1], dtype=bool)
    mask[order[:count]] = True
    return PixelMask(mask.reshape(shape), int(count), count / mask.size)


def top_fraction_mask(saliency, a: float) -> PixelMask:
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if not 0 < a <= 1:
        raise ArgumentError(f"mask fraction must lie in (0, 1], got {a}")
    n = values.size
    count = min(max(round_half_up(a * n), 1), n)
    return mask_from_order(saliency_order(values), count, values.shape)


def percentile_mask(saliency, q: float = CROP_PERCENTILE) -> PixelMask:
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    threshold = np.percentile(values.astype(np.float64), q)
    mask = values.astype(np.float64) >= threshold
    count = int(mask.sum())
    return PixelMask(mask, count, count / mask.size)


def crop_patch(x: np.ndarray, mask: PixelMask, image_id: str = "") -> PartPatch:
    rows = np.flatnonzero(mask.mask.any(axis=1))
    cols = np.flatnonzero(mask.mask.any(axis=0))
    if rows.size == 0:
        raise ArgumentError("cannot crop an empty mask")
    top, bottom, left, right = int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1
    pixels = None if x is None else np.asarray(x)[..., top:bottom, left:right]
    return PartPatch(top, left, bottom, right, image_id, mask, pixels)

"""Deletion curves (AUDC), segmentation relevance and effective receptive fields."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from protofaith.core.engine import DTYPE, as_tensor
from protofaith.errors import ArgumentError, ConfigurationError, DegenerateTargetError
from protofaith.model import ModelBundle, score_at, similarity_maps, max_similarity
from protofaith.saliency import (
    PATCH_FRACTION,
    PixelMask,
    SaliencyMap,
    compute_saliency,
    mask_from_order,
    round_half_up,
    saliency_order,
    top_fraction_mask,
)

AUDC_SCALE = 10_000.0
INTEGRATION_RULE = "trapezoid"
DELETION_AMAX = 0.02
DELETION_STEP = 0.001
ERF_AMAX = 0.10
ERF_STEP = 0.005
ERF_TAU = 0.1
RELEVANCE_THRESHOLD = 0.05
MID_GRAY = 0.5
FILL_POLICIES = ("mean", "zero", "gray")


@dataclass(frozen=True)
class FillPolicy:
    kind: str = "mean"
    values: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in FILL_POLICIES:
            raise ConfigurationError(f"unknown fill policy {self.kind!r}; expected one of {FILL_POLICIES}")

    @classmethod
    def resolve(cls, kind: str, dataset_mean: Optional[Sequence[float]] = None, channels: int = 3) -> "FillPolicy":
        if kind == "mean":
            if dataset_mean is None:
                raise ConfigurationError("mean fill needs per-channel dataset means")
            return cls("mean", tuple(float(v) for v in dataset_mean))
        if kind == "zero":
            return cls("zero", (0.0,) * channels)
        if kind == "gray":
            return cls("gray", (MID_GRAY,) * channels)
        return cls(kind)


def perturb(x: np.ndarray, mask, fill: FillPolicy) -> np.ndarray:
    """Replace masked pixels (all channels) by the fill values."""
    x = as_tensor(x)
    m = mask.mask if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    if m.shape != x.shape[1:]:
        raise ArgumentError(f"mask shape {m.shape} does not match image {x.shape[1:]}")
    if len(fill.values) != x.shape[0]:
        raise ConfigurationError(f"fill has {len(fill.values)} values for {x.shape[0]} channels")
    out = x.copy()
    for c, v in enumerate(fill.values):
        out[c][m] = DTYPE(v)
    return out


@dataclass(frozen=True)
class FrozenTarget:
    prototype: int
    h: int
    w: int
    score: float


def locate(model: ModelBundle, x: np.ndarray, prototype: int) -> FrozenTarget:
    maps, _ = similarity_maps(model, x)
    h, w, s = max_similarity(maps[prototype])
    return FrozenTarget(prototype, h, w, s)


def similarity_ratio(model: ModelBundle, x_tilde: np.ndarray, target: FrozenTarget) -> float:
    """Score at the original best cell of the perturbed image over the original score."""
    if target.score == 0:
        raise DegenerateTargetError(f"prototype {target.prototype} has zero similarity; ratio undefined")
    return score_at(model, x_tilde, target.prototype, target.h, target.w) / target.score


def area_grid(a_max: float, step: float) -> np.ndarray:
    if step <= 0 or a_max <= 0 or a_max > 1:
        raise ArgumentError(f"invalid deletion grid a_max={a_max}, step={step}")
    n = round_half_up(a_max / step)
    return np.arange(n + 1, dtype=np.float64) * step


def audc(areas: Sequence[float], ratios: Sequence[float]) -> float:
    a = np.asarray(areas, dtype=np.float64)
    t = np.asarray(ratios, dtype=np.float64)
    return float(AUDC_SCALE * np.sum(np.diff(a) * (t[1:] + t[:-1]) * 0.5))


@dataclass
class DeletionCurve:
    areas: np.ndarray
    ratios: np.ndarray
    audc: float
    counts: np.ndarray
    target: FrozenTarget
    metadata: dict = field(default_factory=dict)

    def grid_id(self) -> str:
        return f"0:{self.metadata.get('step')}:{self.metadata.get('a_max')}"


def deletion_curve_from_saliency(model: ModelBundle, x: np.ndarray, target: FrozenTarget, saliency: SaliencyMap, areas: np.ndarray, fill: FillPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Ratios on the grid; every perturbed image is built from the original x."""
    x = as_tensor(x)
    order = saliency_order(saliency.values)
    shape = saliency.values.shape
    n = order.size
    ratios = np.empty(len(areas), dtype=np.float64)
    counts = np.empty(len(areas), dtype=np.int64)
    for k, a in enumerate(areas):
        count = min(round_half_up(a * n), n)
        counts[k] = count
        if count == 0:
            ratios[k] = 1.0
            continue
        mask = mask_from_order(order, count, shape)
        ratios[k] = similarity_ratio(model, perturb(x, mask, fill), target)
    return ratios, counts


def deletion_curve(
    model: ModelBundle,
    x: np.ndarray,
    prototype: int,
    method: str,
    a_max: float = DELETION_AMAX,
    step: float = DELETION_STEP,
    fill: Optional[FillPolicy] = None,
    *,
    seed: int = 0,
    image_id: str = "",
    saliency: Optional[SaliencyMap] = None,
    target: Optional[FrozenTarget] = None,
) -> DeletionCurve:
    fill = fill or FillPolicy.resolve("gray")
    target = target or locate(model, x, prototype)
    if target.score == 0:
        raise DegenerateTargetError(f"prototype {prototype} has zero similarity on image {image_id!r}")
    if saliency is None:
        saliency = compute_saliency(model, x, (prototype, target.h, target.w), method, seed=seed, image_id=image_id, fill=fill)
    areas = area_grid(a_max, step)
    ratios, counts = deletion_curve_from_saliency(model, x, target, saliency, areas, fill)
    meta = {
        "method": saliency.method,
        "prototype": prototype,
        "image_id": image_id,
        "fill": fill.kind,
        "fill_values": list(fill.values),
        "seed": seed,
        "a_max": a_max,
        "step": step,
        "integration": INTEGRATION_RULE,
        "scale": AUDC_SCALE,
        "cell": [target.h, target.w],
    }
    return DeletionCurve(areas, ratios, audc(areas, ratios), counts, target, meta)


@dataclass(frozen=True)
class RelevanceResult:
    fraction: float
    irrelevant: bool
    mask_count: int
    intersection_count: int
    threshold: float


def relevance(saliency, segmentation: np.ndarray, a: float = PATCH_FRACTION, threshold: float = RELEVANCE_THRESHOLD) -> RelevanceResult:
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    seg = np.asarray(segmentation, dtype=bool)
    if seg.shape != values.shape:
        raise ArgumentError(f"segmentation shape {seg.shape} does not match saliency {values.shape}")
    mask = top_fraction_mask(values, a)
    inter = int(np.count_nonzero(mask.mask & seg))
    fraction = inter / mask.count
    return RelevanceResult(fraction, fraction < threshold, mask.count, inter, threshold)


@dataclass(frozen=True)
class ErfEstimate:
    area: Optional[float]
    threshold: float
    curve: DeletionCurve


def first_crossing(areas: Sequence[float], ratios: Sequence[float], threshold: float) -> Optional[float]:
    for a, t in zip(areas, ratios):
        if t < threshold:
            return float(a)
    return None


def erf_estimate(
    model: ModelBundle,
    x: np.ndarray,
    prototype: int,
    method: str,
    a_max: float = ERF_AMAX,
    step: float = ERF_STEP,
    tau_threshold: float = ERF_TAU,
    fill: Optional[FillPolicy] = None,
    **kwargs,
) -> ErfEstimate:
    curve = deletion_curve(model, x, prototype, method, a_max, step, fill, **kwargs)
    return ErfEstimate(first_crossing(curve.areas, curve.ratios, tau_threshold), tau_threshold, curve)


def aggregate_report(rows: Iterable) -> list[dict]:
    """Mean AUDC and percentage of irrelevant patches per (model, method, role).

    Rows may be mappings or objects with matching attributes; groups are
    emitted in sorted key order so the output is deterministic.
    """
    groups: dict[tuple, list] = defaultdict(list)
    for row in rows:
        get = row.get if isinstance(row, dict) else lambda k, r=row: getattr(r, k, None)
        groups[(get("model") or "", get("method"), get("role"))].append(get)
    if not groups:
        raise ArgumentError("cannot aggregate an empty set of results")
    summary = []
    for key in sorted(groups):
        getters = groups[key]
        audcs = [g("audc") for g in getters if g("audc") is not None]
        flags = [bool(g("irrelevant")) for g in getters if g("irrelevant") is not None]
        summary.append(
            {
                "model": key[0],
                "method": key[1],
                "role": key[2],
                "cases": len(getters),
                "audc_count": len(audcs),
                "mean_audc": float(np.mean(audcs)) if audcs else None,
                "relevance_count": len(flags),
                "irrelevant_count": sum(flags),
                "percent_irrelevant": 100.0 * sum(flags) / len(flags) if flags else None,
            }
        )
    return summary

"""Batch evaluation over a manifest: case enumeration, workers, report rows."""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from protofaith.core.lrp import RuleConfig
from protofaith.core.resample import BLUR_SIGMA, CUBIC_A
from protofaith.errors import ArgumentError
from protofaith.io.dataset import DatasetManifest, load_image, load_segmentation
from protofaith.io.reports import CurveRecord, ReportRow
from protofaith.metrics import (
    AUDC_SCALE,
    DELETION_AMAX,
    DELETION_STEP,
    ERF_AMAX,
    ERF_STEP,
    ERF_TAU,
    INTEGRATION_RULE,
    RELEVANCE_THRESHOLD,
    FillPolicy,
    FrozenTarget,
    deletion_curve,
    first_crossing,
    relevance,
)
from protofaith.model import ModelBundle, max_similarity, select_targets, similarity_maps
from protofaith.saliency import (
    CROP_PERCENTILE,
    NOISE_RATIO,
    PATCH_FRACTION,
    PRP_LABEL,
    PRP_STABILIZER,
    SMOOTHGRAD_SAMPLES,
    compute_saliency,
    resolve_method,
)

THREADS_ENV = "PROTOFAITH_THREADS"
DEFAULT_METHODS = ("upsample", "smoothgrads", "prp")


def protocol_defaults() -> dict:
    """The evaluation protocol every command falls back to."""
    return {
        "deletion_amax": DELETION_AMAX,
        "deletion_step": DELETION_STEP,
        "patch_fraction": PATCH_FRACTION,
        "relevance_threshold": RELEVANCE_THRESHOLD,
        "smoothgrad_samples": SMOOTHGRAD_SAMPLES,
        "noise_ratio": NOISE_RATIO,
        "erf_amax": ERF_AMAX,
        "erf_step": ERF_STEP,
        "erf_tau": ERF_TAU,
        "crop_percentile": CROP_PERCENTILE,
        "blur": {"size": 5, "sigma": BLUR_SIGMA, "padding": "reflect"},
        "bicubic_a": CUBIC_A,
        "integration": INTEGRATION_RULE,
        "audc_scale": AUDC_SCALE,
        "prp": {"label": PRP_LABEL, "stabilizer": PRP_STABILIZER, **RuleConfig(epsilon=PRP_STABILIZER).describe()},
        "fill": "mean",
    }


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ArgumentError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def run_ordered(fn: Callable, items: Sequence, threads: Optional[int] = None) -> list:
    """Map ``fn`` over ``items``; results come back in input order."""
    threads = thread_count() if threads is None else threads
    if threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class Case:
    image_id: str
    image: np.ndarray
    prototype: int
    role: str
    target: FrozenTarget
    method: str
    segmentation: Optional[np.ndarray] = None


@dataclass
class LoadedEntry:
    id: str
    image: np.ndarray
    segmentation: Optional[np.ndarray]
    split: str


def load_entries(model: ModelBundle, manifest: DatasetManifest) -> list[LoadedEntry]:
    size = model.input_shape[1:]
    out = []
    for e in manifest.entries:
        img = load_image(manifest.path(e.image), manifest.mean, manifest.std, size)
        seg = None
        if e.segmentation is not None:
            seg = load_segmentation(manifest.path(e.segmentation), size, img.original_size)
        out.append(LoadedEntry(e.id, img.tensor, seg, e.split))
    return out


def resolve_fill(kind: str, manifest: DatasetManifest) -> FillPolicy:
    if kind == "mean" and manifest.fill is None:
        return FillPolicy.resolve("gray")
    return FillPolicy.resolve(kind, manifest.fill)


def enumerate_cases(model: ModelBundle, entries: Sequence[LoadedEntry], methods: Sequence[str], roles: Sequence[str] = ("prototype", "test-patch")) -> list[Case]:
    cases = []
    by_id = {e.id: e for e in entries}
    methods = [resolve_method(model, m) for m in methods]
    if "prototype" in roles:
        for i, prov in enumerate(model.prototypes.provenance):
            if prov is None or prov.image_id not in by_id:
                continue
            entry = by_id[prov.image_id]
            maps, _ = similarity_maps(model, entry.image, entry.id)
            h, w, s = max_similarity(maps[i])
            for m in methods:
                cases.append(Case(entry.id, entry.image, i, "prototype", FrozenTarget(i, h, w, s), m, entry.segmentation))
    if "test-patch" in roles:
        tests = [e for e in entries if e.split == "test"] or list(entries)
        for entry in tests:
            for t in select_targets(model, entry.image, entry.id):
                for m in methods:
                    target = FrozenTarget(t.prototype, t.h, t.w, t.score)
                    cases.append(Case(entry.id, entry.image, t.prototype, "test-patch", target, m, entry.segmentation))
    return cases


def _rules_label(method: str) -> str:
    if method == "prp":
        cfg = RuleConfig(epsilon=PRP_STABILIZER)
        return f"{INTEGRATION_RULE};{PRP_LABEL}:{cfg.hidden_rule}/{cfg.input_rule}"
    return INTEGRATION_RULE


def _row(model_name: str, case: Case, seed: int, **fields) -> ReportRow:
    return ReportRow(
        model=model_name,
        image_id=case.image_id,
        prototype=case.prototype,
        role=case.role,
        method=case.method,
        cell_h=case.target.h,
        cell_w=case.target.w,
        score=case.target.score,
        seed=seed,
        rules=_rules_label(case.method),
        **fields,
    )


def _saliency(model, case: Case, seed: int, fill: FillPolicy):
    return compute_saliency(
        model, case.image, (case.prototype, case.target.h, case.target.w), case.method, seed=seed, image_id=case.image_id, fill=fill
    )


def evaluate_deletion(model: ModelBundle, model_name: str, cases: Sequence[Case], a_max: float, step: float, fill: FillPolicy, seed: int, tau: Optional[float] = None):
    grid = f"0:{step:g}:{a_max:g}"

    def one(case: Case):
        t0 = time.perf_counter()
        sal = _saliency(model, case, seed, fill)
        t1 = time.perf_counter()
        curve = deletion_curve(
            model, case.image, case.prototype, case.method, a_max, step, fill,
            seed=seed, image_id=case.image_id, saliency=sal, target=case.target,
        )
        t2 = time.perf_counter()
        fields = {"grid": grid, "fill": fill.kind, "timings": {"saliency_s": t1 - t0, "curve_s": t2 - t1}}
        if tau is None:
            fields["audc"] = curve.audc
        else:
            fields["erf_area"] = first_crossing(curve.areas, curve.ratios, tau)
        row = _row(model_name, case, seed, **fields)
        rec = CurveRecord(case.image_id, case.prototype, case.role, case.method, curve.areas.tolist(), curve.ratios.tolist())
        return row, rec

    results = run_ordered(one, cases)
    return [r for r, _ in results], [c for _, c in results]


def evaluate_relevance(model: ModelBundle, model_name: str, cases: Sequence[Case], a: float, threshold: float, fill: FillPolicy, seed: int) -> list[ReportRow]:
    def one(case: Case):
        t0 = time.perf_counter()
        sal = _saliency(model, case, seed, fill)
        res = relevance(sal, case.segmentation, a, threshold)
        fields = {
            "relevance_fraction": res.fraction,
            "irrelevant": res.irrelevant,
            "grid": f"top:{a:g}",
            "fill": fill.kind,
            "timings": {"saliency_s": time.perf_counter() - t0},
        }
        return _row(model_name, case, seed, **fields)

    usable = [c for c in cases if c.segmentation is not None]
    return run_ordered(one, usable)

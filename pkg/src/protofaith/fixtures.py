"""Synthetic models and images with analytically known ground truth.

A *planted* fixture is a two-stage backbone: a patchify convolution (kernel =
stride = lattice) followed by a same-size convolution whose kernel is zero
everywhere except on the taps that reach the region R from the designated
latent cell. That cell's features therefore depend on the pixels of R and on
nothing else, while its upsampled footprint can sit elsewhere in the image.
All weights are positive and every pixel value is positive, so both ReLUs are
inactive and the designated feature vector is linear in the pixels of R.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from protofaith.core.engine import DTYPE, Conv2d, MaxPool2d, ReLU, output_shape
from protofaith.core.receptive import ReceptiveFieldBox
from protofaith.errors import ArgumentError, ConfigurationError
from protofaith.model import (
    LOG_RATIO,
    NEG_EXP,
    PROTOPNET_TOP10,
    PROTOTREE_THRESHOLD,
    ModelBundle,
    PrototypeSet,
    SimilarityFunction,
    TargetPolicy,
    extract_features,
    project_prototypes,
    score_at,
)

# squared latent distance produced by filling all of R, per similarity kind
MASKED_DISTANCE = {NEG_EXP: 3.0, LOG_RATIO: 0.85}


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to the 8-bit grid so PPM round trips are exact."""
    q = np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255)
    return (q / 255.0).astype(DTYPE)


def channel_means(images: Sequence[np.ndarray]) -> tuple[float, ...]:
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return tuple(float(v) for v in stack.mean(axis=(0, 2, 3)))


@dataclass
class FixtureDataset:
    bundle: ModelBundle
    images: list
    image_ids: list
    segmentations: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    kind: str = "random"
    seed: int = 0

    @property
    def fill_means(self) -> tuple[float, ...]:
        return channel_means(self.images)


@dataclass
class PlantedFixture:
    bundle: ModelBundle
    image: np.ndarray
    region: ReceptiveFieldBox
    cell: tuple[int, int]
    prototype: int
    fill_values: tuple
    segmentation: np.ndarray
    similarity: float
    masked_similarity: float
    masked_distance: float
    seed: int = 0

    @property
    def region_mask(self) -> np.ndarray:
        _, h, w = self.image.shape
        m = np.zeros((h, w), dtype=bool)
        r = self.region
        m[r.top : r.bottom, r.left : r.right] = True
        return m

    @property
    def region_fraction(self) -> float:
        return self.region.area / (self.image.shape[1] * self.image.shape[2])

    def as_dataset(self) -> FixtureDataset:
        return FixtureDataset(self.bundle, [self.image], ["planted"], [self.segmentation], [0], "planted", self.seed)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    rows = np.linspace(0.0, 1.0, h)[:, None]
    cols = np.linspace(0.0, 1.0, w)[None, :]
    img = np.empty((3, h, w))
    for c in range(3):
        a, b = rng.uniform(-1, 1, size=2)
        ramp = 0.5 + 0.5 * (a * rows + b * cols) / (abs(a) + abs(b) + 1e-9)
        img[c] = 0.05 + 0.25 * ramp + rng.uniform(0.0, 0.03, size=(h, w))
    return img


def _random_region(rng: np.random.Generator, hp: int, wp: int, size: int, offset: tuple[int, int], lattice: int) -> ReceptiveFieldBox:
    oy, ox = offset
    r0 = int(rng.integers(0, max(hp - size - oy, 0) + 1))
    c0 = int(rng.integers(0, max(wp - size - ox, 0) + 1))
    return ReceptiveFieldBox(r0 * lattice, c0 * lattice, (r0 + size) * lattice, (c0 + size) * lattice)


def _designated(p0: int, p1: int, n: int, offset: int) -> int:
    if p1 - 1 + offset < n:
        return p1 - 1 + offset
    if p0 - offset >= 0:
        return p0 - offset
    return (p0 + p1 - 1) // 2


def gen_planted(
    seed: int = 0,
    region: Optional[Sequence[int]] = None,
    image_size: tuple[int, int] = (32, 32),
    *,
    lattice: int = 2,
    region_cells: int = 2,
    offset: tuple[int, int] = (2, 2),
    simfn: str = NEG_EXP,
    hidden_channels: int = 4,
    latent_dim: int = 6,
    segmentation_margin: int = 0,
) -> PlantedFixture:
    """Build a planted fixture whose designated cell sees only ``region``.

    ``region`` is (top, left, bottom, right) in pixels and must lie on the
    ``lattice`` grid; when omitted a ``region_cells`` x ``region_cells`` block
    of lattice cells is drawn at random. The designated cell sits ``offset``
    lattice cells past the region's bottom-right corner when the image allows.
    """
    rng = np.random.default_rng(seed)
    h_in, w_in = image_size
    s = lattice
    if h_in % s or w_in % s:
        raise ArgumentError(f"image size {image_size} is not a multiple of the lattice {s}")
    hp, wp = h_in // s, w_in // s
    if region is None:
        box = _random_region(rng, hp, wp, region_cells, offset, s)
    else:
        box = ReceptiveFieldBox(*(int(v) for v in region))
    if not (0 <= box.top < box.bottom <= h_in and 0 <= box.left < box.right <= w_in):
        raise ArgumentError(f"region {box} lies outside the {h_in}x{w_in} image")
    if any(v % s for v in (box.top, box.left, box.bottom, box.right)):
        raise ArgumentError(f"region {box} is too small for or misaligned with the stride-{s} lattice")
    pr0, pr1, pc0, pc1 = box.top // s, box.bottom // s, box.left // s, box.right // s
    hm = _designated(pr0, pr1, hp, offset[0])
    wm = _designated(pc0, pc1, wp, offset[1])
    q = max(abs(hm - pr0), abs(pr1 - 1 - hm), abs(wm - pc0), abs(pc1 - 1 - wm))
    t0, u0 = pr0 - hm + q, pc0 - wm + q

    w1 = rng.uniform(0.8, 1.2, size=(hidden_channels, 3, s, s)) / (3 * s * s)
    w2 = np.zeros((latent_dim, hidden_channels, 2 * q + 1, 2 * q + 1))
    w2[:, :, t0 : t0 + pr1 - pr0, u0 : u0 + pc1 - pc0] = rng.uniform(
        0.8, 1.2, size=(latent_dim, hidden_channels, pr1 - pr0, pc1 - pc0)
    )

    image = _background(rng, h_in, w_in)
    image[:, box.top : box.bottom, box.left : box.right] = rng.uniform(0.7, 1.0, size=(3, box.height, box.width))
    image = quantize(image)
    fill = channel_means([image])
    region_mask = np.zeros((h_in, w_in), dtype=bool)
    region_mask[box.top : box.bottom, box.left : box.right] = True
    masked = image.copy()
    for c in range(3):
        masked[c][region_mask] = DTYPE(fill[c])

    def build(scale: float, vectors: np.ndarray) -> ModelBundle:
        backbone = (
            Conv2d(w1, np.zeros(hidden_channels), stride=s, padding=0),
            ReLU(),
            Conv2d(w2 * scale, np.zeros(latent_dim), stride=1, padding=q),
            ReLU(),
        )
        policy = TargetPolicy(PROTOPNET_TOP10) if simfn == LOG_RATIO else TargetPolicy(PROTOTREE_THRESHOLD)
        head = np.ones((1, vectors.shape[0])) if simfn == LOG_RATIO else None
        return ModelBundle(
            backbone,
            PrototypeSet(vectors),
            SimilarityFunction(simfn),
            (3, h_in, w_in),
            head,
            policy,
            {"fixture": "planted", "seed": seed},
        )

    probe = build(1.0, np.zeros((1, latent_dim)))
    f_clean = extract_features(probe, image).values[hm, wm].astype(np.float64)
    f_masked = extract_features(probe, masked).values[hm, wm].astype(np.float64)
    target_d2 = MASKED_DISTANCE[simfn]
    scale = float(np.sqrt(target_d2 / np.sum((f_clean - f_masked) ** 2)))

    model = build(scale, np.zeros((1, latent_dim)))
    r = extract_features(model, image).values[hm, wm].copy()
    model = build(scale, r[None, :])
    model = project_prototypes(model, [image], ["planted"])
    if model.prototypes.provenance[0].h != hm or model.prototypes.provenance[0].w != wm:
        raise ConfigurationError("planted prototype did not project onto the designated cell")

    seg = np.zeros((h_in, w_in), dtype=bool)
    mg = segmentation_margin
    seg[max(box.top - mg, 0) : box.bottom + mg, max(box.left - mg, 0) : box.right + mg] = True

    meta = dict(model.metadata)
    meta.update(
        {
            "region": [box.top, box.left, box.bottom, box.right],
            "cell": [hm, wm],
            "lattice": s,
            "masked_distance": target_d2,
        }
    )
    model = ModelBundle(model.backbone, model.prototypes, model.simfn, model.input_shape, model.head, model.policy, meta)
    s_clean = score_at(model, image, 0, hm, wm)
    s_masked = score_at(model, masked, 0, hm, wm)
    return PlantedFixture(model, image, box, (hm, wm), 0, fill, seg, s_clean, s_masked, target_d2, seed)


def _random_backbone(rng: np.random.Generator, in_shape: tuple[int, int, int], n_layers: int, positive: bool, bias: bool) -> tuple:
    c, _, _ = in_shape
    for _ in range(100):
        layers = []
        ch = c
        kinds = ["conv"]
        while len(kinds) < n_layers:
            options = ["conv", "maxpool"] + ([] if kinds[-1] == "relu" else ["relu"])
            kinds.append(str(rng.choice(options)))
        for kind in kinds:
            if kind == "conv":
                out = int(rng.integers(2, 6))
                k = int(rng.integers(1, 4))
                stride = int(rng.integers(1, 3))
                pad = int(rng.integers(0, k // 2 + 1))
                w = rng.normal(0.0, 1.0 / np.sqrt(ch * k * k), size=(out, ch, k, k))
                if positive:
                    w = np.abs(w)
                b = rng.normal(0.0, 0.1, size=out) if bias else np.zeros(out)
                layers.append(Conv2d(w, b, stride=stride, padding=pad))
                ch = out
            elif kind == "relu":
                layers.append(ReLU())
            else:
                win = int(rng.integers(2, 4))
                layers.append(MaxPool2d(win, int(rng.integers(1, win + 1))))
        try:
            output_shape(layers, in_shape)
        except ConfigurationError:
            continue
        return tuple(layers)
    raise ConfigurationError("could not draw a valid random backbone")


def gen_random(
    seed: int = 0,
    image_size: tuple[int, int] = (16, 16),
    *,
    n_layers: Optional[int] = None,
    max_layers: int = 4,
    n_images: int = 3,
    n_prototypes: int = 3,
    n_classes: int = 2,
    positive: bool = False,
    bias: bool = True,
    simfn: str = LOG_RATIO,
    policy: Optional[TargetPolicy] = None,
) -> FixtureDataset:
    """Seeded random backbone, images and prototypes projected onto the images."""
    rng = np.random.default_rng(seed)
    h, w = image_size
    if n_layers is None:
        n_layers = int(rng.integers(2, max_layers + 1))
    backbone = _random_backbone(rng, (3, h, w), n_layers, positive, bias)
    d = output_shape(backbone, (3, h, w))[0]
    images = [quantize(rng.uniform(0.0, 1.0, size=(3, h, w))) for _ in range(n_images)]
    ids = [f"img{k:03d}" for k in range(n_images)]
    labels = [k % n_classes for k in range(n_images)]
    owner = np.arange(n_prototypes) % n_classes
    head = np.where(owner[None, :] == np.arange(n_classes)[:, None], 1.0, -0.5)
    if policy is None:
        policy = TargetPolicy(PROTOPNET_TOP10) if simfn == LOG_RATIO else TargetPolicy(PROTOTREE_THRESHOLD)
    model = ModelBundle(
        backbone,
        PrototypeSet(rng.normal(size=(n_prototypes, d))),
        SimilarityFunction(simfn),
        (3, h, w),
        head,
        policy,
        {"fixture": "random", "seed": seed},
    )
    model = project_prototypes(model, images, ids)
    segs = []
    for _ in range(n_images):
        seg = np.zeros((h, w), dtype=bool)
        r0, c0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
        seg[r0 : r0 + h // 2, c0 : c0 + w // 2] = True
        segs.append(seg)
    return FixtureDataset(model, images, ids, segs, labels, "random", seed)


def gen_flat(seed: int = 0, image_size: tuple[int, int] = (16, 16), n_images: int = 2) -> FixtureDataset:
    """Backbone with all-zero conv weights: every score ignores the pixels."""
    rng = np.random.default_rng(seed)
    h, w = image_size
    backbone = (
        Conv2d(np.zeros((4, 3, 3, 3)), rng.uniform(0.1, 1.0, size=4), stride=1, padding=1),
        ReLU(),
        MaxPool2d(2, 2),
    )
    images = [quantize(rng.uniform(0.0, 1.0, size=(3, h, w))) for _ in range(n_images)]
    ids = [f"flat{k:03d}" for k in range(n_images)]
    model = ModelBundle(
        backbone,
        PrototypeSet(rng.uniform(0.0, 1.0, size=(2, 4))),
        SimilarityFunction(NEG_EXP),
        (3, h, w),
        None,
        TargetPolicy(PROTOTREE_THRESHOLD, theta=0.5),
        {"fixture": "flat", "seed": seed},
    )
    model = project_prototypes(model, images, ids)
    segs = [np.ones((h, w), dtype=bool) for _ in range(n_images)]
    return FixtureDataset(model, images, ids, segs, [0] * n_images, "flat", seed)


def occlusion_oracle(model: ModelBundle, x: np.ndarray, target, patch_size: int = 1, fill=None) -> np.ndarray:
    """Exhaustive importance map: drop in the frozen-cell score when each patch is filled.

    ``fill`` is a FillPolicy-like object with per-channel ``values`` (defaults
    to zeros).
    """
    i, h, w = int(target[0]), int(target[1]), int(target[2])
    x = np.asarray(x, dtype=DTYPE)
    _, hin, win = x.shape
    values = np.zeros(x.shape[0]) if fill is None else np.asarray(fill.values, dtype=np.float64)
    base = score_at(model, x, i, h, w)
    out = np.zeros((hin, win), dtype=np.float64)
    for r0 in range(0, hin, patch_size):
        for c0 in range(0, win, patch_size):
            xt = x.copy()
            for c in range(x.shape[0]):
                xt[c, r0 : r0 + patch_size, c0 : c0 + patch_size] = DTYPE(values[c])
            out[r0 : r0 + patch_size, c0 : c0 + patch_size] = base - score_at(model, xt, i, h, w)
    return out


def gen_false_bias(seed: int = 0, **kwargs) -> PlantedFixture:
    """Planted fixture whose object mask covers R but not the best cell's footprint."""
    kwargs.setdefault("offset", (3, 3))
    kwargs.setdefault("segmentation_margin", 1)
    return gen_planted(seed, **kwargs)

"""Prototype classifier surface: features, similarity maps, projection, targets."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from protofaith.core.engine import DTYPE, ForwardTrace, as_tensor, forward, output_shape
from protofaith.errors import ArgumentError, ConfigurationError

LOG_RATIO = "log_ratio"
NEG_EXP = "neg_exp"
PROTOPNET_TOP10 = "protopnet_top10"
PROTOTREE_THRESHOLD = "prototree_threshold"


@dataclass(frozen=True)
class SimilarityFunction:
    kind: str = LOG_RATIO
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.kind not in (LOG_RATIO, NEG_EXP):
            raise ConfigurationError(f"unknown similarity function {self.kind!r}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"similarity epsilon must be positive, got {self.epsilon}")

    def __call__(self, d2):
        """Similarity as a function of the squared L2 distance (float64)."""
        d2 = np.asarray(d2, dtype=np.float64)
        if self.kind == NEG_EXP:
            return np.exp(-d2)
        return np.log((d2 + 1.0) / (d2 + self.epsilon))

    def derivative(self, d2):
        """d similarity / d (squared distance)."""
        d2 = np.asarray(d2, dtype=np.float64)
        if self.kind == NEG_EXP:
            return -np.exp(-d2)
        return 1.0 / (d2 + 1.0) - 1.0 / (d2 + self.epsilon)

    @property
    def peak(self) -> float:
        return float(self(0.0))


@dataclass(frozen=True)
class Provenance:
    image_id: str
    h: int
    w: int


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    vectors: np.ndarray  # (p, D)
    provenance: tuple = ()

    def __post_init__(self):
        vectors = as_tensor(self.vectors)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise ConfigurationError(f"prototype set needs shape (p >= 1, D >= 1), got {vectors.shape}")
        object.__setattr__(self, "vectors", vectors)
        prov = tuple(self.provenance) or (None,) * vectors.shape[0]
        if len(prov) != vectors.shape[0]:
            raise ConfigurationError("provenance list length differs from prototype count")
        object.__setattr__(self, "provenance", prov)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class TargetPolicy:
    kind: str = PROTOTREE_THRESHOLD
    theta: float = 0.5
    top_k: int = 10

    def __post_init__(self):
        if self.kind not in (PROTOPNET_TOP10, PROTOTREE_THRESHOLD):
            raise ConfigurationError(f"unknown target policy {self.kind!r}")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")


@dataclass(frozen=True, eq=False)
class ModelBundle:
    backbone: tuple
    prototypes: PrototypeSet
    simfn: SimilarityFunction = SimilarityFunction()
    input_shape: tuple = (3, 224, 224)
    head: Optional[np.ndarray] = None
    policy: TargetPolicy = TargetPolicy()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(self.backbone))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        d = output_shape(self.backbone, self.input_shape)[0]
        if d != self.prototypes.dim:
            raise ConfigurationError(f"backbone emits {d} channels but prototypes have dimension {self.prototypes.dim}")
        if self.head is not None:
            head = as_tensor(self.head)
            if head.ndim != 2 or head.shape[1] != self.prototypes.count:
                raise ConfigurationError(
                    f"head must have one column per prototype ({self.prototypes.count}), got shape {head.shape}"
                )
            object.__setattr__(self, "head", head)

    @property
    def latent_shape(self) -> tuple[int, int]:
        _, h, w = output_shape(self.backbone, self.input_shape)
        return h, w


class Features(NamedTuple):
    values: np.ndarray  # (H, W, D)
    trace: ForwardTrace


@dataclass(frozen=True, eq=False)
class SimilarityMap:
    values: np.ndarray  # (H, W) float64
    prototype: int = 0
    image_id: str = ""


class Target(NamedTuple):
    prototype: int
    h: int
    w: int
    score: float


def extract_features(model: ModelBundle, x: np.ndarray) -> Features:
    x = as_tensor(x)
    if x.shape != model.input_shape:
        raise ArgumentError(f"image shape {x.shape} does not match model input {model.input_shape}")
    trace = forward(model.backbone, x)
    return Features(np.ascontiguousarray(trace.output.transpose(1, 2, 0)), trace)


def squared_distances(features: np.ndarray, r: np.ndarray) -> np.ndarray:
    diff = features.astype(np.float64) - np.asarray(r, dtype=np.float64)
    return np.einsum("hwd,hwd->hw", diff, diff)


def similarity_map(features: np.ndarray, r: np.ndarray, simfn: SimilarityFunction, prototype: int = 0, image_id: str = "") -> SimilarityMap:
    if features.ndim != 3 or features.shape[2] != np.shape(r)[0]:
        raise ArgumentError(f"feature shape {features.shape} incompatible with prototype length {np.shape(r)[0]}")
    return SimilarityMap(simfn(squared_distances(features, r)), prototype, image_id)


def max_similarity(smap: SimilarityMap) -> tuple[int, int, float]:
    values = smap.values
    if values.size == 0:
        raise ArgumentError("similarity map is empty")
    flat = int(np.argmax(values))  # first maximum in row-major order
    h, w = divmod(flat, values.shape[1])
    return h, w, float(values[h, w])


def similarity_maps(model: ModelBundle, x: np.ndarray, image_id: str = "") -> tuple[list[SimilarityMap], Features]:
    feats = extract_features(model, x)
    maps = [
        similarity_map(feats.values, model.prototypes.vectors[i], model.simfn, i, image_id)
        for i in range(model.prototypes.count)
    ]
    return maps, feats


def score_at(model: ModelBundle, x: np.ndarray, prototype: int, h: int, w: int) -> float:
    """Similarity of ``prototype`` at the fixed latent cell (h, w) of image x."""
    feats = extract_features(model, x).values
    diff = feats[h, w].astype(np.float64) - model.prototypes.vectors[prototype].astype(np.float64)
    return float(model.simfn(np.dot(diff, diff)))


def project_prototypes(model: ModelBundle, images: Sequence[np.ndarray], image_ids: Optional[Sequence[str]] = None) -> ModelBundle:
    """Move every prototype onto its nearest latent vector over ``images``.

    Ties resolve to the earliest image, then the first cell in row-major order.
    """
    if len(images) == 0:
        raise ArgumentError("projection set is empty")
    ids = list(image_ids) if image_ids is not None else [str(k) for k in range(len(images))]
    protos = model.prototypes.vectors.astype(np.float64)
    best_d = np.full(protos.shape[0], np.inf)
    best = [None] * protos.shape[0]
    for img_id, x in zip(ids, images):
        feats = extract_features(model, x).values
        flat = feats.reshape(-1, feats.shape[2])
        for i, r in enumerate(protos):
            diff = flat.astype(np.float64) - r
            d2 = np.einsum("nd,nd->n", diff, diff)
            k = int(np.argmin(d2))
            if d2[k] < best_d[i]:
                best_d[i] = d2[k]
                h, w = divmod(k, feats.shape[1])
                best[i] = (img_id, h, w, flat[k].copy())
    vectors = np.stack([b[3] for b in best]).astype(DTYPE)
    provenance = tuple(Provenance(b[0], b[1], b[2]) for b in best)
    return replace(model, prototypes=PrototypeSet(vectors, provenance))


def prototype_classes(head: np.ndarray) -> np.ndarray:
    """Class owning each prototype: the row with the largest head weight."""
    return np.argmax(head, axis=0)


def select_targets(model: ModelBundle, x: np.ndarray, image_id: str = "") -> list[Target]:
    maps, _ = similarity_maps(model, x, image_id)
    peaks = [max_similarity(m) for m in maps]
    policy = model.policy
    if policy.kind == PROTOPNET_TOP10:
        if model.head is None:
            raise ConfigurationError("protopnet_top10 policy needs a linear head")
        scores = np.array([p[2] for p in peaks])
        logits = model.head.astype(np.float64) @ scores
        cls = int(np.argmax(logits))
        owned = [i for i in np.flatnonzero(prototype_classes(model.head) == cls)]
        owned.sort(key=lambda i: (-peaks[i][2], i))
        chosen = owned[: policy.top_k]
    else:
        chosen = [i for i, p in enumerate(peaks) if p[2] > policy.theta]
    return [Target(int(i), peaks[i][0], peaks[i][1], peaks[i][2]) for i in chosen]


def infer_class(model: ModelBundle, x: np.ndarray) -> int:
    if model.head is None:
        raise ConfigurationError("model has no linear head")
    maps, _ = similarity_maps(model, x)
    scores = np.array([max_similarity(m)[2] for m in maps])
    return int(np.argmax(model.head.astype(np.float64) @ scores))

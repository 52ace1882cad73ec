"""Dataset manifests plus image and segmentation loading."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from protofaith.core.engine import DTYPE
from protofaith.core.resample import bilinear_resize, nearest_resize
from protofaith.errors import ArgumentError, FormatError
from protofaith.io.netpbm import read_pgm, read_ppm

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    segmentation: Optional[str] = None
    label: Optional[int] = None
    split: str = "test"


@dataclass
class DatasetManifest:
    entries: list
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    fill: Optional[tuple] = None
    root: str = "."

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise FormatError("manifest normalization means/stds must have length 3")
        if any(s <= 0 for s in self.std):
            raise FormatError("manifest stds must be positive")
        if self.fill is not None and len(self.fill) != 3:
            raise FormatError("manifest fill values must have length 3")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest contains duplicate image ids")

    def path(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def split(self, tag: str) -> list:
        return [e for e in self.entries if e.split == tag]


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON manifest ({exc})") from None
    root = os.path.dirname(os.path.abspath(path))
    norm = doc.get("normalization", {})
    try:
        entries = [
            ManifestEntry(
                str(e["id"]),
                str(e["image"]),
                e.get("segmentation"),
                e.get("label"),
                e.get("split", "test"),
            )
            for e in doc["entries"]
        ]
    except (KeyError, TypeError):
        raise FormatError(f"{path}: every manifest entry needs 'id' and 'image'") from None
    fill = doc.get("fill_mean")
    manifest = DatasetManifest(
        entries,
        tuple(norm.get("mean", (0.0, 0.0, 0.0))),
        tuple(norm.get("std", (1.0, 1.0, 1.0))),
        None if fill is None else tuple(fill),
        root,
    )
    for e in manifest.entries:
        for rel in (e.image, e.segmentation):
            if rel is not None and not os.path.exists(manifest.path(rel)):
                raise FormatError(f"{path}: entry {e.id!r} references missing file {rel}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "normalization": {"mean": list(manifest.mean), "std": list(manifest.std)},
        "fill_mean": None if manifest.fill is None else list(manifest.fill),
        "entries": [
            {k: v for k, v in vars(e).items() if v is not None} for e in manifest.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class LoadedImage:
    tensor: np.ndarray
    original_size: tuple
    resized: bool = False
    notes: dict = field(default_factory=dict)


def load_image(path, mean: Sequence[float] = (0.0, 0.0, 0.0), std: Sequence[float] = (1.0, 1.0, 1.0), size: Optional[tuple] = None) -> LoadedImage:
    """Read a P6 image, scale to [0, 1], resize if needed, then normalize."""
    pixels = read_ppm(path)
    x = (pixels.astype(np.float64) / 255.0).transpose(2, 0, 1)
    original = x.shape[1:]
    resized = size is not None and tuple(size) != tuple(original)
    if resized:
        x = bilinear_resize(x, size[0], size[1]).astype(np.float64)
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return LoadedImage(((x - m) / s).astype(DTYPE), tuple(original), resized)


def load_segmentation(path, size: Optional[tuple] = None, image_size: Optional[tuple] = None) -> np.ndarray:
    """Read a P5 mask; values above 127 mark the object.

    ``image_size`` is the on-disk size of the matching image; a mask of any
    other size cannot be aligned with it. ``size`` is the model input size the
    mask is nearest-neighbour resized to.
    """
    mask = read_pgm(path) > 127
    if image_size is not None and tuple(image_size) != mask.shape:
        raise FormatError(f"{path}: mask is {mask.shape[0]}x{mask.shape[1]} but its image is {image_size[0]}x{image_size[1]}")
    if size is not None and tuple(size) != mask.shape:
        if size[0] < 1 or size[1] < 1:
            raise ArgumentError(f"cannot resize segmentation to {size}")
        mask = nearest_resize(mask, size[0], size[1])
    return mask

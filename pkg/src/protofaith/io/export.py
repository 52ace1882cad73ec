"""Write in-memory fixture datasets to disk in the evalio formats."""
from __future__ import annotations

import json
import os

import numpy as np

from protofaith.io.bundle import save_bundle
from protofaith.io.dataset import DatasetManifest, ManifestEntry, save_manifest
from protofaith.io.netpbm import tensor_to_bytes, write_pgm, write_ppm


def write_dataset(dataset, out_dir, extra: dict | None = None) -> dict:
    """Emit bundle.pxeb, manifest.json, images/*.ppm and masks/*.pgm.

    Images are stored unnormalized (identity mean/std) and must already sit on
    the 8-bit grid for the round trip to be exact.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    entries = []
    for k, (img_id, x) in enumerate(zip(dataset.image_ids, dataset.images)):
        rel = f"images/{img_id}.ppm"
        write_ppm(os.path.join(out_dir, rel), tensor_to_bytes(x))
        seg_rel = None
        if k < len(dataset.segmentations) and dataset.segmentations[k] is not None:
            os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
            seg_rel = f"masks/{img_id}.pgm"
            write_pgm(os.path.join(out_dir, seg_rel), np.where(dataset.segmentations[k], 255, 0).astype(np.uint8))
        label = dataset.labels[k] if k < len(dataset.labels) else None
        entries.append(ManifestEntry(img_id, rel, seg_rel, None if label is None else int(label), "test"))
    manifest = DatasetManifest(entries, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), dataset.fill_means, out_dir)
    paths = {
        "bundle": os.path.join(out_dir, "bundle.pxeb"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }
    save_bundle(dataset.bundle, paths["bundle"])
    save_manifest(manifest, paths["manifest"])
    info = {"kind": dataset.kind, "seed": dataset.seed, "images": list(dataset.image_ids)}
    info.update(extra or {})
    paths["fixture"] = os.path.join(out_dir, "fixture.json")
    with open(paths["fixture"], "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths

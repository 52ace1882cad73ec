"""Persistence: netpbm images, PXEB bundles, manifests and reports."""
from protofaith.io.bundle import decode_bundle, encode_bundle, load_bundle, save_bundle
from protofaith.io.dataset import DatasetManifest, ManifestEntry, load_image, load_manifest, load_segmentation, save_manifest
from protofaith.io.netpbm import read_pgm, read_ppm, write_pgm, write_ppm
from protofaith.io.reports import CSV_COLUMNS, CurveRecord, ReportRow, write_reports

__all__ = [
    "CSV_COLUMNS",
    "CurveRecord",
    "DatasetManifest",
    "ManifestEntry",
    "ReportRow",
    "decode_bundle",
    "encode_bundle",
    "load_bundle",
    "load_image",
    "load_manifest",
    "load_segmentation",
    "read_pgm",
    "read_ppm",
    "save_bundle",
    "save_manifest",
    "write_pgm",
    "write_ppm",
    "write_reports",
]

"""PXEB binary model bundles.

Byte layout (all integers and floats little-endian)::

    offset  size  field
    0       4     magic b"PXEB"
    4       2     format version (u16, currently 1)
    6       2     reserved, zero
    8       8     payload length in bytes (u64)
    16      4     CRC-32 of the payload (u32)
    20      ...   payload

Payload, in order:

    input shape        3 x u32 (C, H, W)
    similarity record  u8 kind (0 log_ratio, 1 neg_exp), f64 epsilon
    policy record      u8 kind (0 protopnet_top10, 1 prototree_threshold), f64 theta, u32 top_k
    layer count        u32, then per layer a u8 kind (0 conv2d, 1 relu, 2 maxpool2d):
        conv2d     6 x u32 (out, in, kh, kw, stride, padding), f32[out*in*kh*kw] weights, f32[out] bias
        relu       nothing
        maxpool2d  2 x u32 (window, stride)
    prototypes         u32 count p, u32 dimension D, f32[p*D] vectors, then per prototype
                       u8 has_provenance and, if set, u16 id length + UTF-8 id, u32 h, u32 w
    head               u8 has_head and, if set, u32 rows, u32 cols, f32[rows*cols]
    metadata           u32 length + UTF-8 JSON (sorted keys, compact separators)

Arrays are row-major.
"""
from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from protofaith.core.engine import Conv2d, MaxPool2d, ReLU
from protofaith.errors import ConfigurationError, FormatError
from protofaith.model import (
    LOG_RATIO,
    NEG_EXP,
    PROTOPNET_TOP10,
    PROTOTREE_THRESHOLD,
    ModelBundle,
    PrototypeSet,
    Provenance,
    SimilarityFunction,
    TargetPolicy,
)

MAGIC = b"PXEB"
VERSION = 1
HEADER = struct.Struct("<4sHHQI")
SIMFN_CODES = {LOG_RATIO: 0, NEG_EXP: 1}
POLICY_CODES = {PROTOPNET_TOP10: 0, PROTOTREE_THRESHOLD: 1}
LAYER_CODES = {"conv2d": 0, "relu": 1, "maxpool2d": 2}


def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_bundle(bundle: ModelBundle) -> bytes:
    if bundle.prototypes.count < 1:
        raise ConfigurationError("cannot save a bundle without prototypes")
    out = bytearray()
    out += struct.pack("<3I", *bundle.input_shape)
    out += struct.pack("<Bd", SIMFN_CODES[bundle.simfn.kind], bundle.simfn.epsilon)
    out += struct.pack("<BdI", POLICY_CODES[bundle.policy.kind], bundle.policy.theta, bundle.policy.top_k)
    out += struct.pack("<I", len(bundle.backbone))
    for layer in bundle.backbone:
        if isinstance(layer, Conv2d):
            o, c, kh, kw = layer.weight.shape
            out += struct.pack("<B6I", 0, o, c, kh, kw, layer.stride, layer.padding)
            out += _f32(layer.weight) + _f32(layer.bias)
        elif isinstance(layer, ReLU):
            out += struct.pack("<B", 1)
        elif isinstance(layer, MaxPool2d):
            out += struct.pack("<B2I", 2, layer.window, layer.stride)
        else:
            raise ConfigurationError(f"cannot serialize layer {layer!r}")
    protos = bundle.prototypes
    out += struct.pack("<2I", protos.count, protos.dim) + _f32(protos.vectors)
    for prov in protos.provenance:
        if prov is None:
            out += struct.pack("<B", 0)
        else:
            name = prov.image_id.encode("utf-8")
            out += struct.pack("<BH", 1, len(name)) + name + struct.pack("<2I", prov.h, prov.w)
    if bundle.head is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B2I", 1, *bundle.head.shape) + _f32(bundle.head)
    meta = json.dumps(bundle.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    payload = bytes(out)
    return HEADER.pack(MAGIC, VERSION, 0, len(payload), zlib.crc32(payload)) + payload


class _Reader:
    def __init__(self, data: bytes, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: bundle payload ends early at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        return st.unpack(self.take(st.size))

    def floats(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def decode_bundle(data: bytes, source="<bytes>") -> ModelBundle:
    if len(data) < HEADER.size:
        raise FormatError(f"{source}: file too short for a PXEB header")
    magic, version, _, length, crc = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported bundle version {version} (this build reads {VERSION})")
    payload = data[HEADER.size :]
    if len(payload) != length:
        raise FormatError(f"{source}: payload is {len(payload)} bytes but header declares {length}")
    actual = zlib.crc32(payload)
    if actual != crc:
        raise FormatError(f"{source}: checksum mismatch (stored {crc:08x}, computed {actual:08x})")

    rd = _Reader(payload, source)
    input_shape = rd.unpack("3I")
    sim_code, eps = rd.unpack("Bd")
    pol_code, theta, top_k = rd.unpack("BdI")
    kinds = {v: k for k, v in SIMFN_CODES.items()}
    policies = {v: k for k, v in POLICY_CODES.items()}
    if sim_code not in kinds or pol_code not in policies:
        raise FormatError(f"{source}: unknown similarity ({sim_code}) or policy ({pol_code}) code")
    (n_layers,) = rd.unpack("I")
    layers = []
    for i in range(n_layers):
        (code,) = rd.unpack("B")
        if code == 0:
            o, c, kh, kw, stride, pad = rd.unpack("6I")
            layers.append(Conv2d(rd.floats(o, c, kh, kw), rd.floats(o), stride=stride, padding=pad))
        elif code == 1:
            layers.append(ReLU())
        elif code == 2:
            layers.append(MaxPool2d(*rd.unpack("2I")))
        else:
            raise FormatError(f"{source}: layer {i} has unknown kind code {code}")
    p, d = rd.unpack("2I")
    if p < 1:
        raise FormatError(f"{source}: bundle declares zero prototypes")
    vectors = rd.floats(p, d)
    provenance = []
    for _ in range(p):
        (has,) = rd.unpack("B")
        if has:
            (n,) = rd.unpack("H")
            name = rd.take(n).decode("utf-8")
            h, w = rd.unpack("2I")
            provenance.append(Provenance(name, h, w))
        else:
            provenance.append(None)
    (has_head,) = rd.unpack("B")
    head = rd.floats(*rd.unpack("2I")) if has_head else None
    (n_meta,) = rd.unpack("I")
    metadata = json.loads(rd.take(n_meta).decode("utf-8"))
    if rd.pos != len(payload):
        raise FormatError(f"{source}: {len(payload) - rd.pos} trailing bytes after bundle payload")
    try:
        return ModelBundle(
            tuple(layers),
            PrototypeSet(vectors, tuple(provenance)),
            SimilarityFunction(kinds[sim_code], eps),
            input_shape,
            head,
            TargetPolicy(policies[pol_code], theta, top_k),
            metadata,
        )
    except ConfigurationError as exc:
        raise FormatError(f"{source}: inconsistent bundle ({exc})") from None


def save_bundle(bundle: ModelBundle, path) -> None:
    data = encode_bundle(bundle)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return decode_bundle(fh.read(), path)

"""SDM1 tensor container.

Layout::

    b"SDM1" | version (1 byte) | manifest length (u64 LE) | manifest JSON | body

The manifest lists every tensor with dtype tag, shape, byte offset into the
body, byte length and a sha256 of the blob, plus free-form metadata. Blobs
are row-major little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDM1"
VERSION = 1
_PREFIX = struct.Struct("<4sBQ")

DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "i32": "<i4", "u32": "<u4", "u8": "|u1", "bool": "|b1"}
_TAGS = {np.dtype(v).str: k for k, v in DTYPES.items()}


class ContainerError(ValueError):
    pass


class BadMagic(ContainerError):
    pass


class ManifestMismatch(ContainerError):
    pass


class ChecksumMismatch(ContainerError):
    pass


def _tag(a: np.ndarray) -> str:
    key = a.dtype.newbyteorder("<").str if a.dtype.byteorder not in ("|",) else a.dtype.str
    if key not in _TAGS:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    return _TAGS[key]


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        blob = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset,
                        "length": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_manifest(raw: bytes) -> tuple[dict, int]:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic("not an SDM1 container")
    if len(raw) < _PREFIX.size:
        raise ManifestMismatch("truncated prefix")
    _, version, mlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise ManifestMismatch(f"unsupported container version {version}")
    start = _PREFIX.size
    if start + mlen > len(raw):
        raise ManifestMismatch("manifest runs past end of file")
    try:
        manifest = json.loads(raw[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestMismatch(f"manifest is not valid JSON: {exc}") from None
    return manifest, start + mlen


def _validate(manifest: dict, body_len: int) -> None:
    names = set()
    spans = []
    for e in manifest.get("tensors", []):
        name = e["name"]
        if name in names:
            raise ManifestMismatch(f"duplicate tensor name {name!r}")
        names.add(name)
        if e["dtype"] not in DTYPES:
            raise ManifestMismatch(f"{name}: unknown dtype tag {e['dtype']}")
        expected = int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(DTYPES[e["dtype"]]).itemsize
        if e["length"] != expected:
            raise ManifestMismatch(f"{name}: length {e['length']} does not match shape")
        if e["offset"] < 0 or e["offset"] + e["length"] > body_len:
            raise ManifestMismatch(f"{name}: blob out of bounds")
        spans.append((e["offset"], e["offset"] + e["length"], name))
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ManifestMismatch(f"blobs {an!r} and {bn!r} overlap")


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    manifest, body_start = read_manifest(raw)
    body = memoryview(raw)[body_start:]
    _validate(manifest, len(body))
    tensors = {}
    for e in manifest["tensors"]:
        blob = body[e["offset"]:e["offset"] + e["length"]]
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise ChecksumMismatch(f"{e['name']}: checksum mismatch")
        arr = np.frombuffer(blob, dtype=DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, manifest.get("metadata", {})

import json
import struct

import numpy as np
import pytest

from subnetsearch import container
from subnetsearch.container import BadMagic, ChecksumMismatch, ManifestMismatch, load_tensors, save_tensors


def _sample():
    rng = np.random.default_rng(0)
    return {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64),
            "c": np.array([True, False]), "d": rng.normal(size=(2,))}


def test_round_trip(tmp_path):
    p = tmp_path / "x.sdm"
    t = _sample()
    save_tensors(p, t, {"hello": [1, 2]})
    back, meta = load_tensors(p)
    assert meta == {"hello": [1, 2]}
    for k, v in t.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.sdm"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(BadMagic):
        load_tensors(p)


def test_corrupt_blob(tmp_path):
    p = tmp_path / "x.sdm"
    save_tensors(p, _sample())
    raw = bytearray(p.read_bytes())
    raw[-1] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        load_tensors(p)


def _rewrite_manifest(p, edit):
    raw = p.read_bytes()
    manifest, start = container.read_manifest(raw)
    body = raw[start:]
    edit(manifest)
    m = json.dumps(manifest).encode()
    p.write_bytes(struct.pack("<4sBQ", b"SDM1", 1, len(m)) + m + body)


def test_offset_out_of_bounds(tmp_path):
    p = tmp_path / "x.sdm"
    save_tensors(p, _sample())
    _rewrite_manifest(p, lambda m: m["tensors"][0].update(offset=10_000))
    with pytest.raises(ManifestMismatch):
        load_tensors(p)


def test_duplicate_and_overlap(tmp_path):
    p = tmp_path / "x.sdm"
    save_tensors(p, _sample())
    _rewrite_manifest(p, lambda m: m["tensors"][1].update(name="a"))
    with pytest.raises(ManifestMismatch):
        load_tensors(p)
    save_tensors(p, _sample())
    _rewrite_manifest(p, lambda m: m["tensors"][1].update(offset=0, length=m["tensors"][1]["length"]))
    with pytest.raises(ManifestMismatch):
        load_tensors(p)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(container.ContainerError):
        save_tensors(tmp_path / "x.sdm", {"z": np.zeros(2, dtype=np.complex64)})

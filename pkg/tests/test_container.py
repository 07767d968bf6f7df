"""Tensor container format: framing, checksums, and error taxonomy."""

import struct
import zlib

import pytest
import torch

from melflow.container import (
    ChecksumError,
    MagicError,
    TruncatedError,
    inspect,
    load_tensors,
    pack_text,
    save_tensors,
    unpack_text,
)


def roundtrip(tmp_path, tensors):
    path = tmp_path / "t.acep"
    save_tensors(path, tensors)
    return load_tensors(path)


def test_roundtrip_exact(tmp_path):
    tensors = {
        "a": torch.randn(3, 4),
        "b.weight": torch.randn(2, 5, 7),
        "empty": torch.zeros(0),
        "scalar": torch.tensor(3.5),
    }
    out = roundtrip(tmp_path, tensors)
    assert list(out.keys()) == list(tensors.keys())
    for name, t in tensors.items():
        assert out[name].shape == t.shape
        assert torch.equal(out[name], t)


def test_float64_is_cast_to_float32(tmp_path):
    t = torch.randn(4, dtype=torch.float64)
    out = roundtrip(tmp_path, {"x": t})
    assert out["x"].dtype == torch.float32
    assert torch.equal(out["x"], t.to(torch.float32))


def test_save_rejects_duplicate_names(tmp_path):
    class Fake:
        def __len__(self):
            return 2

        def items(self):
            return [("same", torch.zeros(1)), ("same", torch.ones(1))]

    with pytest.raises(ValueError):
        save_tensors(tmp_path / "dup.acep", Fake())


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.acep"
    save_tensors(path, {"x": torch.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(MagicError):
        load_tensors(path)


def test_bad_version(tmp_path):
    path = tmp_path / "v.acep"
    save_tensors(path, {"x": torch.zeros(2)})
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 4, 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(MagicError):
        load_tensors(path)


def test_checksum_detects_payload_corruption(tmp_path):
    path = tmp_path / "c.acep"
    save_tensors(path, {"x": torch.ones(8)})
    raw = bytearray(path.read_bytes())
    raw[-8] ^= 0xFF  # inside the last tensor's values, before the CRC
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_tensors(path)


def test_truncation_with_recomputed_checksum(tmp_path):
    # Cut the payload short but write a VALID checksum over the truncated
    # bytes, so only the per-tensor length bookkeeping can catch it.
    path = tmp_path / "t.acep"
    save_tensors(path, {"x": torch.arange(16, dtype=torch.float32)})
    raw = path.read_bytes()
    body = raw[:-4]
    cut = body[: len(body) - 8]
    path.write_bytes(cut + struct.pack("<I", zlib.crc32(cut) & 0xFFFFFFFF))
    with pytest.raises(TruncatedError):
        load_tensors(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "h.acep"
    path.write_bytes(b"AC")
    with pytest.raises(TruncatedError):
        load_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    # Extra payload bytes with a fixed-up checksum are a framing error.
    path = tmp_path / "trail.acep"
    save_tensors(path, {"x": torch.zeros(3)})
    raw = path.read_bytes()
    body = raw[:-4] + b"\x00\x00\x00\x00"
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(TruncatedError):
        load_tensors(path)


def test_pack_unpack_text_roundtrip():
    text = "steps = 30\n# comment\nname = café\n"
    assert unpack_text(pack_text(text)) == text


def test_inspect_reports_shapes_and_crc(tmp_path):
    path = tmp_path / "i.acep"
    save_tensors(path, {"w": torch.zeros(2, 3), "b": torch.zeros(5)})
    info = inspect(path)
    assert info["format_version"] == 1
    assert info["tensor_count"] == 2
    assert info["crc_ok"] is True
    assert info["total_values"] == 11
    names = {t["name"]: t for t in info["tensors"]}
    assert names["w"]["shape"] == [2, 3]
    assert names["b"]["numel"] == 5

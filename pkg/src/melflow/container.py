"""Binary tensor container used for checkpoints, mel files, and datasets.

Layout (all integers little-endian):
    magic   b"ACEP"
    u32     format version
    u32     tensor count
    per tensor:
        u16     name length, then UTF-8 name bytes
        u8      rank
        u32[]   dims
        f32[]   values, row-major
    u32     CRC32 of every preceding byte

Float32 is the only element type. Strings that need to ride along
(e.g. the run config embedded in a checkpoint) are stored as a float
tensor of byte values, which round-trips exactly for 0..255.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ACEP"
FORMAT_VERSION = 1


class ContainerError(Exception):
    """Base class for container read failures."""


class MagicError(ContainerError):
    """File does not start with the expected magic/version."""


class TruncatedError(ContainerError):
    """File ended before the declared payload was complete."""


class ChecksumError(ContainerError):
    """Trailing CRC32 does not match the payload."""


def save_tensors(path, tensors) -> None:
    """Write an ordered mapping of name -> tensor/ndarray to `path`.

    Values are cast to float32. Names must be unique (mapping keys are).
    """
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(tensors))]
    seen = set()
    for name, value in tensors.items():
        if name in seen:
            raise ValueError(f"duplicate tensor name: {name!r}")
        seen.add(name)
        arr = _to_f32_array(value)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(arr.tobytes(order="C"))
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_tensors(path) -> "OrderedDict[str, torch.Tensor]":
    """Read a container back as an ordered dict of float32 torch tensors."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise TruncatedError(f"{path}: file too short to hold a header")
    if raw[: len(MAGIC)] != MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != FORMAT_VERSION:
        raise MagicError(f"{path}: unsupported format version {version}")
    if len(raw) < len(MAGIC) + 8 + 4:
        raise TruncatedError(f"{path}: file too short for tensor table")
    payload, crc_bytes = raw[:-4], raw[-4:]
    stored_crc = struct.unpack("<I", crc_bytes)[0]
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"{path}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )

    count = struct.unpack_from("<I", raw, 8)[0]
    offset = 12
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(count):
        offset, name, arr = _read_one(raw, offset, len(payload), path)
        if name in out:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        out[name] = torch.from_numpy(arr)
    if offset != len(payload):
        raise TruncatedError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return out


def inspect(path) -> dict:
    """Summarize a container: per-tensor name/shape/size and CRC status."""
    tensors = load_tensors(path)
    rows = [
        {"name": name, "shape": list(t.shape), "numel": t.numel()}
        for name, t in tensors.items()
    ]
    return {
        "path": str(path),
        "format_version": FORMAT_VERSION,
        "tensor_count": len(rows),
        "tensors": rows,
        "crc_ok": True,  # load_tensors raises otherwise
        "total_values": sum(r["numel"] for r in rows),
    }


def pack_text(text: str) -> torch.Tensor:
    """Encode a UTF-8 string as a float tensor of byte values."""
    data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
    return torch.from_numpy(data.astype(np.float32))


def unpack_text(tensor: torch.Tensor) -> str:
    vals = tensor.detach().cpu().numpy()
    return vals.astype(np.uint8).tobytes().decode("utf-8")


def _to_f32_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        arr = value.detach().cpu().to(torch.float32).numpy()
    else:
        arr = np.asarray(value, dtype=np.float32)
    arr = arr.astype(np.float32, copy=False)
    # ascontiguousarray would promote rank-0 to rank-1; 0-d is always contiguous
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _read_one(raw: bytes, offset: int, payload_end: int, path):
    def need(n, what):
        if offset + n > payload_end:
            raise TruncatedError(f"{path}: truncated while reading {what}")

    need(2, "name length")
    (name_len,) = struct.unpack_from("<H", raw, offset)
    offset += 2
    need(name_len, "name")
    name = raw[offset : offset + name_len].decode("utf-8")
    offset += name_len
    need(1, "rank")
    rank = raw[offset]
    offset += 1
    need(4 * rank, "dims")
    dims = struct.unpack_from(f"<{rank}I" if rank else "<", raw, offset) if rank else ()
    offset += 4 * rank
    numel = 1
    for d in dims:
        numel *= d
    need(4 * numel, f"values of {name!r}")
    arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset).reshape(dims).copy()
    offset += 4 * numel
    return offset, name, arr

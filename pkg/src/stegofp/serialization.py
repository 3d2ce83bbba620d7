"""Binary container used by encoder weight files and fingerprint bundles.

Layout: 4 magic bytes, uint32 header length, JSON header (metadata plus a
tensor manifest with shapes and byte offsets), a little-endian float32
parameter blob, and a trailing uint32 CRC-32 of the blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np
import torch

from .errors import CorruptionError, VersionError

ENCODER_MAGIC = b"SGW1"
BUNDLE_MAGIC = b"SGF1"


def canonical_digest(obj) -> str:
    """SHA-256 of a canonical JSON rendering; used for provenance digests."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_container(path, magic: bytes, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write tensors (float32) under the given magic with a JSON header."""
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        raw = arr.astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    full_header = dict(header)
    full_header["tensors"] = manifest
    header_bytes = json.dumps(full_header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read a container, verifying magic and blob checksum."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != magic:
        raise VersionError(f"{path}: bad magic, expected {magic!r}")
    (header_len,) = struct.unpack("<I", data[4:8])
    header_end = 8 + header_len
    if len(data) < header_end + 4:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header") from exc
    blob = data[header_end:-4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(blob) != stored_crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        numel = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * numel
        if end > len(blob):
            raise CorruptionError(f"{path}: tensor {entry['name']} out of bounds")
        arr = np.frombuffer(blob, dtype="<f4", count=numel, offset=start).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header, tensors

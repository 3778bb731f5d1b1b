"""
Weight file format shared by classifiers and GAN pairs.

Layout (all integers little-endian):

    magic      4 bytes   b"TAAW"
    version    1 byte    currently 1
    hlen       4 bytes   u32 length of the JSON header
    header     hlen      UTF-8 JSON, sorted keys: arch, names, shapes, meta
    payload    ...       every array in header order as '<f8'
    checksum   32 bytes  sha256 over everything above
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from taabench.errors import WeightFileError

logger = logging.getLogger(__name__)

MAGIC = b"TAAW"
VERSION = 1
_DIGEST_SIZE = 32


def encode_weights(arch_id: str, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    names = list(arrays)
    header = {
        "arch": arch_id,
        "names": names,
        "shapes": [list(arrays[name].shape) for name in names],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes() for name in names)
    body = MAGIC + bytes([VERSION]) + struct.pack("<I", len(header_bytes)) + header_bytes + payload
    return body + hashlib.sha256(body).digest()


def decode_weights(blob: bytes, expected_arch: Optional[str] = None,
                   source: str = "<bytes>") -> Tuple[str, Dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 5 + _DIGEST_SIZE or blob[:4] != MAGIC:
        raise WeightFileError(f"{source}: not a weight file (bad magic or truncated)")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightFileError(f"{source}: checksum mismatch, file is corrupted")
    if body[4] != VERSION:
        raise WeightFileError(f"{source}: unsupported format version {body[4]}")

    (header_len,) = struct.unpack("<I", body[5:9])
    try:
        header = json.loads(body[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFileError(f"{source}: unreadable header: {e}") from e

    arch_id = header["arch"]
    if expected_arch is not None and arch_id != expected_arch:
        raise WeightFileError(f"{source}: holds architecture '{arch_id}', expected '{expected_arch}'")

    arrays = {}
    offset = 9 + header_len
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(body):
            raise WeightFileError(f"{source}: payload shorter than header declares")
        arrays[name] = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(body):
        raise WeightFileError(f"{source}: {len(body) - offset} trailing payload bytes")
    return arch_id, arrays, header.get("meta", {})


def write_weights(path, arch_id: str, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_weights(arch_id, arrays, meta))
    logger.info(f"💾 Saved {arch_id} weights to {path}")
    return path


def read_weights(path, expected_arch: Optional[str] = None) -> Tuple[str, Dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise WeightFileError(f"{path}: no such weight file") from e
    return decode_weights(blob, expected_arch=expected_arch, source=str(path))

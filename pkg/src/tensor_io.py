"""
UQT1 tensor files.

Layout: b"UQT1", little-endian u32 header length H, H bytes of UTF-8 JSON
{"dtype", "shape", "role"}, then the raw little-endian row-major payload.
"""
import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import DataError

MAGIC = b"UQT1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("u1"),
}


def _dtype_tag(array: np.ndarray) -> str:
    if array.dtype in (np.float32, np.float64):
        return "f32"
    if array.dtype in (np.uint8, np.bool_):
        return "u8"
    raise DataError(f"UQT1 supports f32 and u8 payloads, got {array.dtype}")


def encode_tensor(array: np.ndarray, role: str) -> bytes:
    tag = _dtype_tag(array)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[tag])
    header = json.dumps(
        {"dtype": tag, "shape": list(payload.shape), "role": role},
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + payload.tobytes(order="C")


def decode_tensor(blob: bytes) -> Tuple[np.ndarray, Dict]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise DataError("Not a UQT1 tensor (bad magic)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if 8 + header_len > len(blob):
        raise DataError("UQT1 header length exceeds file size")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"UQT1 header is not valid JSON: {e}")
    tag = header.get("dtype")
    if tag not in _DTYPES:
        raise DataError(f"UQT1 dtype {tag!r} not supported")
    shape = tuple(int(s) for s in header.get("shape", []))
    dtype = _DTYPES[tag]
    payload = blob[8 + header_len:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"UQT1 payload has {len(payload)} bytes, expected {expected} for shape {shape}")
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if tag == "f32":
        array = array.astype(np.float32)
    return array, header


def write_tensor(path: Union[str, Path], array: np.ndarray, role: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(np.asarray(array), role))
    return path


def read_tensor(path: Union[str, Path]) -> Tuple[np.ndarray, Dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Tensor file not found: {path}")
    return decode_tensor(path.read_bytes())

"""Tensor file format: magic line, one JSON header line, raw
little-endian float32 payload."""

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = ["write_tensor", "read_tensor", "MAGIC"]

MAGIC = b"ANTV1"


def write_tensor(path, array, role, positions=None):
    """Write an n x d float32 tensor with its role ('Q'|'K'|'V'|'grad')
    and optional per-token positions."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {
        "dtype": "f32",
        "shape": list(arr.shape),
        "layout": "row-major",
        "role": role,
    }
    if positions is not None:
        header["positions"] = [int(p) for p in positions]
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(arr.tobytes())
    return path


def read_tensor(path):
    """Returns (float32 array, header dict)."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unparseable header: {exc}") from exc
        if header.get("dtype") != "f32" or header.get("layout") != "row-major":
            raise FormatError(f"{path}: unsupported dtype/layout")
        shape = tuple(header["shape"])
        payload = fh.read()
    expect = int(np.prod(shape)) * 4
    if len(payload) != expect:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expect}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return arr, header

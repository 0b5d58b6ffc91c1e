"""
Matrix fixture formats.

TSDW (binary): magic ``TSDW``, rows and cols as little-endian uint32, then
rows*cols little-endian float64 in row-major order.

CSV (text): first line ``rows,cols``, then one comma-separated row per line
with 17 significant digits, which round-trips every finite float64 exactly.
"""

import os
import struct
from typing import Union

import numpy as np

from .errors import MatrixFormatError, ReportError
from .spectral import Matrix

MAGIC = b"TSDW"
_HEADER = struct.Struct("<4sII")

PathLike = Union[str, os.PathLike]


def encode_tsdw(a: Matrix) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise MatrixFormatError(f"expected a 2-D matrix, got shape {a.shape}")
    rows, cols = a.shape
    return _HEADER.pack(MAGIC, rows, cols) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def decode_tsdw(data: bytes, source: str = "<bytes>") -> Matrix:
    if len(data) < _HEADER.size:
        raise MatrixFormatError(f"{source}: truncated TSDW header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatrixFormatError(f"{source}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise MatrixFormatError(f"{source}: expected {expected} bytes for {rows}x{cols}, got {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    return values.astype(np.float64).reshape(rows, cols)


def encode_csv(a: Matrix) -> str:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise MatrixFormatError(f"expected a 2-D matrix, got shape {a.shape}")
    lines = [f"{a.shape[0]},{a.shape[1]}"]
    for row in a:
        lines.append(",".join(format(float(x), ".17g") for x in row))
    return "\n".join(lines) + "\n"


def decode_csv(text: str, source: str = "<text>") -> Matrix:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise MatrixFormatError(f"{source}: empty CSV matrix")
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
    except ValueError as e:
        raise MatrixFormatError(f"{source}:1: header must be 'rows,cols'") from e
    if len(lines) - 1 != rows:
        raise MatrixFormatError(f"{source}: header declares {rows} rows, found {len(lines) - 1}")
    out = np.empty((rows, cols), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        fields = line.split(",")
        if len(fields) != cols:
            raise MatrixFormatError(f"{source}:{i + 2}: expected {cols} values, got {len(fields)}")
        try:
            out[i] = [float(v) for v in fields]
        except ValueError as e:
            raise MatrixFormatError(f"{source}:{i + 2}: {e}") from e
    return out


def write_tsdw(path: PathLike, a: Matrix) -> None:
    _write_bytes(path, encode_tsdw(a))


def read_tsdw(path: PathLike) -> Matrix:
    return decode_tsdw(_read_bytes(path), str(path))


def write_csv(path: PathLike, a: Matrix) -> None:
    _write_bytes(path, encode_csv(a).encode("ascii"))


def read_csv(path: PathLike) -> Matrix:
    return decode_csv(_read_bytes(path).decode("ascii"), str(path))


def save_matrix(path: PathLike, a: Matrix) -> None:
    """Write ``a`` as CSV when the path ends in .csv, TSDW otherwise."""
    if str(path).lower().endswith(".csv"):
        write_csv(path, a)
    else:
        write_tsdw(path, a)


def load_matrix(path: PathLike) -> Matrix:
    """Read a matrix, detecting the format from the leading magic bytes."""
    data = _read_bytes(path)
    if data[:4] == MAGIC:
        return decode_tsdw(data, str(path))
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as e:
        raise MatrixFormatError(f"{path}: neither TSDW nor CSV") from e
    return decode_csv(text, str(path))


def _read_bytes(path: PathLike) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise ReportError(f"Failed to read matrix {path}: {e}") from e


def _write_bytes(path: PathLike, data: bytes) -> None:
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise ReportError(f"Failed to write matrix {path}: {e}") from e

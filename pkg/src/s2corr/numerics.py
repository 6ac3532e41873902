"""Array substrate: validated numpy tensors, seeded RNG streams and the S2CT file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float32/float64 with rank 1-4.
``as_tensor`` is the single validation gate; everything downstream assumes its output.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"S2CT"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
MAX_RANK = 4
MANIFEST = "manifest.json"


class DimensionError(ValueError):
    """Raised when tensor extents do not agree with an operation's contract."""


class FormatError(ValueError):
    """Raised for malformed S2CT files or bundles."""


def debug_enabled() -> bool:
    return os.environ.get("S2CORR_DEBUG", "") not in ("", "0")


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a Tensor and return it as a contiguous array.

    Rejects rank 0 or rank > 4, zero extents, non-float dtypes and non-finite values.
    """
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in DTYPE_CODES:
        if dtype is None and np.issubdtype(arr.dtype, np.number):
            arr = arr.astype(np.float64)
        else:
            raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise DimensionError(f"rank {arr.ndim} outside 1..{MAX_RANK}")
    if 0 in arr.shape:
        raise DimensionError(f"zero extent in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return np.ascontiguousarray(arr)


def check_finite(arr: np.ndarray, stage: str) -> np.ndarray:
    """Debug-mode assertion that ``arr`` is finite after ``stage``."""
    if debug_enabled() and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after {stage}")
    return arr


# -- RNG -------------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent named sub-stream of ``seed`` (fixed stream splitting)."""
    key = zlib.crc32(stream.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))


# -- linear algebra ----------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` accumulated left to right over the inner extent.

    ``a`` may carry leading batch axes (``(..., k)``); ``b`` is ``(k, n)``. Each output
    element depends only on its own row of ``a``, so results are bitwise independent of
    how the batch is partitioned.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim != 2 or a.ndim < 1:
        raise DimensionError(f"matmul expects (..., k) x (k, n), got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    k = b.shape[0]
    out = a[..., 0:1] * b[0]
    for i in range(1, k):
        out += a[..., i : i + 1] * b[i]
    return out


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Divide each row (last axis) by ``max(norm, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x)
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norms, eps)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("logit requires values in the open interval (0, 1)")
    return np.log(p) - np.log1p(-p)


# -- S2CT files ----------------------------------------------------------------------------

def encode_tensor(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    header = MAGIC + bytes([VERSION, DTYPE_CODES[t.dtype], t.ndim, 0])
    dims = struct.pack(f"<{t.ndim}I", *t.shape)
    return header + dims + t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError("truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    version, code, ndim, reserved = buf[4], buf[5], buf[6], buf[7]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise FormatError(f"unsupported dtype code {code}")
    if not 1 <= ndim <= MAX_RANK:
        raise FormatError(f"invalid rank {ndim}")
    if reserved != 0:
        raise FormatError("reserved header byte must be zero")
    end_dims = 8 + 4 * ndim
    if len(buf) < end_dims:
        raise FormatError("truncated extents")
    dims = struct.unpack(f"<{ndim}I", buf[8:end_dims])
    if 0 in dims:
        raise FormatError("zero extent")
    dtype = CODE_DTYPES[code].newbyteorder("<")
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(buf) != end_dims + nbytes:
        raise FormatError(f"payload is {len(buf) - end_dims} bytes, expected {nbytes}")
    arr = np.frombuffer(buf, dtype=dtype, offset=end_dims).reshape(dims)
    return arr.astype(CODE_DTYPES[code])


def save_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- bundles -------------------------------------------------------------------------------

def save_bundle(directory, tensors: dict[str, np.ndarray], data: dict | None = None) -> None:
    """Write a directory of S2CT files plus ``manifest.json``.

    ``data`` holds JSON-serializable entries (class names, configs) stored in the manifest.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(tensors):
        fname = f"{name}.s2ct"
        save_tensor(directory / fname, tensors[name])
        files[name] = fname
    manifest = {"format": "S2CT-bundle", "version": VERSION, "tensors": files, "data": data or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise FormatError(f"missing {MANIFEST} in {directory}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), dict):
        raise FormatError("manifest lacks a 'tensors' table")
    tensors = {}
    for name, fname in manifest["tensors"].items():
        fpath = directory / fname
        if not fpath.is_file():
            raise FormatError(f"tensor '{name}' file {fname} not found")
        try:
            tensors[name] = load_tensor(fpath)
        except FormatError as exc:
            raise FormatError(f"tensor '{name}': {exc}") from exc
    return tensors, manifest.get("data", {})

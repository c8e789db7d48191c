"""On-disk formats: tensor containers, JSON manifests, checkpoints.

Tensor container layout (all little-endian)::

    4 bytes   magic b"SPVI"
    uint16    format version (1)
    uint8     dtype code (1 = float32)
    uint8     rank
    uint64[r] dims
    float32   payload, row-major, prod(dims) values

Every writer goes through a temporary file in the target directory followed
by ``os.replace`` so readers never observe partial files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from spvi.errors import SpviError

MAGIC = b"SPVI"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}
_HEADER = struct.Struct("<4sHBB")


class FormatError(SpviError, ValueError):
    """Malformed or incompatible file."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray, jnp.ndarray)):
        return np.asarray(obj).tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    header = _HEADER.pack(MAGIC, VERSION, 1, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, code, rank = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    off = _HEADER.size
    if len(data) < off + 8 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - off != expected:
        raise FormatError(f"payload has {len(data) - off} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, offset=off).reshape(dims).copy()


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(directory, params, manifest: dict) -> Path:
    """Write ``params`` as a flat float32 blob plus ``manifest.json``.

    Leaf shapes are recorded so ``load_checkpoint`` can validate a template.
    """
    directory = Path(directory)
    flat, _ = ravel_pytree(params)
    leaves = [np.shape(leaf) for leaf in _leaves(params)]
    write_tensor(directory / "params.spvi", np.asarray(flat))
    write_json(directory / "manifest.json", {**manifest, "n_params": int(flat.size),
                                             "leaf_shapes": leaves, "blob": "params.spvi"})
    return directory


def load_checkpoint(directory, template):
    """Restore parameters into the structure of ``template``."""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    flat = read_tensor(directory / manifest["blob"])
    ref, unravel = ravel_pytree(template)
    if flat.size != ref.size:
        raise FormatError(f"checkpoint holds {flat.size} values, template needs {ref.size}")
    shapes = [list(np.shape(leaf)) for leaf in _leaves(template)]
    if shapes != [list(s) for s in manifest["leaf_shapes"]]:
        raise FormatError("checkpoint leaf shapes do not match the template")
    return unravel(jnp.asarray(flat, dtype=ref.dtype)), manifest


def _leaves(tree):
    return jax.tree_util.tree_leaves(tree)

"""Deterministic on-disk formats.

JSON written here is byte-reproducible: floats are rendered with '%.17g'
(lossless for float64), keys keep insertion order, and non-finite values
are rejected rather than smuggled in as strings. Checkpoints are a one
line ASCII magic, a JSON header line describing the arrays, then the raw
row-major little-endian float64 buffers in header order.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"#poisonlab-checkpoint-v1\n"


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    return format(x, ".17g")


def _ser(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    close = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"JSON keys must be str, got {type(k).__name__}")
            items.append(f"{pad}{json.dumps(k)}: {_ser(v, indent, level + 1)}")
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        items = [f"{pad}{_ser(v, indent, level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + close + "]"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is None:
        return "null"
    if isinstance(obj, np.ndarray):
        return _ser(obj.tolist(), indent, level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj, indent: int = 2) -> str:
    """Render ``obj`` as JSON with reproducible bytes."""
    return _ser(obj, indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_bytes(canonical_json(obj).encode("utf-8"))


def read_json(path):
    return json.loads(Path(path).read_text("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays with a metadata header.

    Array order in ``arrays`` is the byte order on disk, so two saves of
    the same state produce identical files.
    """
    meta = {
        "header": header,
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(meta, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a poisonlab checkpoint")
        meta = json.loads(f.readline().decode("utf-8"))
        blob = f.read()
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in meta["arrays"]:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise ValueError(f"{path}: truncated checkpoint (array {name!r})")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return meta["header"], arrays

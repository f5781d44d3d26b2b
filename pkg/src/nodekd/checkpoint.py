"""Binary checkpoint format.

Layout (little-endian)::

    b"NODK"                      magic
    u32 version
    u32 n, n bytes               metadata, UTF-8 "key=value" lines (values are JSON)
    per parameter record:
        u32 n, n bytes           name (UTF-8)
        u32 rank, rank x u32     dims
        prod(dims) x f64         values, row-major

Metadata always carries ``kind`` (teacher/student), ``param_count`` and the
architecture hyperparameters; training metadata uses ``meta.`` keys.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .models import MODEL_KINDS

MAGIC = b"NODK"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class KindMismatchError(CheckpointError):
    pass


class ShapeTableError(CheckpointError):
    pass


def _encode_metadata(items: dict) -> bytes:
    lines = []
    for key, value in items.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"invalid metadata key {key!r}")
        lines.append(f"{key}={json.dumps(value, sort_keys=True)}")
    return "\n".join(lines).encode()


def _decode_metadata(blob: bytes) -> dict:
    out = {}
    for line in blob.decode().splitlines():
        key, _, value = line.partition("=")
        out[key] = json.loads(value)
    return out


def atomic_write_bytes(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path, metadata: dict | None = None):
    meta = {"kind": model.kind, "param_count": len(model.params)}
    meta.update({f"arch.{k}": v for k, v in model.hyperparameters().items()})
    meta.update({f"meta.{k}": v for k, v in (metadata or {}).items()})
    blob = _encode_metadata(meta)
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, value in model.params.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated checkpoint at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw (metadata, params) without constructing a model."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    try:
        meta = _decode_metadata(r.take(r.u32()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from None
    params = {}
    for _ in range(int(meta.get("param_count", -1))):
        name = r.take(r.u32()).decode()
        dims = [r.u32() for _ in range(r.u32())]
        count = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if "param_count" not in meta or r.pos != len(r.buf):
        raise CorruptCheckpointError(f"{path}: parameter records do not match metadata")
    return meta, params


def load_checkpoint(path, expected_kind: str | None = None):
    """Load a model; returns ``(model, training_metadata)``."""
    meta, params = read_checkpoint(path)
    kind = meta.get("kind")
    if kind not in MODEL_KINDS:
        raise CorruptCheckpointError(f"{path}: unknown model kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise KindMismatchError(f"{path}: holds a {kind} model, expected {expected_kind}")
    arch = {k[5:]: v for k, v in meta.items() if k.startswith("arch.")}
    model = MODEL_KINDS[kind](**arch)
    expected = model.param_shapes()
    actual = {k: v.shape for k, v in params.items()}
    if expected != actual:
        raise ShapeTableError(f"{path}: parameter shapes do not match the architecture")
    model.params = {k: params[k] for k in expected}
    return model, {k[5:]: v for k, v in meta.items() if k.startswith("meta.")}

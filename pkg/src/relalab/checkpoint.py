"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"RELACKPT"  u32 version  u32 meta_len  meta (UTF-8 JSON)  u32 n_records
    per record:  u32 name_len  name  u32 ndim  u64 * ndim dims  f64 * prod(dims) values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, Seq2SeqTransformer, param_shapes
from .tensor import Tensor

MAGIC = b"RELACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Mapping[str, np.ndarray | Tensor], path: str | Path,
                    meta: Mapping | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        nb = name.encode("utf-8")
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                   struct.pack(f"<{arr.ndim}Q", *arr.shape),
                   np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse the whole file; nothing is returned unless every record is intact."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad header (not a checkpoint or unsupported version)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt metadata") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return params, meta


def save_model(model: Seq2SeqTransformer, path: str | Path, extra_meta: Mapping | None = None) -> None:
    meta = {"model_config": model.config.to_dict(), **dict(extra_meta or {})}
    save_checkpoint(model.params, path, meta)


def load_model(path: str | Path) -> Seq2SeqTransformer:
    params, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: no model_config in metadata")
    cfg = ModelConfig.from_dict(meta["model_config"])
    missing = [n for n in param_shapes(cfg) if n not in params]
    if missing:
        raise CheckpointError(f"{path}: missing tensors: {', '.join(missing)}")
    return Seq2SeqTransformer(cfg, {n: Tensor(params[n], requires_grad=True, name=n)
                                    for n in param_shapes(cfg)})

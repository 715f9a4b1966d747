"""BRN1 checkpoint files.

Layout (little-endian)::

    b"BRN1" | u32 version | u32 len + UTF-8 JSON config | u32 n_tensors
    then per tensor: u16 len + UTF-8 name | u8 ndim | u32 dims[ndim] | f32 data
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np

from ._io import atomic_write
from .exceptions import CheckpointError, ConfigError
from .model import BandRouteNet, ModelConfig

__all__ = ["save_checkpoint", "load_checkpoint", "load_model", "MAGIC", "VERSION"]

MAGIC = b"BRN1"
VERSION = 1


def save_checkpoint(params, config: ModelConfig, path, extra: dict = None) -> None:
    """Write named parameters (a model or an ordered name->array mapping)."""
    if isinstance(params, BandRouteNet):
        params = params.state_dict()
    blob = {"model": config.to_dict()}
    if extra:
        blob["extra"] = extra
    cfg_bytes = json.dumps(blob, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with atomic_write(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", ModelConfig, dict]:
    """Return (params, config, extra); raises CheckpointError on any defect."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a BRN1 checkpoint (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        blob = json.loads(r.take(cfg_len).decode("utf-8"))
        config = ModelConfig.from_dict(blob["model"])
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: unreadable config block ({e})") from None
    (count,) = r.unpack("<I")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        params[name] = data.astype(np.float32)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes after last tensor")
    _validate(params, config, path)
    return params, config, blob.get("extra", {})


def _validate(params: Dict[str, np.ndarray], config: ModelConfig, path) -> None:
    expected = BandRouteNet(config).named_parameters()
    expected = OrderedDict((n, p.shape) for n, p in expected)
    missing = [n for n in expected if n not in params]
    extra = [n for n in params if n not in expected]
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names differ from config (missing {missing[:3]}, extra {extra[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(
                f"{path}: shape mismatch for parameter {name!r}: file has {params[name].shape}, "
                f"config implies {shape}"
            )


def load_model(path) -> BandRouteNet:
    params, config, _ = load_checkpoint(path)
    model = BandRouteNet(config)
    model.load_state_dict(params)
    return model

"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DMSM"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (utf-8), u8 dtype code, u8 rank, u32 dims[rank], payload
    u32 json_len, config JSON (utf-8)

Payloads are raw little-endian element bytes in C order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import DiMSUM, ModelConfig

MAGIC = b"DMSM"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
        if dt not in _CODE_OF:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _CODE_OF[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    text = json.dumps(config, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(text)) + text)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads version {VERSION}")
    tensors = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(n, f"name of tensor {i}").decode("utf-8")
        code, rank = r.unpack("<BB", f"header of {name!r}")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        dt = DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(r.take(nbytes, f"payload of {name!r}"), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="))
    (n,) = r.unpack("<I", "config length")
    config = json.loads(r.take(n, "config").decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after config")
    return tensors, config


def save_checkpoint(model: DiMSUM, path, meta: dict | None = None) -> None:
    config = {"model": model.cfg.to_dict(), "meta": meta or {}}
    Path(path).write_bytes(encode(model.state_dict(), config))


def config_diff(a: dict, b: dict) -> list[str]:
    return sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))


def load_state(model: DiMSUM, tensors: dict[str, np.ndarray], stored_cfg: dict | None = None) -> None:
    """Copy ``tensors`` into ``model``; every name and shape must match."""
    params = dict(model.named_parameters())
    hint = ""
    if stored_cfg is not None:
        diff = config_diff(stored_cfg, model.cfg.to_dict())
        hint = f"; config differs in: {', '.join(diff)}" if diff else ""
    for name, arr in tensors.items():
        if name not in params:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint{hint}")
        if params[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} "
                                  f"!= model shape {params[name].shape}{hint}")
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing)}{hint}")
    if hint:
        raise CheckpointError(hint[2:])
    for name, arr in tensors.items():
        params[name].data = arr.astype(arr.dtype, copy=True)


def load_checkpoint(path, model: DiMSUM | None = None) -> tuple[DiMSUM, dict]:
    """Returns ``(model, meta)``; builds the model from the stored config when none is given."""
    tensors, config = decode(Path(path).read_bytes())
    if model is None:
        model = DiMSUM(ModelConfig(**config["model"]))
    load_state(model, tensors, config["model"])
    return model, config.get("meta", {})

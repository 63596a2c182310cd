"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CTCP" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
    | blob section (f32 arrays in manifest order) | u32 CRC-32 of the blob section

The metadata document carries the run config, class names, vocabulary, the
manifest (name, kind, shape, dtype, nbytes, trainable) and optimizer info.
Batch-norm buffers and, optionally, Adam moments are stored as extra manifest
entries of kind ``buffer`` / ``adam_m`` / ``adam_v``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import FormatError
from .model import CTClip
from .params import ModelParams
from .training import OptimizerState

MAGIC = b"CTCP"
VERSION = 1
_F32 = np.dtype("<f4")
_I64 = np.dtype("<i8")


def _entry(name, kind, arr, trainable=False):
    dtype = _I64 if np.issubdtype(arr.dtype, np.integer) else _F32
    return {"name": name, "kind": kind, "shape": list(arr.shape), "dtype": dtype.str,
            "nbytes": int(arr.size * dtype.itemsize), "trainable": bool(trainable)}, \
        np.ascontiguousarray(arr, dtype=dtype).tobytes()


def save_checkpoint(model: CTClip, path, cfg: RunConfig, state: OptimizerState | None = None) -> None:
    manifest, blobs = [], []
    for name, t in model.params.items():
        e, b = _entry(name, "param", t.data, t.requires_grad)
        manifest.append(e)
        blobs.append(b)
    for name, arr in model.params.buffers.items():
        e, b = _entry(name, "buffer", arr)
        manifest.append(e)
        blobs.append(b)
    if state is not None:
        for kind, table in (("adam_m", state.m), ("adam_v", state.v)):
            for name, arr in table.items():
                e, b = _entry(name, kind, arr)
                manifest.append(e)
                blobs.append(b)
    meta = {
        "config": cfg.to_dict(),
        "class_names": model.class_names,
        "vocab": model.vocab,
        "param_dtype": model.params.dtype.name,
        "manifest": manifest,
        "optimizer": {"present": state is not None, "step": state.step if state else 0},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def read_checkpoint(path):
    """Validate and split a checkpoint into (metadata, {(kind, name): array})."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("magic", f"{path} is not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError("version", f"unsupported checkpoint version {version}")
    start = 12 + meta_len
    if len(buf) < start:
        raise FormatError("length", "file ends inside the metadata document")
    try:
        meta = json.loads(buf[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("metadata", f"metadata document is unreadable: {exc}") from None
    expected = sum(e["nbytes"] for e in meta["manifest"])
    blob = buf[start:-4] if len(buf) >= start + 4 else b""
    if len(buf) != start + expected + 4:
        raise FormatError("length", f"blob section is {len(buf) - start - 4} bytes, "
                                    f"manifest expects {expected}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise FormatError("crc", "blob section CRC mismatch")
    arrays, offset = {}, 0
    for e in meta["manifest"]:
        dtype = np.dtype(e["dtype"])
        arr = np.frombuffer(blob, dtype=dtype, count=e["nbytes"] // dtype.itemsize, offset=offset)
        arrays[(e["kind"], e["name"])] = arr.reshape(e["shape"]).copy()
        offset += e["nbytes"]
    return meta, arrays


def load_checkpoint(path):
    """Returns ``(model, optimizer state or None, RunConfig)``.

    Parameters come back as float32 (the storage precision).
    """
    meta, arrays = read_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"], strict=False)
    params = ModelParams(np.float32)
    for e in meta["manifest"]:
        key = (e["kind"], e["name"])
        if e["kind"] == "param":
            params.add(e["name"], arrays[key], trainable=e["trainable"])
        elif e["kind"] == "buffer":
            params.add_buffer(e["name"], arrays[key])
    model = CTClip(cfg.model, cfg.toggles, meta["class_names"], cfg.template,
                   params=params, vocab=meta["vocab"])
    state = None
    if meta["optimizer"]["present"]:
        state = OptimizerState(step=meta["optimizer"]["step"])
        for (kind, name), arr in arrays.items():
            if kind == "adam_m":
                state.m[name] = arr
            elif kind == "adam_v":
                state.v[name] = arr
    return model, state, cfg

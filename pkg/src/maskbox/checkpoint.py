"""Checkpoint container: parameters, optimizer moments, step, RNG state.

Binary layout (little-endian): magic "MDC1"; version u16; the full run
config echoed as u32-length-prefixed text; entry count u32; per entry
{name u16-length-prefixed utf-8, rank u8, extents u32 each, float32 data};
step counter u64; RNG state as u32-length-prefixed JSON. Model parameters
are stored under "param/<name>", optimizer moments under "adam_m/<name>"
and "adam_v/<name>". Loading a saved model reproduces its outputs bit for
bit (parameters train in float32, so the f32 table is exact).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, parse_config_text

MAGIC = b"MDC1"
VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: RunConfig
    arrays: dict          # name -> float32 ndarray
    step: int
    rng_state: dict


def _write_block(fh, raw: bytes):
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def save_checkpoint(path, cfg: RunConfig, model, step: int, rng_state: dict,
                    extra: dict | None = None):
    entries = {f"param/{k}": p.data for k, p in model.parameters().items()}
    entries.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        _write_block(fh, cfg.to_text().encode())
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<Q", step))
        _write_block(fh, json.dumps(rng_state, sort_keys=True).encode())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError("bad magic; not a checkpoint")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config"))
        cfg = parse_config_text(_read_exact(fh, clen, "config").decode())
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name"))
            name = _read_exact(fh, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{ndim}I",
                                  _read_exact(fh, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * size, name),
                                 dtype="<f4").reshape(shape).copy()
            arrays[name] = data
        (step,) = struct.unpack("<Q", _read_exact(fh, 8, "step"))
        (rlen,) = struct.unpack("<I", _read_exact(fh, 4, "rng state"))
        rng_state = json.loads(_read_exact(fh, rlen, "rng state"))
        return Checkpoint(cfg, arrays, step, rng_state)


def restore_model(ckpt: Checkpoint):
    """Build the model from the echoed config and load its parameters."""
    from .model import Model

    model = Model(ckpt.cfg, np.random.default_rng(ckpt.cfg.seed))
    params = model.parameters()
    missing = [k for k in params if f"param/{k}" not in ckpt.arrays]
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {missing[:3]}...")
    for name, p in params.items():
        arr = ckpt.arrays[f"param/{name}"]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(f"shape mismatch for {name}: "
                              f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return model

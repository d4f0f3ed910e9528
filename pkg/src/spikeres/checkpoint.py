"""Binary checkpoint: network description, weights, BN buffers, optimiser and RNG state.

Layout (little-endian throughout)::

    b"SPKR" | u32 version | u32 len + spec JSON | u32 epoch
    | tensor table: parameters | tensor table: running stats | tensor table: momentum
    | u32 len + RNG state JSON | u32 len + metadata JSON

A tensor table is ``u32 count`` followed by, per tensor, ``u32 name length``,
the UTF-8 name, ``u32 ndim``, ``ndim x u32`` extents and the f32 payload.
Parameters appear in model iteration order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import Model, NetworkSpec, build_network

MAGIC = b"SPKR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(fh, v: int):
    fh.write(struct.pack("<I", v))


def _blob(fh, data: bytes):
    _u32(fh, len(data))
    fh.write(data)


def _table(fh, items: list):
    _u32(fh, len(items))
    for name, arr in items:
        a = np.ascontiguousarray(arr, dtype="<f4")
        _blob(fh, name.encode())
        _u32(fh, a.ndim)
        for d in a.shape:
            _u32(fh, d)
        fh.write(a.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def table(self) -> dict:
        out = {}
        for _ in range(self.u32()):
            name = self.blob().decode()
            shape = tuple(self.u32() for _ in range(self.u32()))
            n = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        return out


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    buffers: dict
    optimizer: dict
    epoch: int
    rng_state: Optional[dict]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def save_checkpoint(path, model: Model, optimizer=None, epoch: int = 0,
                    rng: Optional[np.random.Generator] = None, meta: Optional[dict] = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    _blob(buf, json.dumps(model.spec.to_dict(), sort_keys=True).encode())
    _u32(buf, epoch)
    _table(buf, [(n, p.data) for n, p in model.named_parameters()])
    _table(buf, model.buffers())
    _table(buf, sorted((optimizer.state() if optimizer is not None else {}).items()))
    state = rng.bit_generator.state if rng is not None else None
    _blob(buf, json.dumps(state).encode())
    meta = dict(meta or {})
    meta.setdefault("bn_updates", min((bn.updates for bn in model.bns()), default=0))
    meta.setdefault("gamma2_zero", model.gamma2_zero)
    _blob(buf, json.dumps(meta, sort_keys=True, default=str).encode())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    spec = NetworkSpec.from_dict(json.loads(r.blob()))
    epoch = r.u32()
    params = r.table()
    buffers = r.table()
    opt = r.table()
    rng_state = json.loads(r.blob())
    meta = json.loads(r.blob())
    return Checkpoint(spec, params, buffers, opt, epoch, rng_state, meta, version)


def restore_model(ck: Checkpoint, spec: Optional[NetworkSpec] = None) -> Model:
    """Rebuild the network (optionally with a different T) and load its state."""
    model = build_network(spec or ck.spec, seed=None)
    named = model.named_parameters()
    names = [n for n, _ in named]
    if set(names) != set(ck.params):
        raise CheckpointError("checkpoint parameters do not match the network layout")
    for n, p in named:
        if ck.params[n].shape != p.shape:
            raise CheckpointError(f"{n}: shape {ck.params[n].shape} != {p.shape}")
        p.data = ck.params[n].copy()
    model.load_buffers(ck.buffers, updates=int(ck.meta.get("bn_updates", 1)))
    model.gamma2_zero = ck.meta.get("gamma2_zero")
    return model

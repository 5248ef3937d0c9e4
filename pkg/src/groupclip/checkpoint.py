"""Versioned binary checkpoints of a ``TrainState``.

Layout (all integers unsigned little-endian, all reals little-endian f64)::

    magic      4 bytes  b"GCKP"
    version    u32      currently 1
    step       u64
    n_layers   u32
      per layer: kind u8 (0 linear, 1 relu, 2 tanh);
                 linear only: out u32, in u32, W f64[out*in] row-major, b f64[out]
    n_groups   u32
      per group: n u32, linear indices u32[n]
    n_moment_sets u32
      per set, per group: length u64, values f64[length]
    has_estimators u8
      if 1: n u32, per estimator: C, q, eta, sigma_b, batch_size (5 x f64)
    rng (PCG64): state u128 as (lo u64, hi u64), inc u128 as (lo u64, hi u64),
                 has_uint32 u8, uinteger u32

The noise log is diagnostic and not stored.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import Activation, Linear, Model
from .optim import TrainState
from .quantile import QuantileEstimator

MAGIC = b"GCKP"
VERSION = 1
_KINDS = {"relu": 1, "tanh": 2}
_MASK64 = (1 << 64) - 1


def _u128(buf: io.BytesIO, value: int) -> None:
    buf.write(struct.pack("<QQ", value & _MASK64, value >> 64))


def dumps(state: TrainState) -> bytes:
    bitgen = state.rng.bit_generator
    rs = bitgen.state
    if rs["bit_generator"] != "PCG64":
        raise FormatError(f"only PCG64 generators can be checkpointed, got {rs['bit_generator']}")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", VERSION, state.step))
    model = state.model
    out.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        if isinstance(layer, Linear):
            out.write(struct.pack("<BII", 0, layer.out_features, layer.in_features))
            out.write(layer.W.astype("<f8").tobytes())
            out.write(layer.b.astype("<f8").tobytes())
        else:
            out.write(struct.pack("<B", _KINDS[layer.kind]))
    out.write(struct.pack("<I", len(model.groups)))
    for g in model.groups:
        out.write(struct.pack(f"<I{len(g)}I", len(g), *g))
    out.write(struct.pack("<I", len(state.moments)))
    for mset in state.moments:
        for arr in mset:
            out.write(struct.pack("<Q", arr.size))
            out.write(arr.astype("<f8").tobytes())
    if state.estimators is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<BI", 1, len(state.estimators)))
        for e in state.estimators:
            out.write(struct.pack("<5d", e.C, e.q, e.eta, e.sigma_b, e.batch_size))
    _u128(out, rs["state"]["state"])
    _u128(out, rs["state"]["inc"])
    out.write(struct.pack("<BI", rs["has_uint32"], rs["uinteger"]))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated checkpoint", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def floats(self, n: int) -> np.ndarray:
        if self.pos + 8 * n > len(self.data):
            raise FormatError("truncated checkpoint", self.pos)
        arr = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return arr


def loads(data: bytes) -> TrainState:
    r = _Reader(data)
    (magic,) = r.take("<4s")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    version, step = r.take("<IQ")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n_layers,) = r.take("<I")
    layers = []
    kinds = {v: k for k, v in _KINDS.items()}
    for _ in range(n_layers):
        (kind,) = r.take("<B")
        if kind == 0:
            n_out, n_in = r.take("<II")
            W = r.floats(n_out * n_in).reshape(n_out, n_in)
            layers.append(Linear(W, r.floats(n_out)))
        elif kind in kinds:
            layers.append(Activation(kinds[kind]))
        else:
            raise FormatError(f"unknown layer kind {kind}", r.pos - 1)
    (n_groups,) = r.take("<I")
    groups = []
    for _ in range(n_groups):
        (n,) = r.take("<I")
        groups.append(tuple(r.take(f"<{n}I")))
    model = Model(layers, groups)
    (n_sets,) = r.take("<I")
    moments = []
    for _ in range(n_sets):
        mset = []
        for _ in range(n_groups):
            (n,) = r.take("<Q")
            mset.append(r.floats(n))
        moments.append(mset)
    (has_est,) = r.take("<B")
    estimators = None
    if has_est:
        (n,) = r.take("<I")
        estimators = [QuantileEstimator(*r.take("<5d")) for _ in range(n)]
    s_lo, s_hi, i_lo, i_hi = r.take("<QQQQ")
    has_u32, uint = r.take("<BI")
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    bitgen = np.random.PCG64()
    bitgen.state = {"bit_generator": "PCG64", "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
                    "has_uint32": has_u32, "uinteger": uint}
    return TrainState(model, np.random.Generator(bitgen), step, moments, estimators)


def save(state: TrainState, path: str | Path) -> None:
    Path(path).write_bytes(dumps(state))


def load(path: str | Path) -> TrainState:
    return loads(Path(path).read_bytes())

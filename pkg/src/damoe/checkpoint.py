"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DAMO"  u32 version
    u32 n    n bytes UTF-8 key=value model config
    u32 n    n bytes UTF-8 key=value metadata (tokenizer, rng state, ...)
    u32 count, then per parameter:
        u32 n, n bytes UTF-8 name, u32 rank, rank x u32 extents, float32 data
    u32 count of optimiser tensors; if non-zero: u64 step, then tensors as above
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, format_kv, parse_kv
from .exceptions import CheckpointError, ConfigError
from .model import DAMoEModel, parameter_shapes
from .numerics import AdamState

MAGIC = b"DAMO"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: OrderedDict
    meta: dict = field(default_factory=dict)
    optimizer: AdamState | None = None

    def build_model(self):
        model = DAMoEModel(self.config, self.params)
        model.meta = dict(self.meta)
        return model

    @property
    def rng_state(self):
        raw = self.meta.get("rng_state")
        return json.loads(raw) if raw else None


def _write_block(buf, text):
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_tensor(buf, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    _write_block(buf, name)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def encode_checkpoint(config, params, meta=None, optimizer=None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_block(buf, config.to_kv())
    meta = meta or {}
    _write_block(buf, format_kv((k, meta[k]) for k in sorted(meta)))
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        _write_tensor(buf, name, getattr(arr, "data", arr))
    if optimizer is None or not optimizer.m:
        buf.write(struct.pack("<I", 0))
    else:
        names = list(optimizer.m)
        buf.write(struct.pack("<I", 2 * len(names)))
        buf.write(struct.pack("<Q", optimizer.step))
        for name in names:
            _write_tensor(buf, "m." + name, optimizer.m[name])
        for name in names:
            _write_tensor(buf, "v." + name, optimizer.v[name])
    return buf.getvalue()


def save_checkpoint(model, path, meta=None, optimizer=None):
    """Write ``model`` (config + parameters) and optional metadata/optimiser state."""
    if meta is None:
        meta = getattr(model, "meta", None)
    data = encode_checkpoint(model.config, model.state_arrays(), meta, optimizer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("checkpoint text block is not UTF-8") from exc

    def tensor(self):
        name = self.text()
        (rank,) = self.unpack("<I")
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        shape = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, arr


def decode_checkpoint(data):
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        config = ModelConfig.from_kv(reader.text())
        meta = parse_kv(reader.text())
    except ConfigError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    expected = parameter_shapes(config)
    (count,) = reader.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} parameters, config implies {len(expected)}")
    params = OrderedDict()
    for want_name, want_shape in expected.items():
        name, arr = reader.tensor()
        if name != want_name:
            raise CheckpointError(f"parameter order mismatch: found {name!r}, expected {want_name!r}")
        if arr.shape != want_shape:
            raise CheckpointError(f"shape mismatch for {name}: file has {arr.shape}, config implies {want_shape}")
        params[name] = arr.copy()
    (n_opt,) = reader.unpack("<I")
    optimizer = None
    if n_opt:
        if n_opt % 2:
            raise CheckpointError("optimiser section is corrupt")
        (step,) = reader.unpack("<Q")
        optimizer = AdamState(step=int(step))
        for i in range(n_opt):
            name, arr = reader.tensor()
            kind, _, pname = name.partition(".")
            if kind not in ("m", "v") or pname not in expected or arr.shape != expected[pname]:
                raise CheckpointError(f"optimiser tensor {name!r} does not match the model")
            getattr(optimizer, kind)[pname] = arr.copy()
    if reader.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config=config, params=params, meta=meta, optimizer=optimizer)


def read_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


def load_checkpoint(path):
    """Model rebuilt from ``path``; file metadata is available as ``model.meta``."""
    return read_checkpoint(path).build_model()


def rng_state_json(rng):
    return json.dumps(rng.bit_generator.state, sort_keys=True, separators=(",", ":"))

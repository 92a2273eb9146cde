"""Binary checkpoint format.

Layout::

    b"ANCT" | u32 version | u64 header length | UTF-8 JSON header | payload

The header holds the model config, attribute scales, optional intensity
stats and a manifest of ``{name, shape, offset}`` entries; offsets are byte
offsets into the payload of little-endian float32 arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attributes import ATTRIBUTES
from .autodiff import Param, Tensor
from .model import Model, ModelConfig, param_layout

MAGIC = b"ANCT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    stats: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def save_checkpoint(path, model: Model, stats: dict | None = None, extra: dict | None = None) -> None:
    """Write ``model`` with its parameters cast to float32."""
    manifest = []
    chunks = []
    offset = 0
    for name, p in model.params.items():
        buf = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "config": model.config.to_dict(),
        "attributes": [
            {"name": a.name, "scale_min": a.scale_min, "scale_max": a.scale_max} for a in ATTRIBUTES
        ],
        "stats": stats,
        "params": manifest,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["params"]
        payload_bytes = int(header["payload_bytes"])
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = raw[start + hlen :]
    if len(payload) != payload_bytes:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header says {payload_bytes}")

    expected = {name: shape for name, shape, _ in param_layout(config)}
    params: dict[str, Param] = {}
    for entry in manifest:
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has unexpected shape {shape}")
        n = int(np.prod(shape)) * 4
        if off < 0 or off + n > len(payload):
            raise CheckpointError(f"{path}: parameter {name!r} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=off).reshape(shape)
        params[name] = Param(name, Tensor(arr.astype(np.float32), requires_grad=True))
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    # Keep the canonical draw order regardless of manifest order.
    params = {name: params[name] for name in expected}
    return Checkpoint(Model(config, params), header.get("stats"), header.get("extra") or {})

"""Binary checkpoint format, version 1.

Layout::

    b"JTOKLAB\\0"                 8-byte magic
    uint32 LE                     format version
    uint64 LE                     header length in bytes
    header                        UTF-8 JSON, keys sorted
    payload                       float64 little-endian, row-major, concatenated

The header holds ``config`` (the model config as a dict) and ``tensors``, a
list of entries with ``name``, ``shape``, ``offset`` and ``count`` (elements
from the payload start).  Token-indexed tables carry extra keys: a JTok table
records ``layer``, ``V`` and ``d``; each JTok-M pool is split into one entry
per expert table with ``layer``, ``expert``, ``V`` and ``d``.  The router
entry records ``layer``, ``d`` and ``n_e``.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .numerics import Tensor

MAGIC = b"JTOKLAB\0"
VERSION = 1
_LAYER = re.compile(r"^l(\d+)\.")


class CheckpointError(ValueError):
    pass


def _entries(params: dict[str, Tensor]):
    for name in sorted(params):
        arr = np.asarray(params[name].data, dtype=np.float64)
        m = _LAYER.match(name)
        layer = int(m.group(1)) if m else None
        if name.endswith("jtokm_pool"):
            n_e, v, d = arr.shape
            for e in range(n_e):
                yield {"name": name, "layer": layer, "expert": e, "V": v, "d": d}, arr[e]
        elif name.endswith("jtok_table"):
            v, d = arr.shape
            yield {"name": name, "layer": layer, "V": v, "d": d}, arr
        elif name.endswith("jtokm_router"):
            d, n_e = arr.shape
            yield {"name": name, "layer": layer, "d": d, "n_e": n_e}, arr
        else:
            yield {"name": name}, arr


def dumps(params: dict[str, Tensor], config: dict | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for meta, arr in _entries(params):
        meta = dict(meta, shape=list(arr.shape), offset=offset, count=int(arr.size))
        tensors.append(meta)
        chunks.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
        offset += arr.size
    header = json.dumps({"config": config or {}, "tensors": tensors}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, Tensor], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a jtoklab checkpoint")
    if len(blob) < 20:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode())
    payload = np.frombuffer(blob, dtype="<f8", offset=20 + hlen)
    pieces: dict[str, list] = {}
    for t in header["tensors"]:
        if t["offset"] + t["count"] > payload.size:
            raise CheckpointError(f"payload too short for {t['name']}")
        arr = payload[t["offset"]:t["offset"] + t["count"]].astype(np.float64).reshape(t["shape"])
        pieces.setdefault(t["name"], []).append((t.get("expert", 0), arr))
    params = {}
    for name, parts in pieces.items():
        if name.endswith("jtokm_pool"):
            parts.sort(key=lambda p: p[0])
            if [p[0] for p in parts] != list(range(len(parts))):
                raise CheckpointError(f"{name}: missing expert tables")
            data = np.stack([p[1] for p in parts])
        else:
            data = parts[0][1]
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params, header["config"]


def save(path, params: dict[str, Tensor], config: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, config))


def load(path) -> tuple[dict[str, Tensor], dict]:
    return loads(Path(path).read_bytes())

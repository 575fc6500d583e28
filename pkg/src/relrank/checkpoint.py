"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RRNK" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The header holds the network configuration, the training configuration,
the RGB mean of the training set and a directory of tensors
(name, shape, byte offset into the payload). Tensors are stored as
little-endian float32 in directory order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .network import SiameseRanker

MAGIC = b"RRNK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(ranker: SiameseRanker, train_config: Optional[dict], rgb_mean, path: Union[str, Path],
                    extra: Optional[dict] = None) -> None:
    params = ranker.parameters()
    directory, offset = [], 0
    for name, t in params.items():
        nbytes = t.data.size * 4
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += nbytes
    header = {
        "network": ranker.config_dict(),
        "train": train_config or {},
        "rgb_mean": [float(v) for v in rgb_mean],
        "tensors": directory,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, Path]) -> tuple[SiameseRanker, dict]:
    """Return the ranker and the decoded header (configs, ``rgb_mean``, extras)."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
        ranker = SiameseRanker.from_config_dict(header["network"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header ({exc})") from exc
    params = ranker.parameters()
    if [e["name"] for e in entries] != list(params):
        raise CheckpointFormatError(f"{path}: tensor directory does not match the network")
    payload = memoryview(raw)[start:]
    loaded = {}
    for e in entries:
        t = params[e["name"]]
        if tuple(e["shape"]) != t.shape:
            raise CheckpointFormatError(f"{path}: {e['name']} has shape {e['shape']}, expected {list(t.shape)}")
        n = int(np.prod(t.shape)) * 4
        if e["offset"] + n > len(payload):
            raise CheckpointFormatError(f"{path}: truncated tensor payload at {e['name']}")
        loaded[e["name"]] = np.frombuffer(payload[e["offset"] : e["offset"] + n], dtype="<f4").reshape(t.shape)
    for name, arr in loaded.items():
        params[name].data[...] = arr
    return ranker, header

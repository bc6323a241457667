"""Binary parameter checkpoints.

Layout: 8-byte magic ``RDCKPT01``, a little-endian uint64 header length, a
UTF-8 JSON header, then the raw little-endian float64 data of every parameter
concatenated in header order. The header carries an ordered parameter
manifest (name + shape) and an arbitrary JSON metadata object (the resolved
model configuration). Round-trips are value-exact: the bytes written are the
IEEE-754 bytes of the arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"RDCKPT01"


def save_checkpoint(path: str | Path, params: dict[str, Tensor],
                    metadata: dict) -> None:
    """Write named parameters plus a JSON metadata object to one file."""
    manifest = [{"name": name, "shape": list(t.data.shape)}
                for name, t in params.items()]
    header = json.dumps({"metadata": metadata, "params": manifest},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint; returns (params, metadata).

    Every loaded parameter has requires_grad=True. Truncated files, bad magic
    and shape/byte-count mismatches raise ValueError.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    offset = 16 + hlen
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint data")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params[entry["name"]] = Tensor(arr.reshape(shape).astype(np.float64),
                                       requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after checkpoint data")
    return params, header["metadata"]

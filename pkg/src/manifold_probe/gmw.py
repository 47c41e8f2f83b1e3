"""``.gmw`` weight files.

Layout: the 8-byte magic ``GMWv0001``, a little-endian u64 header length,
the UTF-8 JSON header, then the tensors as raw little-endian f64 in the
order of the header's tensor directory.  Offsets in the directory are
relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import WeightStore
from .errors import FormatError
from .generators import GeneratorSpec, tensor_order

MAGIC = b"GMWv0001"
_LEN = struct.Struct("<Q")


def dumps(spec: GeneratorSpec, weights: WeightStore, seeds: dict | None = None,
          meta: dict | None = None) -> bytes:
    names = sorted(weights, key=tensor_order)
    directory, offset = [], 0
    for name in names:
        arr = weights[name]
        nbytes = arr.size * 8
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "nbytes": nbytes})
        offset += nbytes
    header = {"format": "gmw", "version": 1, "dtype": "<f8", "spec": spec.to_dict(),
              "seeds": dict(seeds or {"init": spec.seed}), "meta": dict(meta or {}),
              "tensors": directory}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _LEN.pack(len(head)), head]
    parts += [np.ascontiguousarray(weights[n], dtype="<f8").tobytes() for n in names]
    return b"".join(parts)


def loads(data: bytes) -> tuple[GeneratorSpec, WeightStore, dict]:
    """Parse a weight file; returns ``(spec, weights, header)``."""
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError("not a .gmw file (bad magic)")
    (hlen,) = _LEN.unpack_from(data, 8)
    start = 16 + hlen
    if start > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[16:start].decode("utf-8"))
        spec = GeneratorSpec.from_dict(header["spec"])
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    payload = memoryview(data)[start:]
    tensors = {}
    for entry in directory:
        shape = tuple(entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)) or off < 0 or off + nbytes > len(payload):
            raise FormatError(f"tensor {entry['name']!r} out of bounds")
        tensors[entry["name"]] = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape)
    return spec, WeightStore(tensors), header


def save(path, spec: GeneratorSpec, weights: WeightStore, seeds: dict | None = None,
         meta: dict | None = None) -> bytes:
    data = dumps(spec, weights, seeds, meta)
    Path(path).write_bytes(data)
    return data


def load(path) -> tuple[GeneratorSpec, WeightStore, dict]:
    return loads(Path(path).read_bytes())

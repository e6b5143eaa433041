"""Named parameter storage, initialization and the on-disk checkpoint format.

Checkpoint layout::

    8 bytes   magic  b"TSFNTCK1"
    8 bytes   little-endian uint64 header length N
    N bytes   UTF-8 JSON header {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    ...       raw little-endian arrays, offsets relative to the end of the header
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"TSFNTCK1"


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered name -> Tensor map; iteration order is insertion order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def add_uniform(self, name: str, shape, fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def num_elements(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in self._params.items()
        }

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items() if n.startswith(prefix))

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays in by name.  Shape mismatches are reported together."""
        problems = []
        for n, arr in state.items():
            if n not in self._params:
                if strict:
                    problems.append(f"unexpected {n}")
                continue
            if self._params[n].shape != tuple(arr.shape):
                problems.append(f"{n}: shape {tuple(arr.shape)} in checkpoint vs {self._params[n].shape} in model")
        if strict:
            problems += [f"missing {n}" for n in self._params if n not in state]
        if problems:
            raise CheckpointError("parameter mismatch: " + "; ".join(problems))
        for n, arr in state.items():
            if n in self._params:
                self._params[n].data = np.array(arr, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for n, p in self._params.items():
            out.add(n, p.data)
        return out


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_arrays(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(buf[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return out, header["meta"]

"""Named parameter registry and the on-disk weight format.

Weight file layout::

    b"SCENEGEN"                 8-byte magic
    u32 little-endian           format version (1)
    u32 little-endian           header length in bytes
    JSON header                 {"config": {...}, "tensors": {name: {"shape", "dtype", "offset"}}}
    payload                     little-endian float32 tensors, concatenated
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import Tensor

MAGIC = b"SCENEGEN"
VERSION = 1


class WeightFormatError(ValueError):
    pass


class ModelParams:
    """An ordered, closed set of named trainable tensors."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, arr in (tensors or {}).items():
            self._t[name] = Tensor(np.array(arr), requires_grad=True, name=name)
        self._frozen = bool(tensors)

    def add(self, name: str, arr: np.ndarray) -> None:
        if self._frozen:
            raise KeyError("parameter registry is closed")
        if name in self._t:
            raise KeyError(f"duplicate parameter {name}")
        self._t[name] = Tensor(np.asarray(arr), requires_grad=True, name=name)

    def freeze(self) -> "ModelParams":
        self._frozen = True
        return self

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._t[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._t.items()}

    def grads(self) -> dict[str, np.ndarray | None]:
        return {n: t.grad for n, t in self._t.items()}

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: t.data.astype(dtype) for n, t in self._t.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({n: t.data.copy() for n, t in self._t.items()})

    @property
    def dtype(self):
        return next(iter(self._t.values())).data.dtype

    def num_values(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._t.values())


def save_weights(path, params: ModelParams, config: dict | None = None) -> None:
    tensors, offset, chunks = {}, 0, []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        tensors[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config or {}, "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_weights(path, dtype=np.float32) -> tuple[ModelParams, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise WeightFormatError("bad magic; not a SCENEGEN weight file")
    if len(blob) < 16:
        raise WeightFormatError("truncated header")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    try:
        header = json.loads(blob[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise WeightFormatError(f"corrupt header: {e}") from None
    payload = blob[16 + hlen:]
    expected = sum(4 * int(np.prod(m["shape"], dtype=np.int64)) for m in header["tensors"].values())
    if len(payload) != expected:
        raise WeightFormatError(f"payload is {len(payload)} bytes, header describes {expected}")
    arrays = {}
    for name, meta in header["tensors"].items():
        n = int(np.prod(meta["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=meta["offset"])
        arrays[name] = arr.reshape(meta["shape"]).astype(dtype)
    return ModelParams(arrays), header.get("config", {})

"""Named parameter arrays and the STCK checkpoint format."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .tensor import FormatError

STCK_MAGIC = b"STCK"
STCK_VERSION = 1


class ParameterStore:
    """Ordered mapping of unique names to learnable arrays.

    Arrays are wrapped as leaf ``Tensor`` objects so the model can read them
    directly; ``tensors()`` hands out the live leaves for the gradient tape.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._items: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=True, name=name)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self._items.items())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v.data) if v.grad is None else v.grad)
                           for k, v in self._items.items())

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.dtype)
        for k, v in self._items.items():
            out.add(k, v.data.copy())
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for k, v in self._items.items():
            out.add(k, v.data)
        return out

    def n_values(self) -> int:
        return int(sum(v.data.size for v in self._items.values()))

    def check_finite(self) -> None:
        for k, v in self._items.items():
            if not np.all(np.isfinite(v.data)):
                raise FloatingPointError(f"parameter {k!r} has non-finite entries")

    def equal(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


def checkpoint_bytes(store: ParameterStore) -> bytes:
    parts = [STCK_MAGIC, struct.pack("<II", STCK_VERSION, len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.data, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes, dtype=np.float64) -> ParameterStore:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated STCK checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != STCK_MAGIC:
        raise FormatError("bad STCK magic")
    version, count = struct.unpack("<II", take(8))
    if version != STCK_VERSION:
        raise FormatError(f"unsupported STCK version {version}")
    store = ParameterStore(dtype)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape)
        store.add(name, arr)
    if pos != len(view):
        raise FormatError("trailing bytes after STCK checkpoint")
    return store


def save_checkpoint(path, store: ParameterStore) -> None:
    Path(path).write_bytes(checkpoint_bytes(store))


def load_checkpoint(path, dtype=np.float64) -> ParameterStore:
    return checkpoint_from_bytes(Path(path).read_bytes(), dtype)

"""Behavior tensors, evidence masks, event histories and their file formats."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STBT_MAGIC = b"STBT"
STBT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_MAX_ELEMENTS = 1 << 31

DEFAULT_CHANNEL_ROLES = ("app-activity", "traffic-volume", "location-occupancy")


class ShapeError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BehaviorTensor:
    """Dense (C, T, H, W) behavior grid for one user."""

    values: np.ndarray
    channel_roles: tuple = DEFAULT_CHANNEL_ROLES

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 4 or min(v.shape) < 1:
            raise ShapeError(f"behavior tensor needs 4 positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("behavior tensor contains non-finite values")
        if len(self.channel_roles) != v.shape[0]:
            object.__setattr__(self, "channel_roles", tuple(f"channel-{i}" for i in range(v.shape[0])))
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BehaviorTensor):
            return NotImplemented
        return (self.values.shape == other.values.shape
                and self.values.dtype == other.values.dtype
                and self.values.tobytes() == other.values.tobytes())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class EvidenceMask:
    """Binary selection over (T, H, W) with aligned importance weights."""

    binary: np.ndarray
    weights: np.ndarray
    budget: int

    def __post_init__(self):
        b = np.asarray(self.binary).astype(np.uint8)
        w = np.asarray(self.weights, dtype=np.float64)
        if b.ndim != 3 or b.shape != w.shape:
            raise ShapeError(f"mask planes must be matching 3-D arrays, got {b.shape} and {w.shape}")
        if not np.all((b == 0) | (b == 1)):
            raise ValueError("binary plane must hold only 0/1")
        if int(b.sum()) != int(self.budget):
            raise ValueError(f"mask has {int(b.sum())} ones but budget is {self.budget}")
        if not np.array_equal(w > 0, b == 1):
            raise ValueError("weights must be positive exactly where binary is set")
        b.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "binary", b)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "budget", int(self.budget))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.binary.shape)

    @classmethod
    def full(cls, dims: tuple[int, int, int]) -> "EvidenceMask":
        n = int(np.prod(dims))
        return cls(np.ones(dims, np.uint8), np.full(dims, 1.0 / n), n)

    @classmethod
    def empty(cls, dims: tuple[int, int, int]) -> "EvidenceMask":
        return cls(np.zeros(dims, np.uint8), np.zeros(dims), 0)

    @classmethod
    def from_binary(cls, binary: np.ndarray) -> "EvidenceMask":
        """Mask whose weights spread uniformly over the selected coordinates."""
        b = np.asarray(binary).astype(np.uint8)
        return cls(b, b / b.size, int(b.sum()))


@dataclass(frozen=True)
class EventHistory:
    """Time-ordered (app, location, slot) events."""

    apps: np.ndarray
    locations: np.ndarray
    timestamps: np.ndarray
    n_apps: int
    n_locations: int

    def __post_init__(self):
        a = np.asarray(self.apps, dtype=np.int64)
        loc = np.asarray(self.locations, dtype=np.int64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if not (a.shape == loc.shape == ts.shape) or a.ndim != 1:
            raise ValueError("event columns must be equal-length vectors")
        if np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if a.size and (a.min() < 0 or a.max() >= self.n_apps):
            raise ValueError("app id outside vocabulary")
        if loc.size and (loc.min() < 0 or loc.max() >= self.n_locations):
            raise ValueError("location id outside vocabulary")
        for name, arr in (("apps", a), ("locations", loc), ("timestamps", ts)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.apps.size)

    @classmethod
    def from_events(cls, events, n_apps: int, n_locations: int) -> "EventHistory":
        events = list(events)
        if not events:
            z = np.zeros(0, np.int64)
            return cls(z, z, z, n_apps, n_locations)
        a, loc, ts = zip(*events)
        return cls(np.array(a), np.array(loc), np.array(ts), n_apps, n_locations)

    def events(self) -> list[tuple[int, int, int]]:
        return list(zip(self.apps.tolist(), self.locations.tolist(), self.timestamps.tolist()))

    def concat(self, other: "EventHistory") -> "EventHistory":
        ev = sorted(self.events() + other.events(), key=lambda e: e[2])
        return EventHistory.from_events(ev, self.n_apps, self.n_locations)


@dataclass(frozen=True)
class SyntheticUserProfile:
    home_cell: tuple[int, int]
    work_cell: tuple[int, int]
    commute_window: tuple[int, int]
    evening_window: tuple[int, int]
    app_preferences: np.ndarray
    regularity: float
    group: int = 0

    def __post_init__(self):
        prefs = np.asarray(self.app_preferences, dtype=np.float64)
        if abs(prefs.sum() - 1.0) > 1e-9 or np.any(prefs < 0):
            raise ValueError("app_preferences must be a probability vector")
        if not 0.0 <= self.regularity <= 1.0:
            raise ValueError("regularity must lie in [0, 1]")
        object.__setattr__(self, "app_preferences", prefs)


def apply_mask(x: BehaviorTensor, m: EvidenceMask) -> BehaviorTensor:
    """Zero every channel at unselected (t, h, w) coordinates."""
    if x.dims[1:] != m.dims:
        raise ShapeError(f"mask dims {m.dims} do not match tensor dims {x.dims[1:]}")
    out = x.values * m.binary[None].astype(x.values.dtype)
    return BehaviorTensor(out, x.channel_roles)


# STBT tensor files ----------------------------------------------------------

def tensor_to_bytes(x: BehaviorTensor | np.ndarray) -> bytes:
    values = x.values if isinstance(x, BehaviorTensor) else np.asarray(x)
    if values.ndim != 4:
        raise ShapeError("STBT stores 4-D arrays only")
    c, t, h, w = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return _HEADER.pack(STBT_MAGIC, STBT_VERSION, c, t, h, w) + payload


def tensor_from_bytes(buf: bytes) -> BehaviorTensor:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated STBT header")
    magic, version, c, t, h, w = _HEADER.unpack_from(buf)
    if magic != STBT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != STBT_VERSION:
        raise FormatError(f"unsupported STBT version {version}")
    if min(c, t, h, w) < 1:
        raise FormatError("STBT dims must be positive")
    n = c * t * h * w
    if n >= _MAX_ELEMENTS:
        raise FormatError("STBT dims overflow")
    if len(buf) - _HEADER.size != 4 * n:
        raise FormatError(f"payload is {len(buf) - _HEADER.size} bytes, header implies {4 * n}")
    values = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(c, t, h, w)
    return BehaviorTensor(values.astype(np.float32))


def write_tensor(path, x: BehaviorTensor | np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def read_tensor(path) -> BehaviorTensor:
    return tensor_from_bytes(Path(path).read_bytes())


def mask_to_tensor(m: EvidenceMask) -> np.ndarray:
    """Stack (binary, weight) into a C = 2 array for STBT export."""
    return np.stack([m.binary.astype(np.float32), m.weights.astype(np.float32)])


def write_mask_csv(path, m: EvidenceMask) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "h", "w", "binary", "weight"])
        for (t, h, w), b in np.ndenumerate(m.binary):
            wr.writerow([t, h, w, int(b), repr(float(m.weights[t, h, w]))])


# event history CSV ------------------------------------------------------------

def write_histories_csv(path, histories: dict) -> None:
    """Write ``{user_id: EventHistory}`` as user_id,app_id,location_id,timestamp rows."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["user_id", "app_id", "location_id", "timestamp"])
        for uid, hist in histories.items():
            for a, loc, ts in hist.events():
                wr.writerow([uid, a, loc, ts])


def read_histories_csv(path, n_apps: int, n_locations: int) -> dict:
    rows: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            uid = int(row["user_id"])
            rows.setdefault(uid, []).append(
                (int(row["app_id"]), int(row["location_id"]), int(row["timestamp"])))
    return {uid: EventHistory.from_events(sorted(ev, key=lambda e: e[2]), n_apps, n_locations)
            for uid, ev in rows.items()}

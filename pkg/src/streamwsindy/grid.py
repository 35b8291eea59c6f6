"""Uniform grids, snapshot fields, multi-indices and the bounded snapshot buffer.

Snapshots are row-major arrays with axis order (x1, ..., xd). Time is carried
as an integer step index ``k``; physical time is ``k * dt``.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Generic, Iterator, Optional, TypeVar

import numpy as np

AXIS_NAMES = ("x", "y", "z")


class StaleSnapshotError(ValueError):
    """Raised when a buffer push does not advance time."""


class SnapshotFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGrid:
    shape: tuple[int, ...]
    dx: float
    dt: float

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        object.__setattr__(self, "shape", shape)
        if not 1 <= len(shape) <= 3:
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {len(shape)}")
        if any(n < 3 for n in shape):
            raise ValueError(f"need at least 3 points per axis, got {shape}")
        if not (self.dx > 0 and self.dt > 0):
            raise ValueError("dx and dt must be positive")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def coords(self, axis: int, origin: float = 0.0) -> np.ndarray:
        return origin + self.dx * np.arange(self.shape[axis])


@dataclass(frozen=True)
class Field:
    """One solution snapshot at step ``k`` (time ``k * grid.dt``)."""

    grid: SpatialGrid
    values: np.ndarray
    k: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "k", int(self.k))

    @property
    def t(self) -> float:
        return self.k * self.grid.dt

    @property
    def timestamp(self) -> int:
        return self.k


@dataclass(frozen=True)
class MultiIndex:
    """Derivative orders per spatial axis plus the temporal order."""

    spatial: tuple[int, ...]
    temporal: int = 0

    def __post_init__(self):
        spatial = tuple(int(a) for a in self.spatial)
        object.__setattr__(self, "spatial", spatial)
        if any(a < 0 for a in spatial) or self.temporal < 0:
            raise ValueError("derivative orders must be non-negative")
        if sum(1 for a in spatial if a) > 1:
            raise ValueError("mixed spatial derivatives are not supported")

    @classmethod
    def along(cls, d: int, axis: int, order: int, temporal: int = 0) -> "MultiIndex":
        orders = [0] * d
        orders[axis] = order
        return cls(tuple(orders), temporal)

    @property
    def axis(self) -> int:
        """Axis carrying the derivative (0 when there is none)."""
        for i, a in enumerate(self.spatial):
            if a:
                return i
        return 0

    @property
    def order(self) -> int:
        return sum(self.spatial)


T = TypeVar("T")


class RingBuffer(Generic[T]):
    """Fixed-capacity FIFO of timestamped items, oldest first.

    Items must expose an integer ``timestamp``; pushes must strictly advance it.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._items: deque = deque(maxlen=self.capacity)

    def push(self, item: T) -> Optional[T]:
        if self._items and item.timestamp <= self._items[-1].timestamp:
            raise StaleSnapshotError(
                f"timestamp {item.timestamp} does not follow newest {self._items[-1].timestamp}"
            )
        evicted = self._items[0] if self.full else None
        self._items.append(item)
        return evicted

    @property
    def count(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.capacity

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[T]:
        return iter(self._items)

    def __getitem__(self, i: int) -> T:
        return self._items[i]

    @property
    def newest(self) -> Optional[T]:
        return self._items[-1] if self._items else None


def ring_push(buffer: RingBuffer[T], item: T) -> Optional[T]:
    return buffer.push(item)


def field_rms(f) -> float:
    values = f.values if isinstance(f, Field) else np.asarray(f)
    if values.size == 0:
        raise ValueError("rms of an empty field")
    return float(np.sqrt(np.mean(np.square(values))))


# --- snapshot files -------------------------------------------------------

MAGIC = b"WSNP"
# magic, d, 3 pad bytes, n1..n3, dx
_HEADER = struct.Struct("<4sB3x3Id")
HEADER_SIZE = _HEADER.size


def encode_snapshot(values: np.ndarray, dx: float) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8")
    d = values.ndim
    if not 1 <= d <= 3:
        raise ValueError("snapshot must have 1 to 3 dimensions")
    dims = list(values.shape) + [1] * (3 - d)
    return _HEADER.pack(MAGIC, d, *dims, float(dx)) + values.tobytes(order="C")


def decode_snapshot(buf: bytes) -> tuple[np.ndarray, float]:
    if len(buf) < HEADER_SIZE:
        raise SnapshotFormatError("truncated header")
    magic, d, n1, n2, n3, dx = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if not 1 <= d <= 3:
        raise SnapshotFormatError(f"bad dimension {d}")
    shape = (n1, n2, n3)[:d]
    count = int(np.prod(shape))
    body = buf[HEADER_SIZE:HEADER_SIZE + 8 * count]
    if len(body) != 8 * count:
        raise SnapshotFormatError("truncated body")
    values = np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)
    return values, dx


def write_snapshot(path, values: np.ndarray, dx: float) -> None:
    Path(path).write_bytes(encode_snapshot(values, dx))


def read_snapshot(path) -> tuple[np.ndarray, float]:
    return decode_snapshot(Path(path).read_bytes())


def snapshot_path(directory, k: int) -> Path:
    return Path(directory) / f"snap_{k}.bin"


def iter_snapshot_dir(directory, dt: float) -> Iterator[Field]:
    """Yield snapshots from ``snap_<k>.bin`` files in increasing ``k``."""
    paths = []
    for p in Path(directory).glob("snap_*.bin"):
        try:
            paths.append((int(p.stem.split("_", 1)[1]), p))
        except ValueError:
            continue
    paths.sort()
    grid = None
    for k, p in paths:
        values, dx = read_snapshot(p)
        if grid is None:
            grid = SpatialGrid(values.shape, dx, dt)
        yield Field(grid, values, k)


def iter_snapshot_stream(stream, dt: float) -> Iterator[Field]:
    """Yield snapshots concatenated on a binary stream, numbered from 0."""
    grid = None
    k = 0
    while True:
        head = stream.read(HEADER_SIZE)
        if not head:
            return
        _, d, n1, n2, n3, _ = _HEADER.unpack(head)
        count = int(np.prod((n1, n2, n3)[:d]))
        values, dx = decode_snapshot(head + stream.read(8 * count))
        if grid is None:
            grid = SpatialGrid(values.shape, dx, dt)
        yield Field(grid, values, k)
        k += 1

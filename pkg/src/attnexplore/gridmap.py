"""Occupancy grids, the noise-free lidar model and map files.

Ground truth cells are 0 (free) / 1 (obstacle). The robot's partial map
uses ``FREE``, ``OCCUPIED`` and ``UNKNOWN``. Cell ``(col, row)`` has its
center at the continuous point ``(col + 0.5, row + 0.5)``; the origin is
the top-left corner and arrays are indexed ``[row, col]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels as K
from ._kernels import FREE, OCCUPIED, UNKNOWN

__all__ = [
    "FREE",
    "OCCUPIED",
    "UNKNOWN",
    "GroundTruthMap",
    "PartialMap",
    "SensorConfig",
    "PreconditionError",
    "MapFormatError",
    "raycast",
    "sense_and_update",
    "traverse_and_sense",
    "sweep_points",
    "exploration_rate",
    "cell_of",
    "cell_center",
    "load_map",
    "save_map",
]

HIT_KINDS = {K.HIT_OBSTACLE: "obstacle", K.HIT_MAX_RANGE: "max_range", K.HIT_BOUNDARY: "boundary"}
EIGHT = np.ones((3, 3), dtype=bool)


class PreconditionError(ValueError):
    """An operation was called outside its documented domain."""


class MapFormatError(ValueError):
    pass


def cell_of(point) -> tuple[int, int]:
    return int(math.floor(point[0])), int(math.floor(point[1]))


def cell_center(col: int, row: int) -> tuple[float, float]:
    return col + 0.5, row + 0.5


@dataclass(frozen=True, eq=False)
class GroundTruthMap:
    """Immutable environment: obstacle grid plus designated start cell."""

    cells: np.ndarray
    start: tuple[int, int]
    tier: str = "custom"
    seed: int | None = None
    room_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2:
            raise ValueError("ground truth must be a 2D grid")
        if not np.isin(cells, (0, 1)).all():
            raise ValueError("ground truth cells must be 0 (free) or 1 (obstacle)")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)
        c, r = self.start
        if not (0 <= c < self.width and 0 <= r < self.height) or cells[r, c] != 0:
            raise ValueError(f"start cell {self.start} is not a free in-bounds cell")
        object.__setattr__(self, "start", (int(c), int(r)))

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def reachable(self) -> np.ndarray:
        """Free cells 8-connected to the start cell."""
        labels, _ = ndimage.label(self.cells == 0, structure=EIGHT)
        mask = labels == labels[self.start[1], self.start[0]]
        mask.flags.writeable = False
        return mask

    @cached_property
    def explorable(self) -> np.ndarray:
        """Reachable free cells plus the obstacles bounding them."""
        grown = ndimage.binary_dilation(self.reachable, structure=EIGHT)
        mask = self.reachable | (grown & (self.cells == 1))
        mask.flags.writeable = False
        return mask

    @cached_property
    def explorable_count(self) -> int:
        return int(self.explorable.sum())


@dataclass(eq=False)
class PartialMap:
    cells: np.ndarray

    @classmethod
    def unknown(cls, width: int, height: int) -> "PartialMap":
        return cls(np.full((height, width), UNKNOWN, dtype=np.int8))

    @classmethod
    def like(cls, truth: GroundTruthMap) -> "PartialMap":
        return cls.unknown(truth.width, truth.height)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def copy(self) -> "PartialMap":
        return PartialMap(self.cells.copy())

    @property
    def known(self) -> np.ndarray:
        return self.cells != UNKNOWN

    def is_free(self, point) -> bool:
        c, r = cell_of(point)
        return 0 <= c < self.width and 0 <= r < self.height and self.cells[r, c] == FREE


@dataclass(frozen=True)
class SensorConfig:
    range: float = 80.0
    ray_count: int = 360
    update_stride: float = 5.0

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("sensor range must be positive")
        if self.ray_count < 4:
            raise ValueError("ray_count must be at least 4")
        if not self.update_stride > 0:
            raise ValueError("update_stride must be positive")


def _check_origin(truth: GroundTruthMap, origin) -> None:
    x, y = float(origin[0]), float(origin[1])
    if not (0.0 <= x < truth.width and 0.0 <= y < truth.height):
        raise PreconditionError(f"origin {origin} outside the map")
    c, r = cell_of(origin)
    if truth.cells[r, c] != 0:
        raise PreconditionError(f"origin {origin} lies inside an obstacle")


def raycast(truth: GroundTruthMap, origin, angle: float, max_range: float):
    """Cells crossed by one ray, in order, and what stopped it.

    Returns ``(cells, kind)`` with ``cells`` a list of ``(col, row)`` and
    ``kind`` one of ``"obstacle"``, ``"max_range"``, ``"boundary"``. When
    the ray hits an obstacle that cell is last.
    """
    _check_origin(truth, origin)
    if max_range < 0:
        raise PreconditionError("range must be non-negative")
    size = 8 * int(max_range + 2) + 40
    oc = np.empty(size, np.int64)
    orr = np.empty(size, np.int64)
    n, kind = K.raycast(truth.cells, float(origin[0]), float(origin[1]), float(angle), float(max_range), oc, orr)
    return [(int(oc[i]), int(orr[i])) for i in range(n)], HIT_KINDS[kind]


def sense_and_update(partial: PartialMap, truth: GroundTruthMap, pose, sensor: SensorConfig) -> int:
    """One full lidar sweep at ``pose``; returns how many cells left unknown."""
    _check_dims(partial, truth)
    _check_origin(truth, pose)
    return int(K.sense(partial.cells, truth.cells, float(pose[0]), float(pose[1]),
                       float(sensor.range), int(sensor.ray_count)))


def sweep_points(start, end, stride: float) -> np.ndarray:
    """Evenly spaced sensing points, both endpoints included, gaps <= stride."""
    p0 = np.asarray(start, dtype=float)
    p1 = np.asarray(end, dtype=float)
    length = float(np.hypot(*(p1 - p0)))
    if length == 0.0:
        return p0[None, :]
    n = int(math.ceil(length / stride - 1e-9)) + 1
    t = np.linspace(0.0, 1.0, n)
    return p0 + t[:, None] * (p1 - p0)


def traverse_and_sense(partial: PartialMap, truth: GroundTruthMap, start, end,
                       sensor: SensorConfig) -> tuple[float, int]:
    """Drive a straight known-free segment, sweeping every ``update_stride``.

    Returns ``(segment_length, newly_classified)``.
    """
    _check_dims(partial, truth)
    if not K.line_of_sight(partial.cells, float(start[0]), float(start[1]), float(end[0]), float(end[1])):
        raise PreconditionError(f"segment {tuple(start)} -> {tuple(end)} is not known-free")
    newly = 0
    for p in sweep_points(start, end, sensor.update_stride):
        newly += sense_and_update(partial, truth, p, sensor)
    return math.hypot(end[0] - start[0], end[1] - start[1]), newly


def _check_dims(partial: PartialMap, truth: GroundTruthMap) -> None:
    if partial.cells.shape != truth.cells.shape:
        raise ValueError(f"map shapes differ: {partial.cells.shape} vs {truth.cells.shape}")


def exploration_rate(partial: PartialMap, truth: GroundTruthMap) -> float:
    _check_dims(partial, truth)
    known = np.count_nonzero(partial.known & truth.explorable)
    return known / truth.explorable_count


# -- map files --------------------------------------------------------------

MAGIC = "ATTNEXPLORE-GRID v1"
_CHARS = {".": FREE, "#": OCCUPIED, "U": UNKNOWN}


def save_map(path, grid, start: tuple[int, int] | None = None) -> None:
    """Write a ground truth or partial map in the ``ATTNEXPLORE-GRID v1`` format."""
    if isinstance(grid, GroundTruthMap):
        rows = np.where(grid.cells == 0, ".", "#")
        start = grid.start if start is None else start
    else:
        cells = grid.cells if isinstance(grid, PartialMap) else np.asarray(grid)
        rows = np.full(cells.shape, "U")
        rows[cells == FREE] = "."
        rows[cells == OCCUPIED] = "#"
        if start is None:
            raise ValueError("partial maps need an explicit start cell")
    h, w = rows.shape
    lines = [f"{MAGIC} {w} {h} {start[0]} {start[1]}"]
    lines += ["".join(r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_map(path, partial: bool = False):
    """Read a map file.

    Returns a ``GroundTruthMap`` or, with ``partial=True``, a
    ``(PartialMap, start)`` pair. Any character outside ``.#`` (``.#U`` for
    partial maps) is rejected.
    """
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text:
        raise MapFormatError("empty map file")
    head = text[0].split()
    if " ".join(head[:2]) != MAGIC or len(head) != 6:
        raise MapFormatError(f"bad header: {text[0]!r}")
    try:
        w, h, sc, sr = (int(v) for v in head[2:])
    except ValueError as exc:
        raise MapFormatError(f"bad header: {text[0]!r}") from exc
    body = text[1:]
    if len(body) != h or any(len(line) != w for line in body):
        raise MapFormatError(f"expected {h} rows of {w} characters")
    allowed = set(".#U") if partial else set(".#")
    bad = set("".join(body)) - allowed
    if bad:
        raise MapFormatError(f"unexpected characters {sorted(bad)}")
    arr = np.array([list(line) for line in body])
    if partial:
        cells = np.full((h, w), UNKNOWN, dtype=np.int8)
        for ch, val in _CHARS.items():
            cells[arr == ch] = val
        return PartialMap(cells), (sc, sr)
    try:
        return GroundTruthMap((arr == "#").astype(np.uint8), (sc, sr))
    except ValueError as exc:
        raise MapFormatError(str(exc)) from exc

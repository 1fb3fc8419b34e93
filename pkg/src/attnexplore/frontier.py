"""Frontier cells and observable-frontier utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .gridmap import EIGHT, FREE, UNKNOWN, PartialMap


@dataclass(frozen=True, eq=False)
class FrontierSet:
    """Known-free cells with at least one unknown 8-neighbour."""

    mask: np.ndarray

    @property
    def cells(self) -> np.ndarray:
        """``(n, 2)`` array of ``(col, row)`` in row-major order."""
        rc = np.argwhere(self.mask)
        return rc[:, ::-1]

    @property
    def centers(self) -> np.ndarray:
        return self.cells.astype(np.float64) + 0.5

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(c), int(r)) for c, r in self.cells}

    def __len__(self) -> int:
        return int(self.mask.sum())


def detect_frontiers(partial: PartialMap) -> FrontierSet:
    near_unknown = ndimage.binary_dilation(partial.cells == UNKNOWN, structure=EIGHT)
    return FrontierSet((partial.cells == FREE) & near_unknown)


def line_of_sight(partial: PartialMap, a, b) -> bool:
    return bool(K.line_of_sight(partial.cells, float(a[0]), float(a[1]), float(b[0]), float(b[1])))


def node_utility(partial: PartialMap, frontiers: FrontierSet, node, d_s: float) -> int:
    """Number of frontier cells within ``d_s`` of ``node`` and in its line of sight."""
    out = utilities(partial, frontiers, np.asarray([node], dtype=np.float64), d_s)
    return int(out[0])


def utilities(partial: PartialMap, frontiers: FrontierSet, nodes: np.ndarray, d_s: float,
              todo: np.ndarray | None = None, out: np.ndarray | None = None) -> np.ndarray:
    """Utilities for many nodes at once; only ``todo`` entries are (re)computed."""
    nodes = np.ascontiguousarray(nodes, dtype=np.float64).reshape(-1, 2)
    if out is None:
        out = np.zeros(len(nodes), dtype=np.int64)
    if todo is None:
        todo = np.ones(len(nodes), dtype=bool)
    K.utilities(partial.cells, nodes, np.ascontiguousarray(frontiers.centers), float(d_s), todo, out)
    return out


def stale_nodes(nodes: np.ndarray, changed: np.ndarray, d_s: float) -> np.ndarray:
    """Nodes whose utility may differ after the cells in ``changed`` were classified.

    A utility depends on frontier membership and line of sight, both of which
    only move within one cell of a newly classified cell, so nodes farther
    than ``d_s`` plus that margin cannot change.
    """
    if not changed.any():
        return np.zeros(len(nodes), dtype=bool)
    rows, cols = np.nonzero(ndimage.binary_dilation(changed, structure=EIGHT))
    pts = np.stack([cols + 0.5, rows + 0.5], axis=1)
    lo = pts.min(axis=0) - d_s - 2
    hi = pts.max(axis=0) + d_s + 2
    cand = np.all((nodes >= lo) & (nodes <= hi), axis=1)
    stale = np.zeros(len(nodes), dtype=bool)
    lim = (d_s + 2.0) ** 2
    for i in np.flatnonzero(cand):
        d2 = ((pts - nodes[i]) ** 2).sum(axis=1)
        stale[i] = bool((d2 <= lim).any())
    return stale

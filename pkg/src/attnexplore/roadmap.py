"""Uniform viewpoint lattice, collision-free graph and graph search.

Nodes are always referred to by their lattice index, so ids are stable
while the active set grows during an episode.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .gridmap import FREE, PartialMap


@dataclass(frozen=True, eq=False)
class NodeLattice:
    points: np.ndarray  # (n, 2) cell centres, row-major over the grid
    rows: int
    cols: int
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.points)

    @property
    def cells(self) -> np.ndarray:
        return np.floor(self.points).astype(np.int64)

    def nearest(self, point) -> int:
        d = np.hypot(*(self.points - np.asarray(point, dtype=float)).T)
        return int(np.argmin(d))


def factor_grid(width: int, height: int, count: int) -> tuple[int, int]:
    """Most square ``rows x cols`` split of ``count``.

    The longer side of the grid follows the longer side of the map. Splits
    whose node spacing differs by more than 4x between the axes are refused.
    """
    if count < 1:
        raise ValueError("lattice needs at least one node")
    best = None
    for a in range(1, int(math.isqrt(count)) + 1):
        if count % a:
            continue
        b = count // a
        rows, cols = (a, b) if width >= height else (b, a)
        key = (b - a, rows)
        if best is None or key < best[0]:
            best = (key, rows, cols)
    _, rows, cols = best
    ratio = (width / cols) / (height / rows)
    if not 0.25 <= ratio <= 4.0:
        raise ValueError(f"{count} nodes do not form a usable grid on {width}x{height}")
    return rows, cols


def build_lattice(width: int, height: int, count: int) -> NodeLattice:
    rows, cols = factor_grid(width, height, count)
    xs = np.floor((np.arange(cols) + 0.5) * width / cols) + 0.5
    ys = np.floor((np.arange(rows) + 0.5) * height / rows) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts.flags.writeable = False
    return NodeLattice(pts, rows, cols, width, height)


@dataclass(eq=False)
class CollisionFreeGraph:
    lattice: NodeLattice
    active: np.ndarray          # (n,) bool over lattice ids
    neighbors: list             # per lattice id, sorted int array

    @property
    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def edges(self) -> np.ndarray:
        """``(m, 2)`` unique undirected edges with ``i < j``."""
        out = [(i, int(j)) for i in self.active_ids for j in self.neighbors[i] if j > i]
        return np.asarray(out, dtype=np.int64).reshape(-1, 2)

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbors[i]
        k = np.searchsorted(nb, j)
        return k < len(nb) and nb[k] == j


def active_mask(partial: PartialMap, lattice: NodeLattice) -> np.ndarray:
    cells = lattice.cells
    return partial.cells[cells[:, 1], cells[:, 0]] == FREE


def rebuild_graph(partial: PartialMap, lattice: NodeLattice, k: int) -> CollisionFreeGraph:
    """Connect every active node to its ``k`` nearest active nodes when clear.

    Candidate edges that pass the known-free line check are kept; the result
    is the union over both endpoints' proposals.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    active = active_mask(partial, lattice)
    ids = np.flatnonzero(active)
    neighbors = [np.zeros(0, dtype=np.int64) for _ in range(len(lattice))]
    if len(ids) < 2:
        return CollisionFreeGraph(lattice, active, neighbors)
    pts = lattice.points[ids]
    d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    np.fill_diagonal(d, np.inf)
    kk = min(k, len(ids) - 1)
    order = np.argsort(d, axis=1, kind="stable")[:, :kk]
    src = np.repeat(np.arange(len(ids)), kk)
    dst = order.ravel()
    pairs = np.unique(np.sort(np.stack([src, dst], axis=1), axis=1), axis=0)
    clear = K.edges_clear(partial.cells, np.ascontiguousarray(pts), pairs[:, 0].copy(), pairs[:, 1].copy())
    pairs = ids[pairs[clear]]
    adj: dict[int, list[int]] = {}
    for a, b in pairs:
        adj.setdefault(int(a), []).append(int(b))
        adj.setdefault(int(b), []).append(int(a))
    for i, nb in adj.items():
        neighbors[i] = np.asarray(sorted(nb), dtype=np.int64)
    return CollisionFreeGraph(lattice, active, neighbors)


@dataclass(eq=False)
class AugmentedGraph:
    """Network-ready observation: features of the active nodes in id order."""

    node_ids: np.ndarray        # (n,) lattice ids of the active nodes
    features: np.ndarray        # (n, 4) x, y, utility, visited, all in [0, 1]
    adjacency: list             # per row, neighbour rows (positions in node_ids)
    current: int                # row of the robot's node
    neighbor_rows: np.ndarray   # rows of the current node's neighbours

    def edge_mask(self) -> np.ndarray:
        """``True`` where attention is blocked; self-attention always allowed."""
        n = len(self.node_ids)
        m = np.ones((n, n), dtype=bool)
        for i, nb in enumerate(self.adjacency):
            m[i, nb] = False
        np.fill_diagonal(m, False)
        return m


def augment(graph: CollisionFreeGraph, utilities: np.ndarray, visited, current: int,
            utility_norm: float | None = None) -> AugmentedGraph:
    """Scale node features to ``[0, 1]``.

    Coordinates are divided by the map size, utilities by
    ``max(1, max utility over active nodes)`` unless ``utility_norm`` fixes
    the divisor (e.g. the sensor range).
    """
    if not graph.active[current]:
        raise ValueError(f"current node {current} is not active")
    lat = graph.lattice
    ids = graph.active_ids
    row_of = np.full(len(lat), -1, dtype=np.int64)
    row_of[ids] = np.arange(len(ids))
    u = np.asarray(utilities, dtype=np.float64)[ids]
    if utility_norm is None:
        norm = max(1.0, float(u.max()) if len(u) else 1.0)
        scaled = u / norm
    else:
        scaled = np.minimum(u / utility_norm, 1.0)
    vis = np.zeros(len(lat), dtype=bool)
    vis[list(visited)] = True
    feats = np.stack([
        lat.points[ids, 0] / lat.width,
        lat.points[ids, 1] / lat.height,
        scaled,
        vis[ids].astype(np.float64),
    ], axis=1).astype(np.float32)
    adjacency = [row_of[graph.neighbors[i]] for i in ids]
    cur = int(row_of[current])
    return AugmentedGraph(ids, feats, adjacency, cur, adjacency[cur])


def dijkstra(graph: CollisionFreeGraph, source: int):
    """Single-source shortest paths over the graph edges.

    Returns ``(dist, pred)`` indexed by lattice id; unreachable nodes have
    ``inf`` distance and ``-1`` predecessor. Among equally short routes the
    predecessor with the smaller id wins.
    """
    pts = graph.lattice.points
    n = len(pts)
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = np.zeros(n, dtype=bool)
    while heap:
        du, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        pu = pts[u]
        for v in graph.neighbors[u]:
            v = int(v)
            if done[v]:
                continue
            nd = du + math.hypot(pts[v, 0] - pu[0], pts[v, 1] - pu[1])
            if nd < dist[v] - 1e-9:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd <= dist[v] + 1e-9 and u < pred[v]:
                pred[v] = u
    return dist, pred


def unwind(pred: np.ndarray, source: int, target: int) -> list[int]:
    path = [target]
    while path[-1] != source:
        path.append(int(pred[path[-1]]))
    return path[::-1]


def shortest_path(graph: CollisionFreeGraph, a: int, b: int):
    """``(path, length)`` from ``a`` to ``b``, or ``None`` when unreachable."""
    if not (graph.active[a] and graph.active[b]):
        raise ValueError("both endpoints must be active nodes")
    dist, pred = dijkstra(graph, a)
    if not np.isfinite(dist[b]):
        return None
    return unwind(pred, a, b), float(dist[b])


def path_length(lattice: NodeLattice, path) -> float:
    p = lattice.points[list(path)]
    return float(np.hypot(*np.diff(p, axis=0).T).sum()) if len(p) > 1 else 0.0

"""Conventional exploration planners on the shared roadmap.

Every planner is a function of the environment state that returns a
:class:`PlannerVerdict`; the caller executes one graph edge per decision and
re-plans, so sensing and length accounting are identical for all planners.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as cs_dijkstra

from . import _kernels as K
from . import frontier as fr
from .roadmap import dijkstra, unwind


@dataclass
class PlannerVerdict:
    next_node: int | None               # lattice id of the neighbour to drive to
    path: list | None = None            # planned route (lattice ids) when available
    scores: dict = field(default_factory=dict)
    reason: str = ""                    # why no step was proposed

    @property
    def done(self) -> bool:
        return self.next_node is None


def _finish(env, reason: str) -> PlannerVerdict:
    # distinguishes a fully explored map from frontiers the graph cannot reach
    if reason == "unreachable":
        return PlannerVerdict(None, reason="disconnected")
    return PlannerVerdict(None, reason="explored")


def candidate_targets(env) -> np.ndarray:
    """Unvisited active nodes with positive utility.

    Sensing is a pure function of pose, so a node the robot has already
    sensed from cannot reveal anything new; any utility left there belongs to
    frontiers that are only resolvable from elsewhere.
    """
    mask = env.graph.active & (env.utilities > 0)
    mask[list(env.visited)] = False
    return np.flatnonzero(mask)


def _first_step(pred, source: int, target: int) -> tuple[int, list]:
    path = unwind(pred, source, target)
    return path[1], path


def nearest_frontier(env) -> PlannerVerdict:
    """Step along the shortest graph path to the closest useful node."""
    targets = candidate_targets(env)
    if len(targets) == 0:
        return _finish(env, "explored")
    dist, pred = dijkstra(env.graph, env.current)
    d = dist[targets]
    if not np.isfinite(d).any():
        return _finish(env, "unreachable")
    best = int(targets[np.flatnonzero(d == d.min())[0]])
    nxt, path = _first_step(pred, env.current, best)
    return PlannerVerdict(nxt, path, {int(t): float(x) for t, x in zip(targets, d)})


def gain(u, cost, lam: float, scale: float = 1.0):
    """``u * exp(-lam * cost / scale)``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return np.asarray(u, dtype=float) * np.exp(-lam * np.asarray(cost, dtype=float) / scale)


def map_diagonal(env) -> float:
    return math.hypot(env.lattice.width, env.lattice.height)


def utility_frontier(env, lam: float = 10.0, normalize: bool = True) -> PlannerVerdict:
    """Maximise ``g_i = u_i exp(-lam C_i)`` over useful nodes.

    ``C_i`` is the graph distance, divided by the map diagonal unless
    ``normalize`` is off.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    targets = candidate_targets(env)
    if len(targets) == 0:
        return _finish(env, "explored")
    dist, pred = dijkstra(env.graph, env.current)
    d = dist[targets]
    ok = np.isfinite(d)
    if not ok.any():
        return _finish(env, "unreachable")
    g = np.where(ok, gain(env.utilities[targets], np.where(ok, d, 0.0), lam,
                          map_diagonal(env) if normalize else 1.0), -np.inf)
    best = int(targets[np.flatnonzero(g == g.max())[0]])
    nxt, path = _first_step(pred, env.current, best)
    return PlannerVerdict(nxt, path, {int(t): float(x) for t, x in zip(targets, g)})


# -- sampled next-best-view -------------------------------------------------

@dataclass(frozen=True)
class NbvParams:
    lam: float = 10.0
    iterations: int = 300
    step: float | None = None       # tree extension length; default: lattice spacing
    normalize: bool = True


def grow_tree(partial, root, iterations: int, step: float, rng: np.random.Generator):
    """Random tree over known-free space with straight collision-checked edges.

    Returns ``(points (m, 2), parent (m,), cost (m,))`` with the root at 0.
    """
    h, w = partial.cells.shape
    pts = [np.asarray(root, dtype=float)]
    parent, cost = [-1], [0.0]
    cells = partial.cells
    for _ in range(iterations):
        s = rng.random(2) * (w, h)
        arr = np.asarray(pts)
        d = np.hypot(*(arr - s).T)
        j = int(np.argmin(d))
        if d[j] == 0.0:
            continue
        new = arr[j] + (s - arr[j]) * min(1.0, step / d[j])
        if not K.line_of_sight(cells, arr[j, 0], arr[j, 1], new[0], new[1]):
            continue
        pts.append(new)
        parent.append(j)
        cost.append(cost[j] + float(min(step, d[j])))
    return np.asarray(pts), np.asarray(parent, dtype=np.int64), np.asarray(cost)


def tree_scores(env, pts, parent, cost, lam: float, normalize: bool = True) -> np.ndarray:
    """Gain accumulated along each tree branch from the root."""
    u = fr.utilities(env.partial, env.frontiers, pts, env.cfg.d_s).astype(float)
    g = gain(u, cost, lam, map_diagonal(env) if normalize else 1.0)
    g[0] = 0.0
    acc = np.zeros(len(pts))
    for i in range(1, len(pts)):         # parents always precede children
        acc[i] = acc[parent[i]] + g[i]
    return acc


def sampled_nbv(env, params: NbvParams = NbvParams(), rng: np.random.Generator | None = None) -> PlannerVerdict:
    """Grow a tree, pick the best branch and step along the graph toward its end.

    The winning tree node is mapped to the closest reachable candidate
    target (see :func:`candidate_targets`); if no branch has positive gain,
    the nearest-frontier step is used instead.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    lat = env.lattice
    step = params.step or min(lat.width / lat.cols, lat.height / lat.rows)
    pts, parent, cost = grow_tree(env.partial, lat.points[env.current], params.iterations, step, rng)
    acc = tree_scores(env, pts, parent, cost, params.lam, params.normalize)
    if acc.max() <= 0:
        v = nearest_frontier(env)
        v.scores["fallback"] = 1.0
        return v
    targets = candidate_targets(env)
    if len(targets) == 0:
        return _finish(env, "explored")
    dist, pred = dijkstra(env.graph, env.current)
    targets = targets[np.isfinite(dist[targets])]
    if len(targets) == 0:
        return _finish(env, "unreachable")
    best = int(np.argmax(acc))
    d = np.hypot(*(lat.points[targets] - pts[best]).T)
    node = int(targets[np.argmin(d)])
    nxt, path = _first_step(pred, env.current, node)
    return PlannerVerdict(nxt, path, {"best_score": float(acc[best]), "tree_size": float(len(pts))})


# -- local coverage tour ----------------------------------------------------

def graph_distances(env, sources) -> np.ndarray:
    """All-pairs graph distances from ``sources`` to every lattice node."""
    g = env.graph
    pts = env.lattice.points
    e = g.edges
    n = len(pts)
    w = np.hypot(*(pts[e[:, 0]] - pts[e[:, 1]]).T) if len(e) else np.zeros(0)
    m = csr_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)) if len(e) else csr_matrix((n, n))
    return cs_dijkstra(m, directed=False, indices=np.asarray(sources, dtype=np.int64))


def open_tour_length(dm: np.ndarray, order) -> float:
    """Length of the open tour ``0 -> order[0] -> order[1] ...`` in matrix ``dm``."""
    seq = [0, *order]
    return float(sum(dm[a, b] for a, b in zip(seq, seq[1:])))


def two_opt(dm: np.ndarray, order: list) -> list:
    """2-opt on an open tour that starts at index 0 (fixed) and ends anywhere."""
    seq = [0, *order]
    n = len(seq)
    improved = True
    while improved:
        improved = False
        for i in range(1, n - 1):
            for j in range(i + 1, n):
                a, b = seq[i - 1], seq[i]
                c = seq[j]
                d = seq[j + 1] if j + 1 < n else None
                before = dm[a, b] + (dm[c, d] if d is not None else 0.0)
                after = dm[a, c] + (dm[b, d] if d is not None else 0.0)
                if after < before - 1e-9:
                    seq[i:j + 1] = seq[i:j + 1][::-1]
                    improved = True
    return seq[1:]


def nearest_neighbor_tour(dm: np.ndarray, rng: np.random.Generator | None = None) -> list:
    """Greedy open tour from index 0; with ``rng`` each hop picks among the two closest."""
    left = list(range(1, len(dm)))
    order, cur = [], 0
    while left:
        d = np.array([dm[cur, j] for j in left])
        rank = np.argsort(d, kind="stable")
        pick = rank[0] if rng is None or len(rank) == 1 else rank[int(rng.integers(min(2, len(rank))))]
        cur = left.pop(int(pick))
        order.append(cur)
    return order


def plan_tour(dm: np.ndarray, restarts: int = 10, rng: np.random.Generator | None = None) -> list:
    """Best of ``restarts`` (nearest-neighbour + 2-opt) open tours; restart 0 is deterministic."""
    if rng is None:
        rng = np.random.default_rng(0)
    best, best_len = None, math.inf
    for r in range(restarts):
        order = two_opt(dm, nearest_neighbor_tour(dm, None if r == 0 else rng))
        length = open_tour_length(dm, order)
        if length < best_len - 1e-9:
            best, best_len = order, length
    return best


def coverage_local(env, restarts: int = 10, rng: np.random.Generator | None = None) -> PlannerVerdict:
    """Tour through every useful node, execute its first edge, re-plan next time."""
    targets = candidate_targets(env)
    if len(targets) == 0:
        return _finish(env, "explored")
    dist, pred = dijkstra(env.graph, env.current)
    targets = targets[np.isfinite(dist[targets])]
    if len(targets) == 0:
        return _finish(env, "unreachable")
    stops = np.concatenate([[env.current], targets])
    dm = graph_distances(env, stops)[:, stops]
    order = plan_tour(dm, restarts, rng)
    first = int(stops[order[0]])
    nxt, path = _first_step(pred, env.current, first)
    return PlannerVerdict(nxt, path, {"tour_length": open_tour_length(dm, order),
                                      "viewpoints": float(len(targets))})


# -- shared execution harness -----------------------------------------------

@dataclass
class EpisodeRun:
    length: float
    completed: bool
    decisions: int
    rate: float
    obs_ms: float
    infer_ms: float
    trajectory: list
    rates: list
    reason: str = ""


def run_episode(env, planner, budget: int | None = None) -> EpisodeRun:
    """Drive ``env`` (already reset) with ``planner`` until completion or budget.

    ``planner(env)`` returns a :class:`PlannerVerdict`; a learned planner may
    also report its own observation time via ``verdict.scores['obs_ms']``.
    """
    budget = budget or env.cfg.max_steps
    obs_ms = infer_ms = 0.0
    reason = ""
    rates = [(0.0, env.rate)]
    while not env.done and env.steps < budget:
        t0 = time.perf_counter()
        v = planner(env)
        dt = (time.perf_counter() - t0) * 1000
        o = v.scores.pop("obs_ms", 0.0)
        obs_ms += o
        infer_ms += dt - o
        if v.done:
            reason = v.reason
            break
        if not env.graph.has_edge(env.current, v.next_node):
            raise RuntimeError(f"planner proposed {v.next_node}, not a neighbour of {env.current}")
        env.move_to(v.next_node)
        rates.append((env.length, env.rate))
    n = max(env.steps, 1)
    return EpisodeRun(env.length, env.completed, env.steps, env.rate, obs_ms / n, infer_ms / n,
                      list(env.trajectory), rates, reason)

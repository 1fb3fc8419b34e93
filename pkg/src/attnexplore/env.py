"""Exploration environment: the robot hops between neighbouring graph nodes."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import frontier as fr
from .dungeon import MapGenConfig, generate_dungeon
from .gridmap import (
    GroundTruthMap, PartialMap, SensorConfig, cell_center, exploration_rate,
    sense_and_update, traverse_and_sense,
)
from .roadmap import AugmentedGraph, NodeLattice, augment, build_lattice, rebuild_graph

REPLAY_MAGIC = "ATTNEXPLORE-REPLAY v1"
REPLAY_FIELDS = ["step", "node", "x", "y", "r_o", "r_c", "r_f", "reward", "rate", "length"]


class EnvAbort(RuntimeError):
    """The episode cannot continue (isolated start or dead end)."""


@dataclass(frozen=True)
class RewardParams:
    a: float = 1 / 50
    b: float = 1 / 64
    finish: float = 20.0
    complete_at: float = 0.99
    # "observed": pre-move frontier cells that stop being frontiers
    # "observable": utility of the node just reached
    frontier_term: str = "observed"

    def __post_init__(self):
        if self.frontier_term not in ("observed", "observable"):
            raise ValueError(f"unknown frontier_term {self.frontier_term!r}")


def total_reward(r_o: float, r_c_len: float, done_complete: bool, params: RewardParams = RewardParams()) -> float:
    if r_o < 0 or r_c_len < 0:
        raise ValueError("reward terms must be non-negative")
    return params.a * r_o - params.b * r_c_len + (params.finish if done_complete else 0.0)


@dataclass
class EnvConfig:
    map: MapGenConfig = field(default_factory=MapGenConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    node_count: int = 900
    k: int = 20
    max_steps: int = 128
    reward: RewardParams = field(default_factory=RewardParams)

    @property
    def d_s(self) -> float:
        return self.sensor.range

    def to_dict(self) -> dict:
        return asdict(self)


def preset(name: str, **kw) -> EnvConfig:
    """``full`` (640x480, 900 nodes, k=20) or ``desk`` (320x240, 225 nodes, k=10)."""
    if name == "full":
        cfg = EnvConfig(MapGenConfig(width=640, height=480), SensorConfig(range=80.0), 900, 20)
    elif name == "desk":
        cfg = EnvConfig(MapGenConfig(width=320, height=240), SensorConfig(range=40.0), 225, 10)
    else:
        raise ValueError(f"unknown preset {name!r}")
    for key, val in kw.items():
        setattr(cfg, key, val)
    return cfg


@dataclass(eq=False)
class Observation:
    graph: AugmentedGraph
    current: int            # lattice id of the robot's node
    neighbors: np.ndarray   # lattice ids, aligned with the action index

    @property
    def features(self) -> np.ndarray:
        return self.graph.features

    @property
    def current_row(self) -> int:
        return self.graph.current

    @property
    def neighbor_rows(self) -> np.ndarray:
        return self.graph.neighbor_rows

    def edge_mask(self) -> np.ndarray:
        return self.graph.edge_mask()


@dataclass(eq=False)
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    done: bool

    def __post_init__(self):
        if not 0 <= self.action < len(self.obs.neighbors):
            raise ValueError("action index outside the neighbour list")
        if not math.isfinite(self.reward):
            raise ValueError("reward must be finite")


class ExploreEnv:
    """Single sequential exploration episode on one ground-truth map."""

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg or EnvConfig()
        self.lattice: NodeLattice = build_lattice(self.cfg.map.width, self.cfg.map.height, self.cfg.node_count)
        self.truth: GroundTruthMap | None = None

    # -- episode setup ------------------------------------------------------

    def _initial_state(self, truth: GroundTruthMap):
        """Sense at the start cell and drive to the nearest visible node."""
        partial = PartialMap.like(truth)
        start = cell_center(*truth.start)
        sense_and_update(partial, truth, start, self.cfg.sensor)
        graph = rebuild_graph(partial, self.lattice, self.cfg.k)
        ids = graph.active_ids
        if len(ids) == 0:
            return None
        d = np.hypot(*(self.lattice.points[ids] - start).T)
        for j in np.argsort(d, kind="stable"):
            node = int(ids[j])
            if fr.line_of_sight(partial, start, self.lattice.points[node]):
                break
        else:
            return None
        traverse_and_sense(partial, truth, start, self.lattice.points[node], self.cfg.sensor)
        graph = rebuild_graph(partial, self.lattice, self.cfg.k)
        if graph.degree(node) == 0:
            return None
        return partial, node, graph

    def reset(self, seed: int | None = None, truth: GroundTruthMap | None = None) -> Observation:
        """Start an episode on ``truth`` or on a freshly generated map for ``seed``."""
        if truth is None:
            if seed is None:
                raise ValueError("reset needs a seed or a ground-truth map")
            mcfg = MapGenConfig(**{**asdict(self.cfg.map), "seed": int(seed)})
            cache = {}

            def usable(t):
                cache[id(t)] = self._initial_state(t)
                return cache[id(t)] is not None

            truth = generate_dungeon(mcfg, accept=usable)
            state = cache[id(truth)]
        else:
            if truth.cells.shape != (self.cfg.map.height, self.cfg.map.width):
                raise ValueError("map size does not match the environment config")
            state = self._initial_state(truth)
            if state is None:
                raise EnvAbort(f"start {truth.start} has no reachable graph node")
        self.truth = truth
        self.partial, self.current, self.graph = state
        self.visited = {self.current}
        self.frontiers = fr.detect_frontiers(self.partial)
        self.utilities = np.zeros(len(self.lattice), dtype=np.int64)
        fr.utilities(self.partial, self.frontiers, self.lattice.points, self.cfg.d_s,
                     todo=self.graph.active, out=self.utilities)
        self.rate = exploration_rate(self.partial, truth)
        self.length = 0.0
        self.steps = 0
        self.done = False
        self.completed = False
        self.trajectory = [self.current]
        self.log = [dict(step=0, node=self.current, x=self.position[0], y=self.position[1],
                         r_o=0, r_c=0.0, r_f=0.0, reward=0.0, rate=self.rate, length=0.0)]
        return self.observe()

    # -- state --------------------------------------------------------------

    @property
    def position(self) -> tuple[float, float]:
        x, y = self.lattice.points[self.current]
        return float(x), float(y)

    @property
    def neighbors(self) -> np.ndarray:
        return self.graph.neighbors[self.current]

    def observe(self) -> Observation:
        g = augment(self.graph, self.utilities, self.visited, self.current)
        return Observation(g, self.current, g.node_ids[g.neighbor_rows])

    # -- dynamics -----------------------------------------------------------

    def move_to(self, node: int):
        """Step to the neighbour ``node`` (lattice id)."""
        nb = self.neighbors
        hit = np.flatnonzero(nb == node)
        if len(hit) == 0:
            raise ValueError(f"node {node} is not a neighbour of {self.current}")
        return self.step(int(hit[0]))

    def step(self, action: int):
        if self.truth is None or self.done:
            raise RuntimeError("call reset() before step()")
        nb = self.neighbors
        if not (isinstance(action, (int, np.integer)) and 0 <= action < len(nb)):
            raise ValueError(f"action {action!r} outside 0..{len(nb) - 1}")
        target = int(nb[action])
        cfg, rp = self.cfg, self.cfg.reward
        before = self.partial.cells.copy()
        f_pre = self.frontiers.mask
        seg, _ = traverse_and_sense(self.partial, self.truth, self.lattice.points[self.current],
                                    self.lattice.points[target], cfg.sensor)
        changed = before != self.partial.cells
        self.frontiers = fr.detect_frontiers(self.partial)
        was_active = self.graph.active
        self.graph = rebuild_graph(self.partial, self.lattice, cfg.k)
        todo = self.graph.active & (fr.stale_nodes(self.lattice.points, changed, cfg.d_s) | ~was_active)
        fr.utilities(self.partial, self.frontiers, self.lattice.points, cfg.d_s, todo=todo, out=self.utilities)

        self.current = target
        self.visited.add(target)
        self.trajectory.append(target)
        self.length += seg
        self.steps += 1
        self.rate = exploration_rate(self.partial, self.truth)

        if rp.frontier_term == "observed":
            r_o = int(np.count_nonzero(f_pre & ~self.frontiers.mask))
        else:
            r_o = int(self.utilities[target])
        complete = self.rate > rp.complete_at
        r_f = rp.finish if complete else 0.0
        reward = total_reward(r_o, seg, complete, rp)
        self.completed = complete
        self.done = complete or self.steps >= cfg.max_steps
        if not self.done and self.graph.degree(target) == 0:
            raise EnvAbort(f"node {target} has no neighbours")
        info = dict(r_o=r_o, r_c=-seg, r_f=r_f, rate=self.rate, length=self.length, complete=complete)
        self.log.append(dict(step=self.steps, node=target, x=self.position[0], y=self.position[1],
                             r_o=r_o, r_c=-seg, r_f=r_f, reward=reward, rate=self.rate, length=self.length))
        return self.observe(), reward, self.done, info

    def write_replay(self, path) -> None:
        write_replay(path, self.log)


def write_replay(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {REPLAY_MAGIC}\n")
        w = csv.DictWriter(fh, fieldnames=REPLAY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def read_replay(path) -> list[dict]:
    with open(path) as fh:
        head = fh.readline().strip()
        if head != f"# {REPLAY_MAGIC}":
            raise ValueError(f"{path}: not a replay log")
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("step", "node", "r_o") else float(v)) for k, v in r.items()})
    return out

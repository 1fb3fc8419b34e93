"""Random dungeon maps: rectangular rooms joined by L-shaped corridors.

Rooms are placed by rejection sampling, linked along a spanning tree
(each new room to its nearest linked room) and, for the complex tier,
by a few extra loop corridors. Parameters live in ``TIER_PARAMS``; bump
``GENERATOR_VERSION`` whenever they or the algorithm change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .gridmap import EIGHT, GroundTruthMap

GENERATOR_VERSION = 1
TIERS = ("easy", "medium", "complex")
ALL_TIERS = TIERS + ("random",)

# room sizes are fractions of the map side; everything else is in cells
TIER_PARAMS = {
    "easy": dict(rooms=(1, 1), room_frac=(0.55, 0.9), pillars=(0, 3), loops=(0, 0)),
    "medium": dict(rooms=(2, 4), room_frac=(0.24, 0.4), pillars=(0, 1), loops=(0, 0)),
    "complex": dict(rooms=(5, 7), room_frac=(0.17, 0.27), pillars=(0, 0), loops=(1, 2)),
}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MapGenConfig:
    seed: int = 0
    tier: str = "random"
    width: int = 640
    height: int = 480
    corridor_width: tuple[int, int] = (24, 30)
    room_gap: int = 6
    border: int = 2
    min_room: int = 32
    pillar_size: tuple[int, int] = (6, 12)
    max_attempts: int = 60
    overrides: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.tier not in ALL_TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.width < 2 * self.min_room or self.height < 2 * self.min_room:
            raise ValueError("map too small for the room size limits")
        if self.corridor_width[0] < 1 or self.corridor_width[0] > self.corridor_width[1]:
            raise ValueError("bad corridor width range")

    def params(self, tier: str) -> dict:
        p = dict(TIER_PARAMS[tier])
        p.update(self.overrides.get(tier, {}))
        return p


def _rng(cfg: MapGenConfig, attempt: int) -> np.random.Generator:
    return np.random.default_rng([GENERATOR_VERSION, cfg.seed, cfg.width, cfg.height, attempt])


def _place_rooms(rng, cfg: MapGenConfig, p: dict):
    lo, hi = p["rooms"]
    want = int(rng.integers(lo, hi + 1))
    fmin, fmax = p["room_frac"]
    rooms: list[tuple[int, int, int, int]] = []
    g = cfg.room_gap
    for _ in range(400):
        if len(rooms) == want:
            break
        w = max(cfg.min_room, int(rng.uniform(fmin, fmax) * cfg.width))
        h = max(cfg.min_room, int(rng.uniform(fmin, fmax) * cfg.height))
        w = min(w, cfg.width - 2 * cfg.border)
        h = min(h, cfg.height - 2 * cfg.border)
        x = int(rng.integers(cfg.border, cfg.width - cfg.border - w + 1))
        y = int(rng.integers(cfg.border, cfg.height - cfg.border - h + 1))
        if all(x + w + g <= rx or rx + rw + g <= x or y + h + g <= ry or ry + rh + g <= y
               for rx, ry, rw, rh in rooms):
            rooms.append((x, y, w, h))
    if len(rooms) < lo:
        return None
    return rooms


def _carve_corridor(free, a, b, width, horizontal_first, cfg):
    half = width // 2
    h, w = free.shape
    (xa, ya), (xb, yb) = a, b
    corner = (xb, ya) if horizontal_first else (xa, yb)
    for (x0, y0), (x1, y1) in ((a, corner), (corner, b)):
        xs, xe = sorted((x0, x1))
        ys, ye = sorted((y0, y1))
        r0 = max(cfg.border, ys - half)
        r1 = min(h - cfg.border, ye - half + width)
        c0 = max(cfg.border, xs - half)
        c1 = min(w - cfg.border, xe - half + width)
        free[r0:r1, c0:c1] = True


def _fix_diagonal_gaps(free: np.ndarray) -> None:
    # free cells touching only at a corner would be 8-connected but not passable
    while True:
        a = free[:-1, :-1]
        b = free[:-1, 1:]
        c = free[1:, :-1]
        d = free[1:, 1:]
        bad = (a & d & ~b & ~c) | (b & c & ~a & ~d)
        if not bad.any():
            return
        rows, cols = np.nonzero(bad)
        free[rows, cols + 1] = True
        free[rows, cols] = True
        free[rows + 1, cols] = True
        free[rows + 1, cols + 1] = True


def _attempt(cfg: MapGenConfig, tier: str, rng) -> GroundTruthMap | None:
    p = cfg.params(tier)
    rooms = _place_rooms(rng, cfg, p)
    if rooms is None:
        return None
    free = np.zeros((cfg.height, cfg.width), dtype=bool)
    labels = np.zeros((cfg.height, cfg.width), dtype=np.int32)
    for i, (x, y, w, h) in enumerate(rooms, start=1):
        free[y:y + h, x:x + w] = True
        labels[y:y + h, x:x + w] = i
    centers = [(x + w // 2, y + h // 2) for x, y, w, h in rooms]

    links: list[tuple[int, int]] = []
    order = list(rng.permutation(len(rooms)))
    linked = [order[0]]
    for i in order[1:]:
        d = [np.hypot(centers[i][0] - centers[j][0], centers[i][1] - centers[j][1]) for j in linked]
        links.append((i, linked[int(np.argmin(d))]))
        linked.append(i)
    lo, hi = p["loops"]
    for _ in range(int(rng.integers(lo, hi + 1))):
        if len(rooms) < 3:
            break
        i, j = (int(v) for v in rng.choice(len(rooms), size=2, replace=False))
        if (i, j) not in links and (j, i) not in links:
            links.append((i, j))
    cw0, cw1 = cfg.corridor_width
    for i, j in links:
        width = int(rng.integers(cw0, cw1 + 1))
        _carve_corridor(free, centers[i], centers[j], width, bool(rng.integers(2)), cfg)

    plo, phi = p["pillars"]
    s0, s1 = cfg.pillar_size
    for x, y, w, h in rooms:
        for _ in range(int(rng.integers(plo, phi + 1))):
            pw, ph = (int(v) for v in rng.integers(s0, s1 + 1, size=2))
            # keep a wide ring clear so pillars never seal off a passage
            m = cfg.corridor_width[1] + 2
            if w - 2 * m - pw < 1 or h - 2 * m - ph < 1:
                continue
            px = int(rng.integers(x + m, x + w - m - pw + 1))
            py = int(rng.integers(y + m, y + h - m - ph + 1))
            free[py:py + ph, px:px + pw] = False

    _fix_diagonal_gaps(free)
    comp, n = ndimage.label(free, structure=EIGHT)
    if n != 1:
        return None
    ys, xs = np.nonzero(free)
    k = int(rng.integers(len(xs)))
    labels[~free] = 0
    return GroundTruthMap((~free).astype(np.uint8), (int(xs[k]), int(ys[k])), tier=tier,
                          seed=cfg.seed, room_labels=labels)


def generate_dungeon(cfg: MapGenConfig,
                     accept: Callable[[GroundTruthMap], bool] | None = None) -> GroundTruthMap:
    """Build a ground-truth map whose free space is one 8-connected region.

    ``accept`` may veto a candidate (e.g. a roadmap connectivity check); the
    generator then retries with the next attempt stream. Identical configs
    always give identical maps.
    """
    tier = cfg.tier
    if tier == "random":
        tier = TIERS[int(np.random.default_rng([GENERATOR_VERSION, cfg.seed, 7]).integers(3))]
    for attempt in range(cfg.max_attempts):
        truth = _attempt(cfg, tier, _rng(cfg, attempt))
        if truth is not None and (accept is None or accept(truth)):
            return truth
    raise GenerationError(f"no valid {tier} map for seed {cfg.seed} after {cfg.max_attempts} attempts")


def count_rooms(truth: GroundTruthMap) -> int:
    """Connected components among the room-labelled cells."""
    if truth.room_labels is None:
        raise ValueError("map carries no room labels")
    _, n = ndimage.label(truth.room_labels > 0, structure=EIGHT)
    return int(n)

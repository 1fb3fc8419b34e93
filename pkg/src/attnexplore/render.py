"""Episode images: grey unknown, white free, black occupied, red frontier cells.

The partial map is rebuilt by replaying the logged trajectory against the
ground truth with the same sensor, so a replay file plus its map is enough
to draw any step of an episode.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .frontier import detect_frontiers
from .gridmap import FREE, OCCUPIED, GroundTruthMap, PartialMap, PreconditionError, SensorConfig, cell_center
from .gridmap import sense_and_update, traverse_and_sense
from .roadmap import build_lattice, rebuild_graph

GREY, WHITE, BLACK, RED = (128, 128, 128), (255, 255, 255), (0, 0, 0), (220, 30, 30)
EDGE = (150, 190, 235)


class RenderError(ValueError):
    pass


def replay_partial(truth: GroundTruthMap, points, sensor: SensorConfig) -> PartialMap:
    """Known map after sensing at the start cell and driving through ``points`` in order."""
    partial = PartialMap.like(truth)
    here = cell_center(*truth.start)
    sense_and_update(partial, truth, here, sensor)
    h, w = truth.cells.shape
    for p in points:
        p = (float(p[0]), float(p[1]))
        if not (0 <= p[0] < w and 0 <= p[1] < h):
            raise RenderError(f"replay point {p} lies outside the {w}x{h} map")
        try:
            traverse_and_sense(partial, truth, here, p, sensor)
        except PreconditionError as exc:
            raise RenderError(f"replay does not fit the map: {exc}") from exc
        here = p
    return partial


def time_color(t: float) -> tuple[int, int, int]:
    """Blue at the start of the trajectory, through green, to orange at the end."""
    stops = np.array([[40, 70, 220], [30, 170, 60], [245, 140, 20]], dtype=float)
    x = min(max(t, 0.0), 1.0) * (len(stops) - 1)
    i = min(int(x), len(stops) - 2)
    c = stops[i] + (stops[i + 1] - stops[i]) * (x - i)
    return tuple(int(round(v)) for v in c)


def render_frame(partial: PartialMap, points=(), scale: int = 2, graph=None) -> Image.Image:
    """One image of the known map, frontiers, optional graph edges and the trajectory polyline."""
    cells = partial.cells
    rgb = np.empty(cells.shape + (3,), dtype=np.uint8)
    rgb[:] = GREY
    rgb[cells == FREE] = WHITE
    rgb[cells == OCCUPIED] = BLACK
    rgb[detect_frontiers(partial).mask] = RED
    img = Image.fromarray(rgb, "RGB")
    if scale != 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    if graph is not None:
        pts = graph.lattice.points * scale
        for a, b in graph.edges:
            draw.line([tuple(pts[a]), tuple(pts[b])], fill=EDGE, width=1)
    pts = [(float(x) * scale, float(y) * scale) for x, y in points]
    n = len(pts) - 1
    for i in range(n):
        draw.line([pts[i], pts[i + 1]], fill=time_color(i / max(n - 1, 1)), width=max(1, scale))
    if pts:
        x, y = pts[0]
        r = 2 * scale
        draw.ellipse([x - r, y - r, x + r, y + r], outline=(40, 70, 220), width=max(1, scale // 2))
    return img


def render_episode(truth: GroundTruthMap, rows, sensor: SensorConfig, out_path=None, scale: int = 2,
                   step: int | None = None, node_count: int | None = None, k: int = 10):
    """Image of the episode in replay ``rows`` up to ``step`` (default: the end).

    Returns ``(image, segments)``; an empty log draws only what is seen from
    the start cell. With ``node_count`` the roadmap over the final known map
    is drawn underneath the trajectory.
    """
    rows = list(rows)
    if step is not None:
        rows = [r for r in rows if int(r["step"]) <= step]
    points = [(float(r["x"]), float(r["y"])) for r in rows]
    partial = replay_partial(truth, points, sensor)
    graph = None
    if node_count:
        graph = rebuild_graph(partial, build_lattice(truth.width, truth.height, node_count), k)
    img = render_frame(partial, points, scale, graph)
    if out_path is not None:
        img.save(out_path, format="PNG")
    return img, max(len(points) - 1, 0)

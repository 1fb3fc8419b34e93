"""Test sets, head-to-head evaluation and comparison reports.

A test set directory holds one ``.map`` file per scenario plus
``manifest.json``; the manifest hash pins seeds, generator settings and the
exact bytes of every map.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import baselines as B
from .dungeon import ALL_TIERS, GENERATOR_VERSION, count_rooms
from .env import EnvAbort, EnvConfig, ExploreEnv
from .gridmap import load_map, save_map
from .neural import PolicyNet, NetConfig, collate, load_module, read_checkpoint

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SET_SIZE = 100
SET_STRIDE = 1000           # seed block per test set
TEST_SEED_BASE = 1_000_000
BUDGET = 1024

RESULT_FIELDS = ["set", "scenario", "planner", "seed", "length", "completed", "decisions", "obs_ms", "infer_ms"]
CURVE_FIELDS = ["set", "scenario", "planner", "length", "rate"]

# column order of the published comparison table; "random" is an extra reference
PLANNERS = ("nearest", "util1", "util10", "util25", "nbv", "cov", "learned", "random")


class BenchError(ValueError):
    """Invalid input to a benchmark operation (bad manifest, mismatched runs, ...)."""


# -- test sets ----------------------------------------------------------------

@dataclass
class Scenario:
    set: str
    index: int
    seed: int
    tier: str
    rooms: int
    file: str
    sha256: str


def set_seeds(name: str, master_seed: int, count: int = SET_SIZE) -> list[int]:
    base = TEST_SEED_BASE + master_seed * SET_STRIDE * len(ALL_TIERS) + ALL_TIERS.index(name) * SET_STRIDE
    return list(range(base, base + count))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def gen_test_sets(out_dir, env_cfg: EnvConfig, master_seed: int = 0, sets=ALL_TIERS, count: int = SET_SIZE,
                  train_seeds: tuple[int, int] | None = None, scale: str = "desk") -> dict:
    """Generate ``count`` scenarios for each named set and write the manifest.

    ``train_seeds`` is the half-open training seed range; any overlap with a
    test seed is refused before anything is written.
    """
    if count < 1 or count > SET_STRIDE:
        raise BenchError(f"scenario count must be in 1..{SET_STRIDE}")
    if master_seed < 0:
        raise BenchError("master seed must be non-negative")
    for name in sets:
        if name not in ALL_TIERS:
            raise BenchError(f"unknown test set {name!r}")
    seeds = {name: set_seeds(name, master_seed, count) for name in sets}
    if train_seeds is not None:
        lo, hi = train_seeds
        for name, ss in seeds.items():
            if ss[0] < hi and lo <= ss[-1]:
                raise BenchError(f"test set {name} seeds [{ss[0]}, {ss[-1]}] collide with training seeds [{lo}, {hi})")
    out = Path(out_dir)
    entries = {}
    for name, ss in seeds.items():
        env = ExploreEnv(replace(env_cfg, map=replace(env_cfg.map, tier=name)))
        (out / name).mkdir(parents=True, exist_ok=True)
        rows = []
        for i, s in enumerate(ss):
            env.reset(seed=s)
            truth = env.truth
            rel = f"{name}/{i:03d}.map"
            save_map(out / rel, truth)
            rows.append(asdict(Scenario(name, i, s, truth.tier, count_rooms(truth), rel,
                                        hashlib.sha256((out / rel).read_bytes()).hexdigest())))
        entries[name] = rows
        log.info("test set %s: %d scenarios", name, len(rows))
    body = {"format": "attnexplore-testset", "version": 1, "generator_version": GENERATOR_VERSION,
            "scale": scale, "master_seed": master_seed, "map": asdict(env_cfg.map), "sets": entries}
    manifest = {**body, "hash": _digest(body)}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(test_dir, verify: bool = True) -> dict:
    path = Path(test_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise BenchError(f"cannot read {path}: {exc}") from exc
    body = {k: v for k, v in manifest.items() if k != "hash"}
    if _digest(body) != manifest.get("hash"):
        raise BenchError(f"{path}: manifest hash mismatch")
    if verify:
        for rows in manifest["sets"].values():
            for r in rows:
                data = (Path(test_dir) / r["file"]).read_bytes()
                if hashlib.sha256(data).hexdigest() != r["sha256"]:
                    raise BenchError(f"{r['file']}: content does not match the manifest")
    return manifest


def scenarios(manifest: dict, name: str, limit: int | None = None) -> list[Scenario]:
    if name not in manifest["sets"]:
        raise BenchError(f"test set {name!r} not in manifest (have {', '.join(manifest['sets'])})")
    rows = [Scenario(**r) for r in manifest["sets"][name]]
    return rows[:limit] if limit else rows


# -- planners -----------------------------------------------------------------

def load_policy(path, net_cfg: NetConfig) -> PolicyNet:
    """Policy from a checkpoint; refuses (with a shape diff) if ``net_cfg`` does not match."""
    _, arrays = read_checkpoint(path)
    net = PolicyNet(net_cfg)
    load_module(net, arrays, "policy")
    net.eval()
    return net


def learned_planner(policy: PolicyNet):
    """Greedy (argmax) action of the policy, reported with separate observation/inference timings."""

    def plan(env):
        t0 = time.perf_counter()
        obs = env.observe()
        batch = collate([obs])
        t1 = time.perf_counter()
        with torch.no_grad():
            probs, _ = policy(batch)
        a = int(np.argmax(probs[0, :len(obs.neighbors)].numpy()))
        return B.PlannerVerdict(int(obs.neighbors[a]), scores={"obs_ms": (t1 - t0) * 1000})

    return plan


def random_planner(rng: np.random.Generator):
    def plan(env):
        nb = env.neighbors
        return B.PlannerVerdict(int(nb[rng.integers(len(nb))]))

    return plan


def make_planner(name: str, seed: int, policy: PolicyNet | None = None):
    """Planner callable for one episode; stochastic planners get a scenario-seeded stream."""
    rng = np.random.default_rng([seed, PLANNERS.index(name) if name in PLANNERS else 99])
    if name == "nearest":
        return B.nearest_frontier
    if name.startswith("util"):
        lam = float(name[4:])
        return lambda env: B.utility_frontier(env, lam)
    if name == "nbv":
        return lambda env: B.sampled_nbv(env, B.NbvParams(), rng)
    if name == "cov":
        return lambda env: B.coverage_local(env, 10, rng)
    if name == "random":
        return random_planner(rng)
    if name == "learned":
        if policy is None:
            raise BenchError("the learned planner needs a checkpoint")
        return learned_planner(policy)
    raise BenchError(f"unknown planner {name!r}")


def check_planner_names(names) -> None:
    for n in names:
        if n in PLANNERS:
            continue
        if n.startswith("util"):
            try:
                if float(n[4:]) > 0:
                    continue
            except ValueError:
                pass
        raise BenchError(f"unknown planner {n!r}; choose from {', '.join(PLANNERS)} or util<lambda>")


# -- evaluation ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_scenario(env: ExploreEnv, sc: Scenario, test_dir, planner_name: str, budget: int,
                 policy: PolicyNet | None = None) -> B.EpisodeRun:
    truth = load_map(Path(test_dir) / sc.file)
    env.reset(truth=truth)
    planner = make_planner(planner_name, sc.seed, policy)
    try:
        return B.run_episode(env, planner, budget)
    except EnvAbort as exc:
        return B.EpisodeRun(env.length, False, env.steps, env.rate, 0.0, 0.0, list(env.trajectory),
                            [], f"abort: {exc}")


def evaluate(test_dir, set_name: str, planners, out_csv, env_cfg: EnvConfig, budget: int = BUDGET,
             policy: PolicyNet | None = None, timing: bool = False, limit: int | None = None,
             curves: bool = True) -> list[dict]:
    """Run every planner on every scenario of ``set_name``; rows go to ``out_csv`` as they finish.

    Timing columns are left empty unless ``timing`` is set, so repeated runs
    produce identical files.
    """
    check_planner_names(planners)
    if "learned" in planners and policy is None:
        raise BenchError("the learned planner needs a checkpoint")
    manifest = load_manifest(test_dir)
    m = manifest["map"]
    if (m["width"], m["height"]) != (env_cfg.map.width, env_cfg.map.height):
        raise BenchError(f"test maps are {m['width']}x{m['height']}, config expects "
                         f"{env_cfg.map.width}x{env_cfg.map.height}")
    env = ExploreEnv(replace(env_cfg, max_steps=budget))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    curve_path = out_csv.with_name(out_csv.stem + "_curves.csv")
    rows = []
    with open(out_csv, "w", newline="") as fh, (open(curve_path, "w", newline="") if curves else _Null()) as ch:
        w = csv.DictWriter(fh, RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        cw = csv.writer(ch, lineterminator="\n") if curves else None
        if cw:
            cw.writerow(CURVE_FIELDS)
        for sc in scenarios(manifest, set_name, limit):
            for name in planners:
                run = run_scenario(env, sc, test_dir, name, budget, policy)
                row = {"set": set_name, "scenario": sc.index, "planner": name, "seed": sc.seed,
                       "length": _fmt(run.length), "completed": int(run.completed), "decisions": run.decisions,
                       "obs_ms": f"{run.obs_ms:.3f}" if timing else "",
                       "infer_ms": f"{run.infer_ms:.3f}" if timing else ""}
                w.writerow(row)
                fh.flush()
                if cw:
                    for length, rate in run.rates:
                        cw.writerow([set_name, sc.index, name, _fmt(length), _fmt(rate)])
                    ch.flush()
                rows.append(row)
                log.info("%s/%03d %-8s length %7.1f %s", set_name, sc.index, name, run.length,
                         "done" if run.completed else f"incomplete {run.reason}".strip())
    return rows


class _Null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


# -- comparison -----------------------------------------------------------------

def read_results(paths) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            r = csv.DictReader(fh)
            if r.fieldnames != RESULT_FIELDS:
                raise BenchError(f"{p}: unexpected columns {r.fieldnames}")
            for row in r:
                row["scenario"] = int(row["scenario"])
                row["seed"] = int(row["seed"])
                row["length"] = float(row["length"])
                row["completed"] = int(row["completed"])
                row["decisions"] = int(row["decisions"])
                rows.append(row)
    return rows


def planner_order(names) -> list[str]:
    def key(n):
        if n in PLANNERS:
            return (PLANNERS.index(n), 0.0, n)
        if n.startswith("util"):
            return (PLANNERS.index("util1"), float(n[4:]), n)
        return (len(PLANNERS), 0.0, n)

    return sorted(set(names), key=key)


@dataclass
class Summary:
    set: str
    planner: str
    n: int
    mean: float
    std: float
    completed: int
    wins: int
    ties: int


def summarize(rows: list[dict], tol: float = 1e-6) -> list[Summary]:
    """Mean and sample std of length per (set, planner), plus per-scenario wins.

    A scenario is a win for the single planner with the shortest length; if
    two or more share the minimum (within ``tol``) it counts as a tie for each
    of them instead.
    """
    by_set: dict[str, dict[str, dict[int, float]]] = {}
    done: dict[tuple, int] = {}
    for r in rows:
        table = by_set.setdefault(r["set"], {}).setdefault(r["planner"], {})
        if r["scenario"] in table:
            raise BenchError(f"duplicate result for {r['set']}/{r['scenario']} {r['planner']}")
        table[r["scenario"]] = r["length"]
        done[r["set"], r["planner"]] = done.get((r["set"], r["planner"]), 0) + r["completed"]
    out = []
    for s, per in by_set.items():
        names = planner_order(per)
        ref = sorted(per[names[0]])
        for n in names[1:]:
            if sorted(per[n]) != ref:
                raise BenchError(f"set {s}: planners {names[0]} and {n} ran different scenarios")
        wins = dict.fromkeys(names, 0)
        ties = dict.fromkeys(names, 0)
        if len(names) > 1:
            for sc in ref:
                lengths = {n: per[n][sc] for n in names}
                best = min(lengths.values())
                top = [n for n, v in lengths.items() if v <= best + tol]
                for n in top:
                    if len(top) == 1:
                        wins[n] += 1
                    else:
                        ties[n] += 1
        for n in names:
            v = np.array([per[n][sc] for sc in ref])
            std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            out.append(Summary(s, n, len(v), float(v.mean()), std, done[s, n], wins[n], ties[n]))
    return out


def format_table(summary: list[Summary]) -> str:
    """Markdown table: one row per set, one ``mean(±std)`` column per planner."""
    sets = [s for s in ALL_TIERS if any(x.set == s for x in summary)]
    sets += sorted({x.set for x in summary} - set(sets))
    names = planner_order(x.planner for x in summary)
    cell = {(x.set, x.planner): f"{x.mean:.0f}(±{x.std:.0f})" for x in summary}
    lines = ["| set | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for s in sets:
        lines.append(f"| {s} | " + " | ".join(cell.get((s, n), "-") for n in names) + " |")
    return "\n".join(lines) + "\n"


def read_curves(paths) -> dict:
    curves: dict[tuple, list] = {}
    for p in paths:
        if not Path(p).exists():
            continue
        with open(p, newline="") as fh:
            for r in csv.DictReader(fh):
                curves.setdefault((r["set"], r["planner"], int(r["scenario"])), []).append(
                    (float(r["length"]), float(r["rate"])))
    return curves


def mean_curve(episodes: list, grid: np.ndarray) -> np.ndarray:
    """Average exploration rate against distance; each episode holds its last rate afterwards."""
    acc = np.zeros_like(grid)
    for pts in episodes:
        d, r = np.array(pts).T
        acc += np.interp(grid, d, r, right=r[-1])
    return acc / max(len(episodes), 1)


def plot_curves(curves: dict, out_dir) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    for s in sorted({k[0] for k in curves}):
        keys = [k for k in curves if k[0] == s]
        top = max(curves[k][-1][0] for k in keys)
        grid = np.linspace(0.0, max(top, 1.0), 200)
        fig, ax = plt.subplots(figsize=(6, 4))
        for p in planner_order(k[1] for k in keys):
            ax.plot(grid, mean_curve([curves[k] for k in keys if k[1] == p], grid), label=p)
        ax.set_xlabel("distance travelled (cells)")
        ax.set_ylabel("exploration rate")
        ax.set_title(f"{s} set")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        path = Path(out_dir) / f"rate_vs_distance_{s}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        files.append(path)
    return files


def compare(result_paths, out_dir, plots: bool = True) -> list[Summary]:
    """Write ``summary.csv``, ``table.md`` and rate-vs-distance plots for the given result CSVs."""
    rows = read_results(result_paths)
    if not rows:
        raise BenchError("no result rows")
    summary = summarize(rows)
    if len({x.planner for x in summary}) < 2:
        log.warning("only one planner in the results; win counts are all zero")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "planner", "n", "mean", "std", "completed", "wins", "ties"])
        for x in summary:
            w.writerow([x.set, x.planner, x.n, _fmt(x.mean), _fmt(x.std), x.completed, x.wins, x.ties])
    (out / "table.md").write_text(format_table(summary))
    if plots:
        curve_files = [Path(p).with_name(Path(p).stem + "_curves.csv") for p in result_paths]
        curves = read_curves(curve_files)
        if curves:
            plot_curves(curves, out)
    return summary

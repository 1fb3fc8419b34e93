"""Command line entry point: ``attnexplore <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as C
from .bench import TEST_SEED_BASE, BenchError
from .neural import CheckpointError
from .gridmap import MapFormatError
from .render import RenderError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

# map seeds: training episodes use [seed * TRAIN_STRIDE, ...), test sets start at TEST_SEED_BASE
TRAIN_STRIDE = 100_000

log = logging.getLogger("attnexplore")


class ValidationError(ValueError):
    pass


def train_seed_base(seed: int, episodes: int) -> int:
    base = seed * TRAIN_STRIDE
    if seed < 0 or base + episodes > TEST_SEED_BASE or episodes > TRAIN_STRIDE:
        raise ValidationError(f"training seeds [{base}, {base + episodes}) collide with the test seed range")
    return base


def cmd_train(args, run: C.RunConfig) -> int:
    from .sac import Trainer, train

    sac = run.sac
    if args.episodes is not None:
        sac = C.replace(sac, episodes=args.episodes)
    sac = C.replace(sac, seed=args.seed)
    base = train_seed_base(args.seed, sac.episodes)
    run = C.RunConfig(run.env, run.net, sac, run.preset)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(C.to_dict(run), fh, indent=2, sort_keys=True)
    trainer = Trainer(run.env, run.net, sac)
    train(trainer, args.out, seed_base=base, resume=args.resume)
    log.info("done: %d episodes, %d updates", trainer.episodes, trainer.step)
    return EXIT_OK


def cmd_gen_maps(args, run: C.RunConfig) -> int:
    from .bench import gen_test_sets

    sets = args.sets.split(",")
    lo = args.train_seed * TRAIN_STRIDE
    manifest = gen_test_sets(args.out, run.env, args.seed, sets, args.count,
                             train_seeds=(lo, lo + run.sac.episodes), scale=run.preset)
    print(manifest["hash"])
    return EXIT_OK


def cmd_eval(args, run: C.RunConfig) -> int:
    from .bench import evaluate, load_policy

    planners = args.planners.split(",")
    policy = load_policy(args.checkpoint, run.net) if args.checkpoint else None
    out = args.csv or os.path.join(args.out, f"results_{args.set}.csv")
    rows = evaluate(args.tests, args.set, planners, out, run.env, args.budget, policy,
                    timing=args.timing, limit=args.limit)
    done = sum(int(r["completed"]) for r in rows)
    log.info("wrote %d rows to %s (%d completed)", len(rows), out, done)
    return EXIT_OK


def cmd_compare(args, run: C.RunConfig) -> int:
    from .bench import compare, format_table

    summary = compare(args.results, args.out, plots=not args.no_plots)
    sys.stdout.write(format_table(summary))
    for x in summary:
        print(f"{x.set:8s} {x.planner:8s} n={x.n} completed={x.completed} wins={x.wins} ties={x.ties}")
    return EXIT_OK


def cmd_render(args, run: C.RunConfig) -> int:
    from .env import ExploreEnv, read_replay
    from .gridmap import load_map
    from .render import render_episode

    truth = load_map(args.map)
    if (truth.width, truth.height) != (run.env.map.width, run.env.map.height):
        raise ValidationError(f"map is {truth.width}x{truth.height}, config expects "
                              f"{run.env.map.width}x{run.env.map.height}")
    if args.replay:
        rows = read_replay(args.replay)
    else:
        from .bench import make_planner
        from .baselines import run_episode

        env = ExploreEnv(C.replace(run.env, max_steps=args.budget))
        env.reset(truth=truth)
        run_episode(env, make_planner(args.planner, args.seed))
        rows = env.log
        os.makedirs(args.out, exist_ok=True)
        env.write_replay(os.path.join(args.out, "replay.csv"))
    image = args.image or os.path.join(args.out, "episode.png")
    os.makedirs(os.path.dirname(os.path.abspath(image)), exist_ok=True)
    _, segments = render_episode(truth, rows, run.env.sensor, image, args.scale, args.step,
                                 run.env.node_count if args.graph else None, run.env.k)
    log.info("wrote %s (%d segments)", image, segments)
    return EXIT_OK


def cmd_inspect(args, run: C.RunConfig) -> int:
    from .neural import PolicyNet, load_module, read_checkpoint

    manifest, arrays = read_checkpoint(args.checkpoint)
    groups: dict[str, int] = {}
    for e in manifest["tensors"]:
        top = e["name"].split("/")[0]
        n = 1
        for d in e["shape"]:
            n *= d
        groups[top] = groups.get(top, 0) + n
    info = {"format": manifest.get("format"), "version": manifest.get("version"), "dtype": manifest.get("dtype"),
            "tensors": len(manifest["tensors"]), "parameters": groups,
            "state": {k: v for k, v in manifest["state"].items() if k in ("step", "episodes", "log_alpha", "net")}}
    print(json.dumps(info, indent=2, sort_keys=True))
    if args.check:
        load_module(PolicyNet(run.net), arrays, "policy")
        print("policy matches the configured network")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnexplore", description=__doc__)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--preset", choices=C.PRESETS, default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the attention policy with discrete SAC")
    t.add_argument("--episodes", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gen-maps", help="generate the frozen test sets (--seed is the master seed)")
    g.add_argument("--sets", default="easy,medium,complex,random")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--train-seed", type=int, default=0, help="training seed whose map range must not overlap")
    g.set_defaults(func=cmd_gen_maps)

    e = sub.add_parser("eval", help="run planners on a test set")
    e.add_argument("--tests", required=True, help="test set directory (from gen-maps)")
    e.add_argument("--set", required=True)
    e.add_argument("--planners", default="nearest,util1,util10,util25,nbv,cov")
    e.add_argument("--checkpoint", help="policy checkpoint for the 'learned' planner")
    e.add_argument("--budget", type=int, default=1024, help="decision budget per episode")
    e.add_argument("--limit", type=int, help="only the first N scenarios")
    e.add_argument("--csv", help="results file (default: OUT/results_SET.csv)")
    e.add_argument("--timing", action="store_true", help="fill the obs_ms/infer_ms columns")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="summary table, win counts and plots from result CSVs")
    c.add_argument("results", nargs="+")
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("render", help="draw an episode from a map and a replay log")
    r.add_argument("--map", required=True)
    r.add_argument("--replay", help="replay CSV; without it the --planner is run on the map first")
    r.add_argument("--planner", default="nearest")
    r.add_argument("--budget", type=int, default=1024)
    r.add_argument("--image", help="output PNG (default: OUT/episode.png)")
    r.add_argument("--step", type=int, help="draw the state after this step")
    r.add_argument("--scale", type=int, default=2)
    r.add_argument("--graph", action="store_true", help="draw roadmap edges")
    r.set_defaults(func=cmd_render)

    i = sub.add_parser("inspect-ckpt", help="summarise a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--check", action="store_true", help="verify the policy against the configured network")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        run = C.load(args.config, args.preset)
        return args.func(args, run)
    except (ValidationError, C.ConfigError, BenchError, CheckpointError, RenderError, MapFormatError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # anything else is a runtime failure
        log.exception("failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

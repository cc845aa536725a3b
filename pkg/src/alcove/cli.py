"""Command line interface.

    alcove gen    --level L --seeds A..B --out DIR
    alcove run    --scene F --method M --seed S [--no-near-field]
                  [--no-grasp-constraints] [--debug-dumps DIR] [--out F]
    alcove bench  --scenes DIR --methods m1,m2 --seeds A..B --trials N
                  --out DIR [--jobs J]
    alcove report --in DIR --out PREFIX

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .bench import run_bench, write_report
from .config import ConfigError, load_config
from .episode import METHODS, run_episode
from .scenes import SceneGenerationError, SceneParseError, generate_scene, load_scene, save_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def parse_seed_range(text: str) -> list[int]:
    """'3' -> [3]; '0..4' -> [0,1,2,3,4]; '1,5,9' -> [1,5,9]."""
    text = text.strip()
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty seed range '{text}'")
        return list(range(lo, hi + 1))
    if "," in text:
        return [int(x) for x in text.split(",")]
    return [int(text)]


def build_parser() -> _Parser:
    p = _Parser(prog="alcove",
                description="confined-space exploration and grasping bench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate benchmark scenes")
    g.add_argument("--level", type=int, required=True, choices=(1, 2, 3, 4))
    g.add_argument("--seeds", required=True, help="A..B inclusive, or list")
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run one episode")
    r.add_argument("--scene", required=True)
    r.add_argument("--method", required=True,
                   type=str.lower, choices=METHODS)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--config")
    r.add_argument("--no-near-field", action="store_true",
                   help="disable the near-field awareness scan")
    r.add_argument("--no-grasp-constraints", action="store_true",
                   help="disable the constrained grasp selection")
    r.add_argument("--debug-dumps", metavar="DIR",
                   help="write depth frames and tree dumps here")
    r.add_argument("--out", help="write the run log JSON here")

    b = sub.add_parser("bench", help="run a scene/method/seed sweep")
    b.add_argument("--scenes", required=True, help="directory of scene JSON")
    b.add_argument("--methods", required=True,
                   help="comma-separated subset of " + ",".join(METHODS))
    b.add_argument("--seeds", required=True)
    b.add_argument("--trials", type=int, default=1)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--no-near-field", action="store_true")
    b.add_argument("--no-grasp-constraints", action="store_true")

    rep = sub.add_parser("report", help="aggregate a bench output directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--out", required=True, help="output CSV prefix")
    return p


def _load_cfg(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "no_near_field", False):
        cfg.runner.near_field_scan = False
    if getattr(args, "no_grasp_constraints", False):
        cfg.runner.grasp_constraints = False
    return cfg


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in parse_seed_range(args.seeds):
        scene = generate_scene(args.level, seed)
        path = out / f"level{args.level}_seed{seed:04d}.json"
        save_scene(scene, path)
        print(path)
    return 0


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    scene = load_scene(args.scene)
    metrics, log = run_episode(scene, args.method, cfg, args.seed,
                               debug_dir=args.debug_dumps)
    if args.out:
        Path(args.out).write_text(json.dumps(log, sort_keys=True))
    summary = {k: v for k, v in asdict(metrics).items() if k != "coverage_curve"}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            print(f"error: unknown method '{m}'", file=sys.stderr)
            return 1
    scene_dir = Path(args.scenes)
    paths = sorted(scene_dir.glob("*.json"))
    if not paths:
        print(f"error: no scene files in {scene_dir}", file=sys.stderr)
        return 1
    rows = run_bench(paths, methods, parse_seed_range(args.seeds),
                     args.trials, cfg, args.out, jobs=args.jobs)
    print(f"{len(rows)} episodes -> {args.out}")
    return 0


def cmd_report(args) -> int:
    write_report(args.in_dir, args.out)
    print(f"report -> {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"gen": cmd_gen, "run": cmd_run,
                "bench": cmd_bench, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (ConfigError, SceneParseError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SceneGenerationError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

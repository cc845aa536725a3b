"""Batch benchmarking: scene x method x seed sweeps, per-episode JSONL,
and aggregate tables (plus coverage-curve resampling for plotting).

Episodes are independent and may run in a process pool; outputs are sorted
by (scene, method, seed, trial) so the JSONL is byte-identical regardless
of worker count.
"""

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import Config
from .episode import run_episode
from .scenes import load_scene

AGG_FIELDS = ("tft", "pft", "mpsr", "am", "gpq")


def effective_seed(seed: int, trial: int) -> int:
    """Trial 0 keeps the raw seed so single-trial runs match `run`."""
    return seed if trial == 0 else seed + 100003 * trial


def _episode_task(args):
    scene_path, method, seed, trial, config = args
    scene = load_scene(scene_path)
    metrics, log = run_episode(scene, method, config, effective_seed(seed, trial))
    row = {
        "scene": Path(scene_path).stem,
        "level": scene.level,
        "scene_seed": scene.seed,
        "method": method,
        "seed": seed,
        "trial": trial,
        "reason": log["final"]["reason"],
        **asdict(metrics),
    }
    row["coverage_curve"] = [[float(t), float(c)] for t, c in row["coverage_curve"]]
    return row


def run_bench(scene_paths: list[str | Path], methods: list[str],
              seeds: list[int], trials: int, config: Config,
              out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """Run the full cross product and write episodes.jsonl + summary.csv.

    Per-episode failures inside the pipeline surface as failed episodes,
    never abort the batch; hard errors (bad scene file) do abort.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(str(p), m, s, t, config)
             for p in sorted(str(x) for x in scene_paths)
             for m in methods
             for s in seeds
             for t in range(max(trials, 1))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_episode_task, tasks))
    else:
        rows = [_episode_task(t) for t in tasks]
    rows.sort(key=lambda r: (r["scene"], r["method"], r["seed"], r["trial"]))
    with open(out_dir / "episodes.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    agg = aggregate(rows)
    write_summary_csv(agg, out_dir / "summary.csv")
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean metrics and success rate per (level, method)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["level"], r["method"]), []).append(r)
    out = []
    for (level, method) in sorted(groups):
        g = groups[(level, method)]
        rec = {"level": level, "method": method, "episodes": len(g)}
        for f in AGG_FIELDS:
            rec[f"{f}_mean"] = float(np.mean([r[f] for r in g]))
        rec["sr"] = float(np.mean([1.0 if r["success"] else 0.0 for r in g]))
        rec["dsr"] = float(np.mean([1.0 if r["detected"] else 0.0 for r in g]))
        out.append(rec)
    return out


def write_summary_csv(agg: list[dict], path: str | Path) -> None:
    cols = ["level", "method", "episodes",
            *[f"{f}_mean" for f in AGG_FIELDS], "sr", "dsr"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for rec in agg:
            w.writerow(rec)


def load_episode_rows(in_dir: str | Path) -> list[dict]:
    path = Path(in_dir) / "episodes.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no episodes.jsonl under {in_dir}")
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def coverage_table(rows: list[dict], step: float = 5.0) -> list[dict]:
    """Coverage curves resampled on a shared time grid as step functions,
    with mean and stddev per (level, method, time)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["level"], r["method"]), []).append(r)
    out = []
    for (level, method) in sorted(groups):
        g = groups[(level, method)]
        t_max = max((r["tft"] for r in g), default=0.0)
        t_max = max(t_max, max((c[-1][0] for r in g if (c := r["coverage_curve"])),
                               default=0.0))
        grid = np.arange(0.0, t_max + step, step)
        samples = np.zeros((len(g), len(grid)))
        for i, r in enumerate(g):
            curve = r["coverage_curve"]
            val = 0.0
            ci = 0
            for j, t in enumerate(grid):
                while ci < len(curve) and curve[ci][0] <= t + 1e-9:
                    val = curve[ci][1]
                    ci += 1
                samples[i, j] = val
        for j, t in enumerate(grid):
            out.append({"level": level, "method": method, "t": float(t),
                        "coverage_mean": float(samples[:, j].mean()),
                        "coverage_std": float(samples[:, j].std())})
    return out


def write_report(in_dir: str | Path, out_prefix: str | Path) -> None:
    """Aggregate CSV plus coverage-curve CSV from a bench output directory."""
    rows = load_episode_rows(in_dir)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    write_summary_csv(aggregate(rows), out_prefix.with_suffix(".csv"))
    cov = coverage_table(rows)
    cov_path = out_prefix.parent / (out_prefix.stem + "_coverage.csv")
    with open(cov_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["level", "method", "t",
                                           "coverage_mean", "coverage_std"])
        w.writeheader()
        for rec in cov:
            w.writerow(rec)

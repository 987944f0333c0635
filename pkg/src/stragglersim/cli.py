"""Command line interface.

Subcommands:

* ``simulate``: run one trace under its per-job policies (or an override).
* ``compare``: run the same trace once per policy, same seed, one CSV.
* ``sweep``: pin an all-reduce wait-window and sweep it over a grid.
* ``decide``: rank synchronization modes for a saved prediction snapshot.

Input problems are reported as a JSON object on stderr and exit code 2, so
scripted callers can tell bad inputs from crashes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .decisions import (
    ADAPTIVE_POLICIES,
    BASELINE_POLICIES,
    DEFAULT_TW_GRID,
    mode_label,
    rank_mode_candidates,
)
from .domain import ALL_REDUCE, ARRemoval, DomainError, WorldValidationError
from .engine import EngineConfig, run_simulation
from . import io as sio


def _fail(message: str, details: list[str] | None = None) -> int:
    payload: dict = {"error": message}
    if details:
        payload["details"] = details
    print(json.dumps(payload), file=sys.stderr)
    return 2


def _grid(text: str) -> tuple[float, ...]:
    """start:stop:step inclusive, or a comma list."""
    if ":" in text:
        start_s, stop_s, step_s = text.split(":")
        start, stop, step = float(start_s), float(stop_s), float(step_s)
        if step <= 0:
            raise ValueError("step must be positive")
        values = []
        k = 0
        while True:
            v = round(start + k * step, 9)
            if v > stop + 1e-12:
                break
            values.append(v)
            k += 1
        return tuple(values)
    return tuple(float(v) for v in text.split(","))


def _add_world_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trace", required=True, help="job trace CSV")
    parser.add_argument("--cluster", required=True, help="cluster JSON")
    parser.add_argument("--calib", required=True, help="model calibration JSON")
    parser.add_argument("--perturb", help="perturbation JSON")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--horizon", type=float, default=7200.0, help="sim seconds")


def _build_config(args: argparse.Namespace, **overrides) -> EngineConfig:
    kwargs = dict(horizon_s=args.horizon)
    if getattr(args, "timing", None):
        kwargs["timing"] = args.timing
    kwargs.update(overrides)
    return EngineConfig(**kwargs)


def _load_inputs(args: argparse.Namespace):
    world = sio.load_world(args.cluster, args.calib, args.trace)
    perturbations = ()
    if args.perturb:
        perturbations = sio.load_perturbations(args.perturb)
    return world, perturbations


def _cmd_simulate(args: argparse.Namespace) -> int:
    world, perturbations = _load_inputs(args)
    config = _build_config(args)
    run = run_simulation(
        world, perturbations, policy=args.policy, seed=args.seed, config=config
    )
    text = sio.run_to_json(run)
    if args.out:
        sio.write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.rows:
        sio.write_text(args.rows, sio.metrics_rows_csv([run]))
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    world, perturbations = _load_inputs(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        return _fail("no policies given")
    config = _build_config(args)
    runs = []
    for policy in policies:
        runs.append(
            run_simulation(world, perturbations, policy=policy, seed=args.seed, config=config)
        )
    csv_text = sio.metrics_rows_csv(runs)
    if args.out:
        sio.write_text(args.out, csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.json_dir:
        directory = Path(args.json_dir)
        directory.mkdir(parents=True, exist_ok=True)
        for policy, run in zip(policies, runs):
            sio.write_text(directory / f"{policy}.json", sio.run_to_json(run))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    world, perturbations = _load_inputs(args)
    if any(job.architecture != ALL_REDUCE for job in world.jobs):
        return _fail("sweep pins an all-reduce wait window; trace must be all-reduce jobs")
    grid = _grid(args.tw_grid)
    lines = ["t_w,job_id,tta_s,jct_s,progress,update_count"]
    for t_w in grid:
        config = _build_config(args, pinned_mode=ARRemoval(args.x, t_w))
        run = run_simulation(world, perturbations, seed=args.seed, config=config)
        for job in run.jobs:
            lines.append(
                ",".join(
                    [
                        sio.fmt_float(t_w),
                        job.job_id,
                        sio.fmt_float(job.tta_s),
                        sio.fmt_float(job.jct_s),
                        sio.fmt_float(job.progress),
                        str(job.update_count),
                    ]
                )
            )
    text = "\n".join(lines) + "\n"
    if args.out:
        sio.write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_decide(args: argparse.Namespace) -> int:
    snapshot = sio.snapshot_from_json(Path(args.snapshot).read_text())
    grid = _grid(args.tw_grid) if args.tw_grid else DEFAULT_TW_GRID
    candidates = rank_mode_candidates(snapshot, grid)
    payload = {
        "chosen": mode_label(candidates[0].mode),
        "est_time_s": candidates[0].est_time,
        "candidates": [
            {"mode": mode_label(c.mode), "est_time_s": c.est_time} for c in candidates
        ],
    }
    text = json.dumps(payload, indent=1) + "\n"
    if args.out:
        sio.write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stragglersim",
        description="Deterministic simulator for straggler mitigation in "
        "distributed training clusters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one trace")
    _add_world_args(sim)
    sim.add_argument(
        "--policy",
        help="override every job's policy; one of "
        + ", ".join(BASELINE_POLICIES + ADAPTIVE_POLICIES)
        + ", or static-<x>",
    )
    sim.add_argument("--timing", choices=["pause", "overlap", "lookahead"])
    sim.add_argument("--out", help="structured JSON output path (default stdout)")
    sim.add_argument("--rows", help="also write a one-row-per-job CSV here")
    sim.set_defaults(fn=_cmd_simulate)

    cmp_ = sub.add_parser("compare", help="same trace and seed, one run per policy")
    _add_world_args(cmp_)
    cmp_.add_argument("--policies", required=True, help="comma separated policy names")
    cmp_.add_argument("--timing", choices=["pause", "overlap", "lookahead"])
    cmp_.add_argument("--out", help="CSV output path (default stdout)")
    cmp_.add_argument("--json-dir", help="also write per-policy structured JSON here")
    cmp_.set_defaults(fn=_cmd_compare)

    sweep = sub.add_parser("sweep", help="sweep the all-reduce wait window")
    _add_world_args(sweep)
    sweep.add_argument("--x", type=int, required=True, help="workers moved off the ring")
    sweep.add_argument(
        "--tw-grid",
        default="0.03:0.21:0.03",
        help="start:stop:step seconds, or comma list",
    )
    sweep.add_argument("--out", help="CSV output path (default stdout)")
    sweep.set_defaults(fn=_cmd_sweep)

    dec = sub.add_parser("decide", help="rank modes for a prediction snapshot")
    dec.add_argument("--snapshot", required=True, help="snapshot JSON path")
    dec.add_argument("--tw-grid", help="wait-window grid for all-reduce candidates")
    dec.add_argument("--out", help="JSON output path (default stdout)")
    dec.set_defaults(fn=_cmd_decide)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except WorldValidationError as exc:
        return _fail("invalid world", list(exc.errors))
    except sio.TraceParseError as exc:
        return _fail("invalid trace", [f"line {n}: {m}" for n, m in exc.problems])
    except (DomainError, ValueError) as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(f"io error: {exc}")


if __name__ == "__main__":
    sys.exit(main())

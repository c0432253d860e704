"""Command-line entry point: ``edge-placer {place,train,simulate,bench,gen-scenario}``.

Exit codes: 0 success, 1 infeasible, 2 bad input, 3 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .application import WORKLOAD_COMPOSITIONS, Application, Workload, build_workload, load_application, \
    parse_workload, drone_application
from .atomic import atomic_write_text
from .costs import ScoreWeights
from .errors import DivergenceError, InfeasibleError, PlacerError
from .fixtures import drone_topology
from .harness import (ALGORITHMS, determinism_check, latency_csv, metrics_csv, run_all, run_scenario,
                      strictest, transition_run)
from .placement import load_placement
from .rlsp_agent import AgentConfig, load_checkpoint, save_checkpoint, train
from .rlsp_env import MAX_STEPS
from .topology import NetworkGraph, load_topology

log = logging.getLogger("edge_placer")

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3
LOG_ENV = "EDGE_PLACER_LOG"


class InputError(Exception):
    """Bad command-line input (missing file, malformed value)."""


def _setup_logging():
    level = os.environ.get(LOG_ENV, "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p


def _load_inputs(args) -> tuple[NetworkGraph, Application]:
    g = load_topology(_existing(args.topology)) if args.topology else drone_topology()
    app = load_application(_existing(args.app)) if args.app else drone_application()
    return g, app


def _workload(spec: str, app: Application) -> Workload:
    if spec in WORKLOAD_COMPOSITIONS:
        return build_workload(app, WORKLOAD_COMPOSITIONS[spec], spec)
    return parse_workload(_existing(spec).read_text(), app)


def _workloads(args, app: Application, default: list[str]) -> list[Workload]:
    return [_workload(w, app) for w in (args.workload or default)]


def _agent_config(args) -> AgentConfig:
    cfg = AgentConfig()
    if getattr(args, "episodes", None) is not None:
        if args.episodes < 0:
            raise InputError("--episodes must be >= 0")
        cfg = dataclasses.replace(cfg, total_steps=args.episodes * MAX_STEPS)
    return cfg


def _weights(args) -> ScoreWeights | None:
    return ScoreWeights.parse(args.weights) if args.weights else None


def _policy(args, g, app, workload, cfg):
    """Load ``--checkpoint`` when it exists, otherwise train (and save there if given)."""
    ck = getattr(args, "checkpoint", None)
    if ck and Path(ck).is_file():
        params, _, meta = load_checkpoint(ck)
        log.info("loaded checkpoint %s (%d steps)", ck, meta.get("steps", 0))
        return params
    res = train(g, app, workload, cfg, seed=args.seed)
    if ck:
        save_checkpoint(ck, res.params, cfg, args.seed, res.steps)
    return res.params


# ---------------------------------------------------------------------------
# subcommands


def cmd_place(args) -> int:
    g, app = _load_inputs(args)
    workloads = _workloads(args, app, ["W1"])
    if len(workloads) != 1:
        raise InputError("place takes exactly one --workload")
    w = workloads[0]
    prev = load_placement(_existing(args.prev)) if args.prev else None
    cfg = _agent_config(args)
    params = _policy(args, g, app, w, cfg) if args.algo == "rlsp" else None
    p, rep = run_scenario(args.algo, g, app, w, args.seed, _weights(args), prev, cfg, params)
    rep.extra.pop("params", None)
    out = Path(args.out)
    doc = dict(p.to_document(), algo=args.algo, workload=w.id, seed=args.seed, hash=p.digest(),
               coverage_pct=rep.coverage_pct)
    atomic_write_text(out / "placement.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "metrics.csv", metrics_csv([rep]))
    atomic_write_text(out / "latency.csv", latency_csv([rep]))
    print(f"{args.algo} {w.id}: {rep.instance_count} instances, coverage {rep.coverage_pct:.1f}%")
    return EXIT_OK if rep.coverage_pct >= 100.0 - 1e-9 else EXIT_INFEASIBLE


def cmd_train(args) -> int:
    if not args.checkpoint:
        raise InputError("train needs --checkpoint")
    g, app = _load_inputs(args)
    workloads = _workloads(args, app, ["W3"])
    w = strictest(workloads)
    cfg = _agent_config(args)
    res = train(g, app, w, cfg, seed=args.seed, checkpoint=args.checkpoint)
    print(f"trained {res.steps} steps on {w.id}; checkpoint {args.checkpoint}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    g, app = _load_inputs(args)
    workloads = _workloads(args, app, list(WORKLOAD_COMPOSITIONS))
    cfg = _agent_config(args)
    params = None
    if args.algo == "rlsp":
        params = _policy(args, g, app, strictest(workloads), cfg)
    trace = transition_run(args.algo, g, app, workloads, seed=args.seed, weights=_weights(args),
                           agent_config=cfg, params=params)
    atomic_write_text(Path(args.out) / "transition.csv", trace.to_csv())
    for b in trace.boundaries[1:]:
        print(f"{args.algo} tick {b}: dip {trace.dip_at(b):.1f}%")
    return EXIT_OK


def cmd_bench(args) -> int:
    g, app = _load_inputs(args)
    workloads = _workloads(args, app, list(WORKLOAD_COMPOSITIONS))
    algos = [args.algo] if args.algo else ["wssp", "misp"]
    cfg = _agent_config(args)
    params = _policy(args, g, app, strictest(workloads), cfg) if "rlsp" in algos else None
    reports = []
    for run in range(args.runs):
        for rep in run_all(g, app, workloads, algos, args.seed, _weights(args), cfg, jobs=args.jobs, params=params):
            rep.run = run
            reports.append(rep)
    lines = []
    for algo in algos:
        if algo == "rlsp":
            continue
        for w in workloads:
            d = determinism_check(algo, g, app, w, k_runs=max(2, args.runs), weights=_weights(args))
            lines.append(f"{algo} {w.id}: deterministic={d.identical} hash={d.hashes[0][:12]}")
    atomic_write_text(Path(args.out) / "metrics.csv", metrics_csv(reports))
    atomic_write_text(Path(args.out) / "latency.csv", latency_csv([r for r in reports if r.run == 0]))
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_gen_scenario(args) -> int:
    out = Path(args.out)
    app = drone_application()
    atomic_write_text(out / "topology.json", json.dumps(drone_topology().to_document(), indent=2) + "\n")
    atomic_write_text(out / "app.json", json.dumps(app.to_document(), indent=2) + "\n")
    for wid, comp in WORKLOAD_COMPOSITIONS.items():
        doc = build_workload(app, comp, wid).to_document()
        atomic_write_text(out / f"{wid}.json", json.dumps(doc, indent=2) + "\n")
    print(f"wrote drone scenario to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--topology", metavar="PATH", help="topology JSON (default: bundled drone topology)")
    common.add_argument("--app", metavar="PATH", help="application JSON (default: bundled drone application)")
    common.add_argument("--workload", action="append", metavar="{W1|W2|W3|PATH}",
                        help="bundled workload id or workload JSON; repeat for simulate/bench")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", metavar="DIR", default="out")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")

    algo = argparse.ArgumentParser(add_help=False)
    algo.add_argument("--weights", metavar="a1,a2,a3,a4,a5", help="WSSP score weights")

    agent = argparse.ArgumentParser(add_help=False)
    agent.add_argument("--checkpoint", metavar="PATH")
    agent.add_argument("--episodes", type=int, help=f"training budget in {MAX_STEPS}-step episodes")

    ap = argparse.ArgumentParser(prog="edge-placer", description="Latency-aware microservice placement at the edge.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("place", parents=[common, algo, agent], help="place one workload")
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--prev", metavar="PATH", help="previous placement.json (relocation-aware)")
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("train", parents=[common, agent], help="train the RL agent and save a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", parents=[common, algo, agent], help="replay workload transitions")
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", parents=[common, algo, agent], help="repeat runs: determinism and timing")
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-scenario", parents=[common], help="write the bundled drone scenario as JSON")
    p.set_defaults(func=cmd_gen_scenario)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (InputError, PlacerError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.debug("unhandled", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

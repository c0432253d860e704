#!/usr/bin/env python3
"""Run every algorithm on W1-W3 of the drone scenario and replay the W1->W2->W3 transitions.

Writes metrics.csv, latency.csv and transition_<algo>.csv under --out and
prints one summary line per (algorithm, workload).
"""
import argparse
import logging
from pathlib import Path

from edge_placer.atomic import atomic_write_text
from edge_placer.fixtures import drone_scenario
from edge_placer.harness import latency_csv, metrics_csv, run_all, strictest, transition_run
from edge_placer.rlsp_agent import AgentConfig, load_checkpoint, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--algos", default="wssp,misp,rlsp")
    ap.add_argument("--checkpoint", help="pretrained agent; trained on W3 when absent")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    g, app, ws = drone_scenario()
    workloads = [ws[w] for w in ("W1", "W2", "W3")]
    algos = tuple(args.algos.split(","))
    params = None
    if "rlsp" in algos:
        if args.checkpoint and Path(args.checkpoint).is_file():
            params = load_checkpoint(args.checkpoint)[0]
        else:
            params = train(g, app, strictest(workloads), AgentConfig(), seed=args.seed,
                           checkpoint=args.checkpoint).params

    reports = run_all(g, app, workloads, algos, args.seed, jobs=args.jobs, params=params)
    out = Path(args.out)
    atomic_write_text(out / "metrics.csv", metrics_csv(reports))
    atomic_write_text(out / "latency.csv", latency_csv(reports))
    for r in reports:
        print(f"{r.algo:5s} {r.workload}: {r.instance_count:3d} instances (paper {r.paper_count}), "
              f"coverage {r.coverage_pct:.1f}%, cost {r.cost:.3f}, {r.wall_ms:.1f} ms")

    for algo in algos:
        trace = transition_run(algo, g, app, workloads, seed=args.seed, params=params)
        atomic_write_text(out / f"transition_{algo}.csv", trace.to_csv())
        dips = ", ".join(f"tick {b}: {trace.dip_at(b):.1f}%" for b in trace.boundaries[1:])
        print(f"{algo:5s} transition dips {dips}")


if __name__ == "__main__":
    main()

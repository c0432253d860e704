#!/usr/bin/env python3
"""Train the placement agent on the strictest drone workload and save a checkpoint.

Logs the greedy evaluation after every few updates; pass --steps to change
the sample budget and --no-early-stop to use all of it.
"""
import argparse
import dataclasses
import logging
import time

from edge_placer.fixtures import drone_scenario
from edge_placer.placement import coverage
from edge_placer.rlsp_agent import AgentConfig, greedy_rollout, train
from edge_placer.rlsp_env import PlacementEnv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=AgentConfig().total_steps)
    ap.add_argument("--workload", default="W3")
    ap.add_argument("--checkpoint", default="agent.json")
    ap.add_argument("--no-early-stop", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    g, app, ws = drone_scenario()
    w = ws[args.workload]
    cfg = dataclasses.replace(AgentConfig(), total_steps=args.steps, stop_on_full_coverage=not args.no_early_stop)
    t0 = time.perf_counter()
    res = train(g, app, w, cfg, seed=args.seed, checkpoint=args.checkpoint)
    ex = greedy_rollout(PlacementEnv(g, app, w), res.params)
    for wid, wl in sorted(ws.items()):
        print(f"{wid}: coverage {coverage(g, ex.placement, app, wl).coverage_pct:.1f}%")
    print(f"{res.steps} steps in {time.perf_counter() - t0:.0f}s, converged={res.converged}, "
          f"{ex.placement.instance_count} instances after {ex.changes} changes; saved {args.checkpoint}")


if __name__ == "__main__":
    main()

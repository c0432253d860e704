"""Experiment runner: per-workload metrics, workload transitions, determinism checks."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .application import Application, Workload
from .costs import ScoreWeights, deployment_cost
from .errors import ContractError, InfeasibleError
from .misp import misp_place
from .placement import Placement, coverage, validate_placement
from .rlsp_agent import AgentConfig, PolicyParameters, greedy_rollout, train
from .rlsp_env import PlacementEnv
from .topology import NetworkGraph
from .wssp import wssp_place

log = logging.getLogger(__name__)

ALGORITHMS = ("wssp", "misp", "rlsp")
DEPLOY_DELAY_TICKS = 5
TICKS_PER_PHASE = 100

# Instance counts reported for the original testbed; kept as annotations only.
PAPER_COUNTS = {
    "wssp": {"W1": 34, "W2": 38, "W3": 42},
    "misp": {"W1": 36, "W2": 40, "W3": 44},
    "rlsp": {"W1": 23, "W2": 23, "W3": 23},
}

METRICS_HEADER = ["algo", "workload", "run", "seed", "instances", "coverage_pct", "cost", "wall_ms", "hash"]
LATENCY_HEADER = ["algo", "workload", "bs", "chain", "latency_ms", "limit_ms", "accessible"]
TRANSITION_HEADER = ["tick", "workload", "access_pct", "instances"]


@dataclass
class MetricsReport:
    algo: str
    workload: str
    seed: int
    instance_count: int
    per_site: dict[str, int]
    contribution_pct: dict[str, float]
    coverage_pct: float
    latency_table: list[tuple[str, str, float, float, bool]]
    cost: float
    wall_ms: float
    placement_hash: str
    run: int = 0
    paper_count: int | None = None
    extra: dict = field(default_factory=dict)

    def metrics_row(self) -> list:
        return [self.algo, self.workload, self.run, self.seed, self.instance_count,
                f"{self.coverage_pct:.4f}", f"{self.cost:.6f}", f"{self.wall_ms:.3f}", self.placement_hash]

    def latency_rows(self) -> list[list]:
        return [[self.algo, self.workload, b, c, repr(lat), repr(lim), int(ok)]
                for b, c, lat, lim, ok in self.latency_table]


def _rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def metrics_csv(reports: Sequence[MetricsReport]) -> str:
    return _rows_to_csv(METRICS_HEADER, [r.metrics_row() for r in reports])


def latency_csv(reports: Sequence[MetricsReport]) -> str:
    return _rows_to_csv(LATENCY_HEADER, [row for r in reports for row in r.latency_rows()])


def evaluate(algo: str, g: NetworkGraph, app: Application, workload: Workload, p: Placement,
             wall_ms: float, seed: int = 0, prev: Placement | None = None) -> MetricsReport:
    acc = coverage(g, p, app, workload)
    per_site = {e: len(p.at(e)) for e in g.sites}
    total = p.instance_count
    contrib = {e: 100.0 * n / total for e, n in per_site.items()} if total else {}
    cost = deployment_cost(p, app, g, prev) if app.microservices else 0.0
    table = [(b, c, lat, workload.limit(c), ok) for b, c, lat, ok in acc.rows()]
    return MetricsReport(algo, workload.id, seed, total, per_site, contrib, acc.coverage_pct, table,
                         cost, wall_ms, p.digest(), paper_count=PAPER_COUNTS.get(algo, {}).get(workload.id))


def _check_algo(algo: str):
    if algo not in ALGORITHMS:
        raise ContractError(f"unknown algorithm {algo!r}; expected one of {ALGORITHMS}")


def place(algo: str, g: NetworkGraph, app: Application, workload: Workload, seed: int = 0,
          weights: ScoreWeights | None = None, prev: Placement | None = None,
          agent_config: AgentConfig | None = None, params: PolicyParameters | None = None) -> tuple[Placement, dict]:
    """Run one algorithm; returns the placement and algorithm-specific details."""
    _check_algo(algo)
    if not app.microservices:
        return Placement(), {}
    if algo == "wssp":
        return wssp_place(g, app, workload, weights, prev), {}
    if algo == "misp":
        return misp_place(g, app, workload, prev), {}
    info = {}
    if params is None:
        res = train(g, app, workload, agent_config, seed=seed)
        params = res.params
        info["train_steps"] = res.steps
    ex = greedy_rollout(PlacementEnv(g, app, workload), params,
                        (agent_config or AgentConfig()).stationary_window)
    info.update(extraction_steps=ex.steps, changes=ex.changes, stationary=ex.stationary, params=params)
    return ex.placement, info


def run_scenario(algo: str, g: NetworkGraph, app: Application, workload: Workload, seed: int = 0,
                 weights: ScoreWeights | None = None, prev: Placement | None = None,
                 agent_config: AgentConfig | None = None,
                 params: PolicyParameters | None = None) -> tuple[Placement, MetricsReport]:
    """Execute ``algo`` on one workload and evaluate counts, coverage, cost and time.

    For RLSP without ``params`` the wall time includes training.
    """
    t0 = time.perf_counter()
    p, info = place(algo, g, app, workload, seed, weights, prev, agent_config, params)
    wall = 1e3 * (time.perf_counter() - t0)
    rep = evaluate(algo, g, app, workload, p, wall, seed, prev)
    rep.extra = {k: v for k, v in info.items() if k != "params"}
    if "params" in info:
        rep.extra["params"] = info["params"]
    return p, rep


# ---------------------------------------------------------------------------
# transitions


@dataclass
class TransitionTrace:
    algo: str
    ticks: list[int]
    workloads: list[str]
    access_pct: list[float]
    instances: list[int]
    boundaries: list[int]
    deploy_delay: int

    def to_csv(self) -> str:
        rows = [[t, w, f"{a:.4f}", n] for t, w, a, n in
                zip(self.ticks, self.workloads, self.access_pct, self.instances)]
        return _rows_to_csv(TRANSITION_HEADER, rows)

    def window(self, boundary: int) -> list[float]:
        """Accessibility during the deployment delay after ``boundary``."""
        return [a for t, a in zip(self.ticks, self.access_pct) if boundary <= t < boundary + self.deploy_delay]

    def dip_at(self, boundary: int) -> float:
        """Largest drop below 100% inside the delay window after ``boundary``."""
        w = self.window(boundary)
        return max((100.0 - a for a in w), default=0.0)

    def recovered_before(self, tick: int) -> bool:
        prior = [a for t, a in zip(self.ticks, self.access_pct) if t < tick]
        return bool(prior) and prior[-1] >= 100.0 - 1e-9


def _intersect(a: Placement, b: Placement) -> Placement:
    return Placement({e: a.at(e) & b.at(e) for e in set(a.assignments) | set(b.assignments)})


def strictest(workloads: Sequence[Workload]) -> Workload:
    """The workload whose limits are smallest in total (first on ties)."""
    return min(workloads, key=lambda w: sum(w.chain_limits.values()))


def transition_run(algo: str, g: NetworkGraph, app: Application, workloads: Sequence[Workload],
                   ticks_per_phase: int = TICKS_PER_PHASE, deploy_delay: int = DEPLOY_DELAY_TICKS,
                   seed: int = 0, weights: ScoreWeights | None = None,
                   agent_config: AgentConfig | None = None,
                   params: PolicyParameters | None = None) -> TransitionTrace:
    """Replay a sequence of workloads, ``ticks_per_phase`` ticks each.

    At every phase start the algorithm is re-run with the previous placement
    as prior. Instances that were not already running come up only after
    ``deploy_delay`` ticks; until then the live placement is the overlap of
    the old and new placements. The first phase starts already deployed.
    RLSP uses one policy trained on the strictest workload: the first phase
    follows its greedy rollout step by step, later phases replay the
    resulting placement.
    """
    _check_algo(algo)
    if not workloads:
        raise ContractError("transition_run needs at least one workload")
    if ticks_per_phase < 1 or deploy_delay < 0:
        raise ContractError("ticks_per_phase >= 1 and deploy_delay >= 0 required")
    trace = TransitionTrace(algo, [], [], [], [], [], deploy_delay)

    ramp: list[Placement] = []
    fixed: Placement | None = None
    if algo == "rlsp":
        target = strictest(workloads)
        if params is None:
            params = train(g, app, target, agent_config, seed=seed).params
        env = PlacementEnv(g, app, target)
        ex = greedy_rollout(env, params, (agent_config or AgentConfig()).stationary_window)
        # rebuild the per-step placements from the step log
        ramp = _replay_ramp(env, app)
        fixed = ex.placement

    prev: Placement | None = None
    tick = 0
    for k, w in enumerate(workloads):
        boundary = tick
        trace.boundaries.append(boundary)
        if algo == "rlsp":
            new = fixed
        else:
            new = place(algo, g, app, w, seed, weights, prev)[0]
        for i in range(ticks_per_phase):
            if algo == "rlsp":
                step = boundary + i
                live = ramp[step] if step < len(ramp) else fixed
            elif prev is None or i >= deploy_delay:
                # the trace starts from a running first placement
                live = new
            else:
                live = _intersect(new, prev)
            trace.ticks.append(tick)
            trace.workloads.append(w.id)
            trace.access_pct.append(coverage(g, live, app, w).coverage_pct if app.microservices else 100.0)
            trace.instances.append(live.instance_count)
            tick += 1
        prev = new
    return trace


def _replay_ramp(env: PlacementEnv, app: Application) -> list[Placement]:
    """Placement after each logged step of the last episode (index 0 = before any step)."""
    p = Placement()
    out = [p]
    for rec in env.log:
        if rec.status == "valid" and rec.act_type in (0, 1):
            units = [rec.micro]
            partner = app.partner(rec.micro)
            if partner is not None:
                units.append(partner)
            for u in units:
                if rec.act_type == 0 and not p.has(rec.site, u):
                    p = p.add_replica(rec.site, u)
                elif rec.act_type == 1 and p.has(rec.site, u):
                    p = p.evict_replica(rec.site, u)
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# determinism


@dataclass
class DeterminismReport:
    algo: str
    seeds: list[int]
    hashes: list[str]
    identical: bool
    all_valid: bool
    all_covered: bool

    @property
    def passed(self) -> bool:
        if self.algo == "rlsp":
            return self.all_valid and self.all_covered
        return self.identical


def determinism_check(algo: str, g: NetworkGraph, app: Application, workload: Workload, k_runs: int = 10,
                      seeds: Sequence[int] | None = None, weights: ScoreWeights | None = None,
                      agent_config: AgentConfig | None = None,
                      params: Sequence[PolicyParameters] | None = None) -> DeterminismReport:
    """Run ``algo`` repeatedly and compare placement hashes.

    WSSP and MISP must repeat exactly. RLSP runs (one per seed, or one per
    supplied parameter set) may differ but each must be valid with full coverage.
    """
    _check_algo(algo)
    if k_runs < 2:
        raise ContractError("k_runs must be >= 2")
    seeds = list(seeds) if seeds is not None else list(range(k_runs))
    if len(seeds) < k_runs:
        raise ContractError("need one seed per run")
    hashes, valid, covered = [], True, True
    for i in range(k_runs):
        pp = params[i] if params is not None else None
        p, _ = place(algo, g, app, workload, seeds[i], weights, None, agent_config, pp)
        hashes.append(p.digest())
        rep = validate_placement(p, app, g)
        valid &= rep.ok if algo != "wssp" else rep.hard_ok()
        covered &= math.isclose(coverage(g, p, app, workload).coverage_pct, 100.0)
    return DeterminismReport(algo, seeds[:k_runs], hashes, len(set(hashes)) == 1, valid, covered)


def _cell(args):
    algo, g, app, w, seed, weights, agent_config, params = args
    try:
        _, rep = run_scenario(algo, g, app, w, seed, weights, agent_config=agent_config, params=params)
    except InfeasibleError as exc:
        log.error("%s on %s infeasible: %s", algo, w.id, exc)
        return None
    rep.extra.pop("params", None)
    return rep


def run_all(g: NetworkGraph, app: Application, workloads: Sequence[Workload], algos=ALGORITHMS,
            seed: int = 0, weights: ScoreWeights | None = None,
            agent_config: AgentConfig | None = None, jobs: int = 1,
            params: PolicyParameters | None = None) -> list[MetricsReport]:
    """Every algorithm on every workload; infeasible cells are logged and skipped.

    RLSP trains once on the strictest workload (unless ``params`` is given)
    and that policy serves every workload. With ``jobs > 1`` the cells run in
    separate processes; results keep the (algorithm, workload) order either way.
    """
    if "rlsp" in algos and params is None and workloads and app.microservices:
        params = train(g, app, strictest(workloads), agent_config, seed=seed).params
    cells = [(a, g, app, w, seed, weights, agent_config, params if a == "rlsp" else None)
             for a in algos for w in workloads]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reps = list(pool.map(_cell, cells))
    else:
        reps = [_cell(c) for c in cells]
    return [r for r in reps if r is not None]

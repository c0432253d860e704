"""Assignment-based placement: exact solve, communication local search, duplication."""
from __future__ import annotations

import itertools
import logging
import math
from typing import Mapping

import numpy as np

from .application import Application, Workload
from .costs import CostMatrix, build_tmatrix, communication_cost, placement_cost
from .errors import InfeasibleError
from .placement import LATENCY_EPS, Placement, chain_latency, site_load
from .topology import NetworkGraph, ResourceVector

log = logging.getLogger(__name__)

LOCAL_SEARCH_TOP_K = 3
LOCAL_SEARCH_MAX_ITER = 100
EXHAUSTIVE_CELLS = 32


def _units(app: Application, services) -> list[tuple[str, ...]]:
    """Collocation pairs fused into one item; items sorted by their first id."""
    seen, units = set(), []
    for s in sorted(services):
        if s in seen:
            continue
        p = app.partner(s)
        unit = (s,) if p is None or p not in services else tuple(sorted((s, p)))
        seen.update(unit)
        units.append(unit)
    return units


def _tol(x: float) -> float:
    return 1e-9 * max(1.0, abs(x))


def mip_solve(t: CostMatrix, capacities: Mapping[str, ResourceVector], app: Application) -> Placement:
    """Exact min-cost assignment of every service to one site under capacities.

    Returns the lexicographically smallest optimal assignment (items ordered
    by id, sites by id). Raises InfeasibleError when only forbidden cells can
    complete an assignment.
    """
    sites = list(t.sites)
    units = _units(app, t.services)
    n, m = len(units), len(sites)
    if n == 0:
        return Placement()
    cost = np.zeros((n, m))
    dem = np.zeros((n, 3))
    forbidden = np.zeros((n, m), dtype=bool)
    for i, unit in enumerate(units):
        for s in unit:
            cost[i] += [t(s, e) for e in sites]
            forbidden[i] |= [t.is_forbidden(s, e) for e in sites]
            dem[i] += app.microservices[s].demand.as_tuple()
    cap = np.array([capacities[e].as_tuple() for e in sites], dtype=float)
    if (dem.sum(axis=0) > cap.sum(axis=0) + 1e-9).any():
        raise InfeasibleError("total demand exceeds total capacity")

    if n * m <= EXHAUSTIVE_CELLS:
        best = _exhaustive(cost, dem, cap)
    else:
        best = _branch_and_bound(cost, dem, cap)
    if best is None:
        raise InfeasibleError("no capacity-feasible assignment")
    choice, total = best
    if any(forbidden[i, j] for i, j in enumerate(choice)):
        raise InfeasibleError(f"every feasible assignment uses a forbidden cell (cost {total:.3g})")
    out: dict[str, set[str]] = {}
    for unit, j in zip(units, choice):
        out.setdefault(sites[j], set()).update(unit)
    return Placement(out)


def _exhaustive(cost, dem, cap):
    n, m = cost.shape
    best = None
    for choice in itertools.product(range(m), repeat=n):
        load = np.zeros_like(cap)
        for i, j in enumerate(choice):
            load[j] += dem[i]
        if (load > cap + 1e-9).any():
            continue
        c = float(sum(cost[i, j] for i, j in enumerate(choice)))
        if best is None or c < best[1] - _tol(best[1]):
            best = (choice, c)
    return best


def _branch_and_bound(cost, dem, cap):
    n, m = cost.shape
    # suffix[i] = sum of row minima for rows i..n-1
    suffix = np.concatenate([np.cumsum(cost.min(axis=1)[::-1])[::-1], [0.0]])
    load = np.zeros_like(cap)
    choice = [0] * n
    best_cost = math.inf
    best_choice = None
    order = [list(range(m)) for _ in range(n)]

    def dfs(i: int, acc: float):
        nonlocal best_cost, best_choice
        if i == n:
            if acc < best_cost - _tol(best_cost if math.isfinite(best_cost) else 0.0):
                best_cost, best_choice = acc, tuple(choice)
            return
        for j in order[i]:
            c = acc + cost[i, j]
            if math.isfinite(best_cost) and c + suffix[i + 1] >= best_cost - _tol(best_cost):
                continue
            nxt = load[j] + dem[i]
            if (nxt > cap[j] + 1e-9).any():
                continue
            load[j] = nxt
            choice[i] = j
            dfs(i + 1, c)
            load[j] -= dem[i]

    dfs(0, 0.0)
    return None if best_choice is None else (best_choice, best_cost)


def _unit_of(app: Application, s: str) -> tuple[str, ...]:
    p = app.partner(s)
    return (s,) if p is None else tuple(sorted((s, p)))


def _room(g, app, p: Placement, site: str, services) -> bool:
    add = [s for s in services if not p.has(site, s)]
    load = site_load(p, app, site)
    for s in add:
        load = load + app.microservices[s].demand
    return load.fits_within(g.node(site).capacity)


def local_search(p: Placement, t: CostMatrix, app: Application, g: NetworkGraph,
                 top_k: int = LOCAL_SEARCH_TOP_K, max_iter: int = LOCAL_SEARCH_MAX_ITER) -> Placement:
    """Migrate the highest-overhead services while the total cost strictly drops."""
    cur = p
    cur_cost = placement_cost(cur, t, app, g)
    for _ in range(max_iter):
        _, per = communication_cost(cur, app, g)
        ranked = sorted((s for s in app.service_ids if per[s] > 0), key=lambda s: (-per[s], s))
        best, best_cost = None, cur_cost
        for s in ranked[:top_k]:
            unit = _unit_of(app, s)
            here = cur.hosts(s)
            if len(here) != 1:
                continue
            src = here[0]
            base = cur
            for u in unit:
                base = base.evict_replica(src, u) if base.has(src, u) else base
            for e in t.sites:
                if e == src or any(t.is_forbidden(u, e) for u in unit):
                    continue
                if not _room(g, app, base, e, unit):
                    continue
                cand = base
                for u in unit:
                    cand = cand.add_replica(e, u)
                c = placement_cost(cand, t, app, g)
                if c < best_cost - _tol(best_cost):
                    best, best_cost = cand, c
        if best is None:
            break
        log.debug("local search: cost %.6g -> %.6g", cur_cost, best_cost)
        cur, cur_cost = best, best_cost
    return cur


def ensure_latency(p: Placement, g: NetworkGraph, app: Application, workload: Workload,
                   t: CostMatrix) -> Placement:
    """Duplicate services near each base station until its chains meet their limits."""
    cur = p
    unmet = []
    for b in g.base_stations:
        for cid in app.chain_ids:
            chain = app.chains[cid]
            limit = workload.limit(cid)
            order = sorted(chain.members, key=lambda s: (app.microservices[s].demand.cpu, s))
            while chain_latency(g, cur, b, chain) > limit + LATENCY_EPS:
                dup = None
                for s in order:
                    hosts = cur.hosts(s)
                    near = min((g.latency(b, e) for e in hosts), default=math.inf)
                    unit = _unit_of(app, s)
                    options = []
                    for e in t.sites:
                        if e in hosts or any(t.is_forbidden(u, e) for u in unit):
                            continue
                        d = g.latency(b, e)
                        if d < near - LATENCY_EPS and _room(g, app, cur, e, unit):
                            options.append((d, e))
                    if options:
                        _, e = min(options)
                        dup = (e, unit)
                        break
                if dup is None:
                    unmet.append((b, cid))
                    log.info("misp: chain %s unmet at %s after duplication", cid, b)
                    break
                e, unit = dup
                for u in unit:
                    if not cur.has(e, u):
                        cur = cur.add_replica(e, u)
    return cur


def misp_place(g: NetworkGraph, app: Application, workload: Workload,
               prev: Placement | None = None) -> Placement:
    t = build_tmatrix(app, g, prev)
    caps = {e: g.node(e).capacity for e in t.sites}
    p = mip_solve(t, caps, app)
    p = local_search(p, t, app, g)
    return ensure_latency(p, g, app, workload, t)

"""Weighted set-cover service placement.

Chains are handled strictest first. For each chain every edge site reachable
within the chain's limit becomes a candidate, hosting the whole chain when it
fits and a split of it otherwise; the greedy weighted set cover over base
stations then picks which candidates to deploy. Collocation and data
locality are not enforced here.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .application import Application, ServiceChain, Workload
from .costs import ScoreWeights, normalize, raw_breakdown, score
from .errors import ContractError, InfeasibleError
from .placement import LATENCY_EPS, Placement, site_allows, site_load
from .topology import ZERO, NetworkGraph, ResourceVector, neighbors_by_latency

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateSite:
    site: str
    covered_bs: frozenset[str]
    weight: float
    assigned_services: tuple[str, ...]
    # full assignment of the chain, primary site first; one part unless split
    parts: tuple[tuple[str, tuple[str, ...]], ...] = ()


def find_minimal_sites(candidates: Sequence[CandidateSite], universe) -> list[CandidateSite]:
    """Greedy weighted set cover: repeatedly take the min weight / newly-covered ratio."""
    universe = frozenset(universe)
    union = frozenset().union(*(c.covered_bs for c in candidates)) if candidates else frozenset()
    missing = universe - union
    if missing:
        raise InfeasibleError(f"no candidate covers {sorted(missing)}")
    covered: set = set()
    chosen: list[CandidateSite] = []
    pool = list(candidates)
    while not universe <= covered:
        best, best_key = None, None
        for idx, c in enumerate(pool):
            new = len((c.covered_bs & universe) - covered)
            if new == 0:
                continue
            key = (c.weight / new, c.weight, c.site, idx)
            if best_key is None or key < best_key:
                best, best_key = c, key
        chosen.append(best)
        covered |= best.covered_bs & universe
        pool.remove(best)
    return chosen


def _free(g: NetworkGraph, app: Application, p: Placement, site: str) -> ResourceVector:
    cap, load = g.node(site).capacity, site_load(p, app, site)
    return ResourceVector(max(cap.cpu - load.cpu, 0.0), max(cap.mem_gb - load.mem_gb, 0.0),
                          max(cap.storage_gb - load.storage_gb, 0.0))


def _demand(app: Application, services) -> ResourceVector:
    total = ZERO
    for s in services:
        total = total + app.microservices[s].demand
    return total


def _fits(g, app, p: Placement, site: str, services) -> bool:
    new = [s for s in services if not p.has(site, s)]
    if any(not site_allows(app, g, s, site, locality=False) for s in new):
        return False
    return _demand(app, new).fits_within(_free(g, app, p, site))


def _reachable(g: NetworkGraph, site: str, limit: float) -> bool:
    """True when some base station reaches ``site`` within ``limit``."""
    return any(g.latency(b, site) <= limit + LATENCY_EPS for b in g.base_stations)


def split_and_assign(chain: ServiceChain, limit: float, site: str, g: NetworkGraph, app: Application,
                     placement: Placement | None = None, services: Sequence[str] | None = None,
                     _visited: frozenset = frozenset()) -> list[tuple[str, tuple[str, ...]]]:
    """Put the largest demand-ordered prefix of the chain on ``site``, the rest on neighbours."""
    placement = placement or Placement()
    services = list(chain.members if services is None else services)
    if _fits(g, app, placement, site, services):
        raise ContractError(f"{site} can host all of {chain.id}; nothing to split")

    already = [s for s in services if placement.has(site, s)]
    todo = [s for s in services if s not in already]
    movable = sorted((s for s in todo if site_allows(app, g, s, site, locality=False)),
                     key=lambda s: (-app.microservices[s].demand.total(), s))
    free = _free(g, app, placement, site)
    prefix: list[str] = []
    load = ZERO
    for s in movable:
        nxt = load + app.microservices[s].demand
        if not nxt.fits_within(free):
            break
        prefix.append(s)
        load = nxt
    first = tuple(sorted(already + prefix))
    if not first:
        raise InfeasibleError(f"{site} can take no part of {chain.id}", chain=chain.id)
    rest = [s for s in todo if s not in prefix]

    visited = _visited | {site}
    for k, _ in neighbors_by_latency(g, site):
        if k in visited or not _reachable(g, k, limit):
            continue
        if _fits(g, app, placement, k, rest):
            return [(site, first), (k, tuple(sorted(rest)))]
        try:
            tail = split_and_assign(chain, limit, k, g, app, placement, rest, visited)
        except InfeasibleError:
            continue
        return [(site, first)] + tail
    raise InfeasibleError(f"split of {chain.id} from {site} ran out of neighbours", chain=chain.id)


def _covered(g: NetworkGraph, parts, chain: ServiceChain, limit: float) -> frozenset[str]:
    hosts: dict[str, list[str]] = {}
    for site, svcs in parts:
        for s in svcs:
            hosts.setdefault(s, []).append(site)
    out = set()
    for b in g.base_stations:
        lat = sum(min(g.latency(b, e) for e in hosts[s]) for s in chain.members)
        if lat <= limit + LATENCY_EPS:
            out.add(b)
    return frozenset(out)


def chain_candidates(chain: ServiceChain, limit: float, g: NetworkGraph, app: Application,
                     placement: Placement, weights: ScoreWeights,
                     prev: Placement | None = None) -> list[CandidateSite]:
    raw = []
    for e in g.edge_sites:
        if not _reachable(g, e, limit):
            continue
        if _fits(g, app, placement, e, chain.members):
            parts = ((e, tuple(sorted(chain.members))),)
        else:
            try:
                parts = tuple(split_and_assign(chain, limit, e, g, app, placement))
            except InfeasibleError as exc:
                log.debug("wssp: %s", exc)
                continue
        cov = _covered(g, parts, chain, limit)
        if cov:
            raw.append((e, parts, cov))
    breakdowns = normalize([raw_breakdown(dict(parts), app, g, placement, prev) for _, parts, _ in raw])
    return [CandidateSite(e, cov, score(weights, b), parts[0][1], parts)
            for (e, parts, cov), b in zip(raw, breakdowns)]


def _merge(g, app, placement: Placement, parts) -> Placement | None:
    p = placement
    for site, svcs in parts:
        if not _fits(g, app, p, site, svcs):
            return None
        p = p.union(Placement({site: svcs}))
    return p


def wssp_place(g: NetworkGraph, app: Application, workload: Workload,
               weights: ScoreWeights | None = None, prev: Placement | None = None) -> Placement:
    weights = weights or ScoreWeights()
    placement = Placement()
    universe = frozenset(g.base_stations)
    order = sorted(app.chains.values(), key=lambda c: (workload.limit(c.id), c.id))
    for chain in order:
        limit = workload.limit(chain.id)
        pool = chain_candidates(chain, limit, g, app, placement, weights, prev)
        while True:
            try:
                chosen = find_minimal_sites(pool, universe)
            except InfeasibleError as exc:
                raise InfeasibleError(f"chain {chain.id!r}: {exc}", chain=chain.id) from None
            p = placement
            for cand in chosen:
                merged = _merge(g, app, p, cand.parts)
                if merged is None:
                    # candidates were sized against the same base; drop the clash and retry
                    pool = [c for c in pool if c is not cand]
                    break
                p = merged
            else:
                placement = p
                break
        log.debug("wssp: %s (%.2f ms) -> %s", chain.id, limit, [c.site for c in chosen])
    return placement

"""Deployment cost table, scalarized score, and communication overhead."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .application import Application
from .errors import ValidationError
from .placement import Placement, site_allows
from .topology import UNREACHABLE, NetworkGraph

RELOCATION_FRACTION = 0.5
KAPPA_FACTOR = 1e6


def compute_cost(app: Application, g: NetworkGraph, sid: str, site: str) -> float:
    """Cost of running one instance of ``sid`` on ``site`` (cpu + storage)."""
    d = app.microservices[sid].demand
    uc = g.node(site).unit_cost
    return d.cpu * uc.cpu + d.storage_gb * uc.storage


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """|S| x |sites| deployment cost table; forbidden cells hold ``kappa``."""

    services: tuple[str, ...]
    sites: tuple[str, ...]
    entries: np.ndarray
    kappa: float
    forbidden: np.ndarray
    prev_placement: Placement | None = None

    def __post_init__(self):
        object.__setattr__(self, "_row", {s: i for i, s in enumerate(self.services)})
        object.__setattr__(self, "_col", {e: j for j, e in enumerate(self.sites)})

    def __call__(self, sid: str, site: str) -> float:
        return float(self.entries[self._row[sid], self._col[site]])

    def is_forbidden(self, sid: str, site: str) -> bool:
        return bool(self.forbidden[self._row[sid], self._col[site]])

    def row(self, sid: str) -> int:
        return self._row[sid]

    def col(self, site: str) -> int:
        return self._col[site]


def build_tmatrix(app: Application, g: NetworkGraph, prev: Placement | None = None) -> CostMatrix:
    services, sites = app.service_ids, g.sites
    t = np.zeros((len(services), len(sites)))
    forbidden = np.zeros_like(t, dtype=bool)
    for i, s in enumerate(services):
        prev_hosts = set(prev.hosts(s)) if prev is not None else set()
        for j, e in enumerate(sites):
            if not site_allows(app, g, s, e):
                forbidden[i, j] = True
                continue
            gamma = compute_cost(app, g, s, e)
            rho = RELOCATION_FRACTION * gamma if prev_hosts and e not in prev_hosts else 0.0
            t[i, j] = gamma + rho
    finite_max = t[~forbidden].max() if (~forbidden).any() else 0.0
    kappa = KAPPA_FACTOR * (finite_max + 1.0)
    t[forbidden] = kappa
    t.setflags(write=False)
    forbidden.setflags(write=False)
    return CostMatrix(services, sites, t, kappa, forbidden, prev)


@dataclass(frozen=True)
class ScoreWeights:
    a1: float = 0.2  # deployment
    a2: float = 0.2  # cpu
    a3: float = 0.2  # storage
    a4: float = 0.2  # communication
    a5: float = 0.2  # update / relocation

    def __post_init__(self):
        ws = self.as_tuple()
        if any(not (0.0 <= w <= 1.0) for w in ws):
            raise ValidationError(f"weights must lie in [0, 1], got {ws}")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ValidationError(f"weights must sum to 1, got {sum(ws)}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.a1, self.a2, self.a3, self.a4, self.a5)

    @classmethod
    def parse(cls, text: str) -> ScoreWeights:
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 5:
            raise ValidationError("expected five comma-separated weights a1..a5")
        return cls(*parts)


@dataclass(frozen=True)
class CostBreakdown:
    deploy: float = 0.0
    cpu: float = 0.0
    storage: float = 0.0
    comm: float = 0.0
    update: float = 0.0
    gamma_sum: float = 0.0
    rho_sum: float = 0.0

    def components(self) -> tuple[float, float, float, float, float]:
        return (self.deploy, self.cpu, self.storage, self.comm, self.update)


def score(w: ScoreWeights, b: CostBreakdown) -> float:
    return sum(a * c for a, c in zip(w.as_tuple(), b.components()))


def normalize(raw: Sequence[CostBreakdown]) -> list[CostBreakdown]:
    """Divide each component by its max over the candidate set (0 if the max is 0)."""
    if not raw:
        return []
    cols = np.array([r.components() for r in raw], dtype=float)
    top = cols.max(axis=0)
    scaled = np.divide(cols, top, out=np.zeros_like(cols), where=top > 0)
    return [CostBreakdown(*map(float, row), gamma_sum=r.gamma_sum, rho_sum=r.rho_sum)
            for row, r in zip(scaled, raw)]


def communication_cost(p: Placement, app: Application, g: NetworkGraph) -> tuple[float, dict[str, float]]:
    """Rate-weighted latency between the closest replicas of each communicating pair."""
    per_service = {s: 0.0 for s in app.service_ids}
    total = 0.0
    for a, b, rate in app.comm_pairs():
        ha, hb = p.hosts(a), p.hosts(b)
        if not ha or not hb:
            cost = UNREACHABLE
        else:
            cost = rate * min(g.latency(x, y) for x in ha for y in hb)
        per_service[a] += cost
        per_service[b] += cost
        total += cost
    return total, per_service


def tau_sum(p: Placement, t: CostMatrix) -> float:
    return sum(t(s, e) for e, s in p.instances())


def placement_cost(p: Placement, t: CostMatrix, app: Application, g: NetworkGraph) -> float:
    if p.instance_count == 0:
        return 0.0  # nothing runs, so nothing communicates
    comm, _ = communication_cost(p, app, g)
    return tau_sum(p, t) + comm


def deployment_cost(p: Placement, app: Application, g: NetworkGraph, prev: Placement | None = None) -> float:
    """Real cost of the hosted instances plus relocations, plus communication.

    Unlike ``placement_cost`` this never charges kappa, so it stays meaningful
    for placements that ignore soft constraints.
    """
    total = 0.0
    for e, s in p.instances():
        gamma = compute_cost(app, g, s, e)
        moved = prev is not None and prev.hosts(s) and e not in prev.hosts(s)
        total += gamma * (1.0 + RELOCATION_FRACTION) if moved else gamma
    comm, _ = communication_cost(p, app, g)
    return total + comm


def max_placement_cost(app: Application, g: NetworkGraph, t: CostMatrix | None = None) -> float:
    """Cost of hosting every service on every admissible site (the normalizer)."""
    t = t or build_tmatrix(app, g)
    full = Placement({e: {s for s in app.service_ids if not t.is_forbidden(s, e)} for e in g.sites})
    c = placement_cost(full, t, app, g)
    return c if math.isfinite(c) and c > 0 else 1.0


def raw_breakdown(assignment: Mapping[str, Sequence[str]], app: Application, g: NetworkGraph,
                  existing: Placement, prev: Placement | None = None) -> CostBreakdown:
    """Unnormalized cost components of adding ``assignment`` on top of ``existing``.

    Instances already in ``existing`` cost nothing.
    """
    deploy = cpu = storage = update = 0.0
    hosts: dict[str, list[str]] = {}
    for site, svcs in assignment.items():
        uc = g.node(site).unit_cost
        for s in svcs:
            hosts.setdefault(s, []).append(site)
            if existing.has(site, s):
                continue
            d = app.microservices[s].demand
            deploy += 1
            cpu += d.cpu * uc.cpu
            storage += d.storage_gb * uc.storage
            if prev is not None and prev.hosts(s) and not prev.has(site, s):
                update += RELOCATION_FRACTION * compute_cost(app, g, s, site)
    comm = 0.0
    for a, b, rate in app.comm_pairs():
        if a in hosts and b in hosts:
            comm += rate * min(g.latency(x, y) for x in hosts[a] for y in hosts[b])
    return CostBreakdown(deploy, cpu, storage, comm, update, gamma_sum=cpu + storage, rho_sum=update)

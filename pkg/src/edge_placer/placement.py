"""Placements and their evaluation: chain latency, coverage, constraint validity."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .application import Application, ServiceChain, Workload
from .errors import DomainError, StateError
from .topology import UNREACHABLE, NetworkGraph, ResourceVector, ZERO

# Float sums of link latencies are compared against limits with this slack.
LATENCY_EPS = 1e-9


@dataclass(frozen=True)
class Placement:
    """Immutable mapping site -> set of hosted microservice ids.

    A site hosts at most one instance of a microservice; replicas live on
    different sites.
    """

    assignments: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {s: frozenset(v) for s, v in self.assignments.items() if v}
        object.__setattr__(self, "assignments", dict(sorted(clean.items())))

    @classmethod
    def from_mapping(cls, m: Mapping[str, Iterable[str]]) -> Placement:
        out = {}
        for site, svcs in m.items():
            svcs = list(svcs)
            if len(set(svcs)) != len(svcs):
                raise StateError(f"site {site} lists a microservice twice")
            out[site] = frozenset(svcs)
        return cls(out)

    def __hash__(self):
        return hash(self.canonical())

    def __eq__(self, other):
        return isinstance(other, Placement) and self.assignments == other.assignments

    def __len__(self):
        return self.instance_count

    @property
    def instance_count(self) -> int:
        return sum(len(v) for v in self.assignments.values())

    def instances(self) -> Iterator[tuple[str, str]]:
        for site, svcs in self.assignments.items():
            for s in sorted(svcs):
                yield site, s

    def at(self, site: str) -> frozenset[str]:
        return self.assignments.get(site, frozenset())

    def hosts(self, sid: str) -> list[str]:
        return [site for site, svcs in self.assignments.items() if sid in svcs]

    def has(self, site: str, sid: str) -> bool:
        return sid in self.at(site)

    def services(self) -> set[str]:
        return set().union(*self.assignments.values()) if self.assignments else set()

    def add_replica(self, site: str, sid: str) -> Placement:
        if self.has(site, sid):
            raise StateError(f"{sid} already deployed on {site}")
        m = dict(self.assignments)
        m[site] = self.at(site) | {sid}
        return Placement(m)

    def evict_replica(self, site: str, sid: str) -> Placement:
        if not self.has(site, sid):
            raise StateError(f"{sid} is not deployed on {site}")
        m = dict(self.assignments)
        m[site] = self.at(site) - {sid}
        return Placement(m)

    def union(self, other: Placement) -> Placement:
        m = {s: set(v) for s, v in self.assignments.items()}
        for site, svcs in other.assignments.items():
            m.setdefault(site, set()).update(svcs)
        return Placement(m)

    def difference(self, other: Placement) -> Placement:
        """Instances in self that are not in other."""
        return Placement({s: v - other.at(s) for s, v in self.assignments.items()})

    def to_document(self) -> dict:
        return {"assignments": {s: sorted(v) for s, v in self.assignments.items()}}

    def canonical(self) -> str:
        return json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def matrix(self, service_ids: Iterable[str], site_ids: Iterable[str]) -> np.ndarray:
        service_ids, site_ids = list(service_ids), list(site_ids)
        m = np.zeros((len(service_ids), len(site_ids)), dtype=bool)
        si = {s: i for i, s in enumerate(service_ids)}
        for j, site in enumerate(site_ids):
            for s in self.at(site):
                m[si[s], j] = True
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray, service_ids, site_ids) -> Placement:
        out = {}
        for j, site in enumerate(site_ids):
            hosted = frozenset(service_ids[i] for i in np.flatnonzero(m[:, j]))
            if hosted:
                out[site] = hosted
        return cls(out)


def parse_placement(document: str | Mapping) -> Placement:
    if isinstance(document, (str, bytes)):
        document = json.loads(document)
    return Placement.from_mapping(document["assignments"])


def load_placement(path: str | Path) -> Placement:
    return parse_placement(Path(path).read_text())


def site_load(p: Placement, app: Application, site: str) -> ResourceVector:
    load = ZERO
    for s in p.at(site):
        load = load + app.microservices[s].demand
    return load


def chain_latency(g: NetworkGraph, p: Placement, bs: str, chain: ServiceChain) -> float:
    """Sum over distinct chain members of the latency to the nearest hosting site."""
    if g.node(bs).kind != "bs":
        raise DomainError(f"{bs} is not a base station")
    total = 0.0
    for s in chain.members:
        hosts = p.hosts(s)
        if not hosts:
            return UNREACHABLE
        total += min(g.latency(bs, e) for e in hosts)
    return total


@dataclass(frozen=True)
class AccessEntry:
    accessible: bool
    latency_ms: float


@dataclass(frozen=True)
class AccessMatrix:
    entries: Mapping[tuple[str, str], AccessEntry]
    limits: Mapping[str, float] = field(default_factory=dict)

    @property
    def accessible_count(self) -> int:
        return sum(e.accessible for e in self.entries.values())

    @property
    def coverage_pct(self) -> float:
        if not self.entries:
            return 100.0
        return 100.0 * self.accessible_count / len(self.entries)

    def chains_per_bs(self, base_stations: Iterable[str]) -> list[int]:
        counts = {b: 0 for b in base_stations}
        for (b, _), e in self.entries.items():
            counts[b] += e.accessible
        return list(counts.values())

    def rows(self) -> list[tuple[str, str, float, bool]]:
        return [(b, c, e.latency_ms, e.accessible) for (b, c), e in sorted(self.entries.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bs", "chain", "latency_ms", "accessible"])
        for b, c, lat, ok in self.rows():
            w.writerow([b, c, repr(lat), int(ok)])
        return buf.getvalue()


class LatencyModel:
    """Vectorized chain-latency evaluation for a fixed (graph, application).

    Rows of the hosted matrix follow ``app.service_ids``; columns follow
    ``g.sites``.
    """

    def __init__(self, g: NetworkGraph, app: Application):
        self.g = g
        self.app = app
        self.services = app.service_ids
        self.sites = g.sites
        self.bss = g.base_stations
        self.chains = app.chain_ids
        self.lat = np.asarray(g.bs_site_latency)  # B x E
        sidx = {s: i for i, s in enumerate(self.services)}
        self.membership = np.zeros((len(self.chains), len(self.services)))
        for ci, cid in enumerate(self.chains):
            for s in app.chains[cid].members:
                self.membership[ci, sidx[s]] = 1.0

    def nearest(self, hosted: np.ndarray) -> np.ndarray:
        """B x S latency to the nearest replica (inf where unhosted)."""
        if hosted.shape[1] == 0:
            return np.full((len(self.bss), hosted.shape[0]), np.inf)
        masked = np.where(hosted[None, :, :], self.lat[:, None, :], np.inf)
        return masked.min(axis=2)

    def chain_latencies(self, hosted: np.ndarray) -> np.ndarray:
        """B x C chain latency matrix."""
        near = self.nearest(hosted)
        missing = np.isinf(near)
        finite = np.where(missing, 0.0, near)
        lat = finite @ self.membership.T
        bad = (missing.astype(float) @ self.membership.T) > 0
        lat[bad] = np.inf
        return lat

    def limits_vector(self, workload: Workload) -> np.ndarray:
        return np.array([workload.limit(c) for c in self.chains])

    def accessible(self, hosted: np.ndarray, limits: np.ndarray) -> np.ndarray:
        return self.chain_latencies(hosted) <= limits[None, :] + LATENCY_EPS


def coverage(g: NetworkGraph, p: Placement, app: Application, workload: Workload,
             model: LatencyModel | None = None) -> AccessMatrix:
    model = model or LatencyModel(g, app)
    hosted = p.matrix(model.services, model.sites)
    lat = model.chain_latencies(hosted)
    entries = {}
    limits = {}
    for ci, cid in enumerate(model.chains):
        limit = workload.limit(cid)
        limits[cid] = limit
        for bi, b in enumerate(model.bss):
            v = float(lat[bi, ci])
            entries[(b, cid)] = AccessEntry(v <= limit + LATENCY_EPS, v)
    return AccessMatrix(entries, limits)


@dataclass
class ValidityReport:
    capacity_violations: list[tuple[str, str]] = field(default_factory=list)
    gpu_violations: list[tuple[str, str]] = field(default_factory=list)
    locality_violations: list[tuple[str, str]] = field(default_factory=list)
    collocation_violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.capacity_violations or self.gpu_violations
                    or self.locality_violations or self.collocation_violations)

    def hard_ok(self) -> bool:
        """Capacity and hardware only; locality and collocation ignored."""
        return not (self.capacity_violations or self.gpu_violations)


_COMPONENTS = ("cpu", "mem_gb", "storage_gb")


def validate_placement(p: Placement, app: Application, g: NetworkGraph) -> ValidityReport:
    rep = ValidityReport()
    for site, svcs in p.assignments.items():
        node = g.node(site)
        if not node.is_site:
            raise DomainError(f"{site} cannot host microservices")
        load = site_load(p, app, site)
        for comp in _COMPONENTS:
            if getattr(load, comp) > getattr(node.capacity, comp) + 1e-9:
                rep.capacity_violations.append((site, comp))
        for s in sorted(svcs):
            ms = app.microservices[s]
            if ms.needs_gpu and not node.has_gpu:
                rep.gpu_violations.append((site, s))
            if not ms.allows_region(node.region):
                rep.locality_violations.append((site, s))
    for a, b in app.colocation_pairs():
        ha, hb = set(p.hosts(a)), set(p.hosts(b))
        if ha != hb:
            rep.collocation_violations.append((a, b))
    return rep


def site_allows(app: Application, g: NetworkGraph, sid: str, site: str, *, locality: bool = True) -> bool:
    """Hardware (and optionally data-locality) admissibility of one cell."""
    ms, node = app.microservices[sid], g.node(site)
    if ms.needs_gpu and not node.has_gpu:
        return False
    return not locality or ms.allows_region(node.region)

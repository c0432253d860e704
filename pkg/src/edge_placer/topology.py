"""Mobile network graph: nodes, latency links, UE attachment and path latencies."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .errors import (
    DanglingReferenceError,
    DomainError,
    SchemaError,
    UnknownNodeError,
    ValidationError,
)

NODE_KINDS = ("ue", "bs", "upf", "edge", "cloud")
SITE_KINDS = ("edge", "cloud")

# Unreachable pairs and unhosted microservices evaluate to this latency.
UNREACHABLE = math.inf


@dataclass(frozen=True)
class ResourceVector:
    cpu: float = 0.0
    mem_gb: float = 0.0
    storage_gb: float = 0.0

    def __post_init__(self):
        for name in ("cpu", "mem_gb", "storage_gb"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"resource component {name} must be finite and >= 0, got {v}")

    def __add__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(self.cpu + other.cpu, self.mem_gb + other.mem_gb,
                              self.storage_gb + other.storage_gb)

    def fits_within(self, cap: ResourceVector, eps: float = 1e-9) -> bool:
        return (self.cpu <= cap.cpu + eps and self.mem_gb <= cap.mem_gb + eps
                and self.storage_gb <= cap.storage_gb + eps)

    def total(self) -> float:
        return self.cpu + self.mem_gb + self.storage_gb

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cpu, self.mem_gb, self.storage_gb)


ZERO = ResourceVector()


@dataclass(frozen=True)
class UnitCost:
    cpu: float = 0.0
    storage: float = 0.0


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    region: str = ""
    capacity: ResourceVector | None = None
    unit_cost: UnitCost | None = None
    has_gpu: bool = False

    @property
    def is_site(self) -> bool:
        return self.kind in SITE_KINDS


@dataclass(frozen=True)
class Link:
    src: str
    dst: str
    latency_ms: float

    def key(self) -> tuple[str, str]:
        return tuple(sorted((self.src, self.dst)))


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    """Immutable network graph with cached all-pairs shortest-path latencies.

    Construct through :func:`parse_topology` (or :meth:`build`) so invariants
    are checked; the constructor itself does not validate.
    """

    nodes: Mapping[str, Node]
    links: tuple[Link, ...]
    attachments: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, nodes, links, attachments=None) -> NetworkGraph:
        g = cls({n.id: n for n in nodes}, tuple(links), dict(attachments or {}))
        g.validate()
        return g

    # -- node sets, always sorted by id --------------------------------------
    def _ids(self, *kinds: str) -> tuple[str, ...]:
        return tuple(sorted(n.id for n in self.nodes.values() if n.kind in kinds))

    @cached_property
    def base_stations(self) -> tuple[str, ...]:
        return self._ids("bs")

    @cached_property
    def sites(self) -> tuple[str, ...]:
        """Capacity-bearing hosts (edge and cloud), sorted by id."""
        return self._ids(*SITE_KINDS)

    @cached_property
    def edge_sites(self) -> tuple[str, ...]:
        return self._ids("edge")

    @cached_property
    def ues(self) -> tuple[str, ...]:
        return self._ids("ue")

    @cached_property
    def _index(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(sorted(self.nodes))}

    @cached_property
    def distances(self) -> np.ndarray:
        order = sorted(self.nodes)
        n = len(order)
        w = np.full((n, n), np.inf)
        for link in self.links:
            i, j = self._index[link.src], self._index[link.dst]
            w[i, j] = w[j, i] = min(w[i, j], link.latency_ms)
        np.fill_diagonal(w, 0.0)
        # scipy treats inf as "no edge" in dense input
        d = shortest_path(w, method="D", directed=False)
        # per-source sums can differ in the last bit; keep the matrix exactly symmetric
        d = np.minimum(d, d.T)
        d.setflags(write=False)
        return d

    @cached_property
    def bs_site_latency(self) -> np.ndarray:
        """|B| x |sites| matrix of shortest-path latencies."""
        bi = [self._index[b] for b in self.base_stations]
        si = [self._index[s] for s in self.sites]
        m = self.distances[np.ix_(bi, si)].copy()
        m.setflags(write=False)
        return m

    @cached_property
    def site_site_latency(self) -> np.ndarray:
        si = [self._index[s] for s in self.sites]
        m = self.distances[np.ix_(si, si)].copy()
        m.setflags(write=False)
        return m

    def node(self, nid: str) -> Node:
        try:
            return self.nodes[nid]
        except KeyError:
            raise UnknownNodeError(f"unknown node {nid!r}") from None

    def latency(self, a: str, b: str) -> float:
        self.node(a)
        self.node(b)
        return float(self.distances[self._index[a], self._index[b]])

    def bs_of(self, ue: str) -> str:
        self.node(ue)
        return self.attachments[ue]

    def validate(self) -> None:
        for nid, n in self.nodes.items():
            if n.kind not in NODE_KINDS:
                raise ValidationError(f"node {nid}: unknown kind {n.kind!r}")
            if n.is_site:
                if n.capacity is None or n.unit_cost is None:
                    raise ValidationError(f"site {nid} needs capacity and unit_cost")
                if n.unit_cost.cpu < 0 or n.unit_cost.storage < 0:
                    raise ValidationError(f"site {nid}: unit costs must be >= 0")
            elif n.capacity is not None:
                raise ValidationError(f"{n.kind} node {nid} must not carry capacity")
        for link in self.links:
            for end in (link.src, link.dst):
                if end not in self.nodes:
                    raise DanglingReferenceError(f"link {link.src}-{link.dst} names unknown node {end!r}")
            if link.src == link.dst:
                raise ValidationError(f"self-loop on {link.src}")
            if not (math.isfinite(link.latency_ms) and link.latency_ms > 0):
                raise ValidationError(
                    f"link {link.src}-{link.dst}: latency_ms must be finite and > 0, got {link.latency_ms}")
        for ue in self.ues:
            if ue not in self.attachments:
                raise ValidationError(f"UE {ue} is not attached to a base station")
        for ue, bs in self.attachments.items():
            if ue not in self.nodes or bs not in self.nodes:
                raise DanglingReferenceError(f"attachment {ue}->{bs} names an unknown node")
            if self.nodes[ue].kind != "ue" or self.nodes[bs].kind != "bs":
                raise ValidationError(f"attachment {ue}->{bs} must map a ue to a bs")
        if self.base_stations and not self.sites:
            raise ValidationError("graph has base stations but no hosting site")
        if self.sites:
            lat = self.bs_site_latency
            for i, b in enumerate(self.base_stations):
                if not np.isfinite(lat[i]).any():
                    raise ValidationError(f"base station {b} cannot reach any edge site")

    def to_document(self) -> dict[str, Any]:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            d: dict[str, Any] = {"id": n.id, "kind": n.kind, "region": n.region}
            if n.is_site:
                d["capacity"] = {"cpu": n.capacity.cpu, "mem_gb": n.capacity.mem_gb,
                                 "storage_gb": n.capacity.storage_gb}
                d["unit_cost"] = {"cpu": n.unit_cost.cpu, "storage": n.unit_cost.storage}
                d["has_gpu"] = n.has_gpu
            nodes.append(d)
        return {
            "nodes": nodes,
            "links": [{"src": l.src, "dst": l.dst, "latency_ms": l.latency_ms} for l in self.links],
            "attachments": [{"ue": u, "bs": b} for u, b in sorted(self.attachments.items())],
        }


def shortest_path_latency(g: NetworkGraph, a: str, b: str) -> float:
    """Minimal summed link latency between two nodes; UNREACHABLE if disconnected."""
    return g.latency(a, b)


def neighbors_by_latency(g: NetworkGraph, site: str) -> list[tuple[str, float]]:
    """Other edge sites ordered by (latency, id) from ``site``."""
    if g.node(site).kind != "edge":
        raise DomainError(f"{site} is not an edge site")
    out = [(e, g.latency(site, e)) for e in g.edge_sites if e != site]
    out.sort(key=lambda t: (t[1], t[0]))
    return out


# -- parsing -------------------------------------------------------------------

def _req(d: Mapping, key: str, where: str):
    if not isinstance(d, Mapping):
        raise SchemaError(where, "expected an object")
    if key not in d:
        raise SchemaError(f"{where}.{key}", "missing required field")
    return d[key]


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(where, f"expected a number, got {v!r}")
    return float(v)


def _resources(d, where: str) -> ResourceVector:
    if not isinstance(d, Mapping):
        raise SchemaError(where, "expected an object")
    vals = {k: _num(d.get(k, 0.0), f"{where}.{k}") for k in ("cpu", "mem_gb", "storage_gb")}
    try:
        return ResourceVector(**vals)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def parse_topology(document: str | Mapping) -> NetworkGraph:
    """Parse and validate a topology document (JSON text or decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"invalid JSON: {exc}") from None
    raw_nodes = _req(document, "nodes", "topology")
    if not isinstance(raw_nodes, list):
        raise SchemaError("topology.nodes", "expected a list")
    nodes: dict[str, Node] = {}
    for i, rn in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        nid = str(_req(rn, "id", where))
        kind = _req(rn, "kind", where)
        if kind not in NODE_KINDS:
            raise SchemaError(f"{where}.kind", f"must be one of {NODE_KINDS}, got {kind!r}")
        if nid in nodes:
            raise ValidationError(f"duplicate node id {nid!r}")
        region = str(rn.get("region", ""))
        capacity = unit_cost = None
        has_gpu = False
        if kind in SITE_KINDS:
            capacity = _resources(_req(rn, "capacity", where), f"{where}.capacity")
            uc = _req(rn, "unit_cost", where)
            unit_cost = UnitCost(_num(_req(uc, "cpu", f"{where}.unit_cost"), f"{where}.unit_cost.cpu"),
                                 _num(_req(uc, "storage", f"{where}.unit_cost"), f"{where}.unit_cost.storage"))
            has_gpu = _req(rn, "has_gpu", where)
            if not isinstance(has_gpu, bool):
                raise SchemaError(f"{where}.has_gpu", "expected a boolean")
        elif "capacity" in rn:
            raise ValidationError(f"{where}: {kind} node {nid} must not carry capacity")
        nodes[nid] = Node(nid, kind, region, capacity, unit_cost, has_gpu)

    raw_links = document.get("links", [])
    if not isinstance(raw_links, list):
        raise SchemaError("topology.links", "expected a list")
    links = []
    for i, rl in enumerate(raw_links):
        where = f"links[{i}]"
        links.append(Link(str(_req(rl, "src", where)), str(_req(rl, "dst", where)),
                          _num(_req(rl, "latency_ms", where), f"{where}.latency_ms")))

    attachments: dict[str, str] = {}
    for i, ra in enumerate(document.get("attachments", [])):
        where = f"attachments[{i}]"
        ue, bs = str(_req(ra, "ue", where)), str(_req(ra, "bs", where))
        if ue in attachments and attachments[ue] != bs:
            raise ValidationError(f"UE {ue} attached to more than one BS")
        attachments[ue] = bs

    g = NetworkGraph(nodes, tuple(links), attachments)
    g.validate()
    return g


def load_topology(path: str | Path) -> NetworkGraph:
    return parse_topology(Path(path).read_text())

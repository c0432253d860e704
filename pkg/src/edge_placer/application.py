"""Microservice application model, workloads, and the bundled drone scenario."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ArityError, DanglingReferenceError, SchemaError, ValidationError
from .topology import ResourceVector, _num, _req, _resources

ANY_REGION = "any"

TIERS = {"ultra-low": 0.2, "moderate": 0.4, "relaxed": 0.6}
# strict -> relaxed, the order in which tiers are handed out to chains
TIER_ORDER = ("ultra-low", "moderate", "relaxed")

WORKLOAD_COMPOSITIONS = {
    "W1": {"relaxed": 2, "moderate": 7, "ultra-low": 4},
    "W2": {"relaxed": 2, "moderate": 4, "ultra-low": 7},
    "W3": {"relaxed": 2, "moderate": 2, "ultra-low": 9},
}


@dataclass(frozen=True)
class Microservice:
    id: str
    demand: ResourceVector = ResourceVector()
    needs_gpu: bool = False
    regions_allowed: frozenset[str] | str = ANY_REGION
    colocate_with: str | None = None

    def allows_region(self, region: str) -> bool:
        return self.regions_allowed == ANY_REGION or region in self.regions_allowed


@dataclass(frozen=True)
class ServiceChain:
    id: str
    services: tuple[str, ...]
    latency_limit_ms: float

    @property
    def members(self) -> tuple[str, ...]:
        """Distinct services in first-appearance order."""
        return tuple(dict.fromkeys(self.services))


@dataclass(frozen=True, eq=False)
class Application:
    microservices: Mapping[str, Microservice]
    chains: Mapping[str, ServiceChain]
    comm: Mapping[frozenset, float] = field(default_factory=dict)

    @property
    def service_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.microservices))

    @property
    def chain_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.chains))

    def colocation_pairs(self) -> list[tuple[str, str]]:
        pairs = set()
        for ms in self.microservices.values():
            if ms.colocate_with:
                pairs.add(tuple(sorted((ms.id, ms.colocate_with))))
        return sorted(pairs)

    def partner(self, sid: str) -> str | None:
        return self.microservices[sid].colocate_with

    def comm_pairs(self) -> list[tuple[str, str, float]]:
        return sorted((*sorted(k), r) for k, r in self.comm.items())

    def validate(self) -> None:
        for sid, ms in self.microservices.items():
            p = ms.colocate_with
            if p is None:
                continue
            if p not in self.microservices:
                raise DanglingReferenceError(f"{sid}.colocate_with names unknown microservice {p!r}")
            if p == sid:
                raise ValidationError(f"{sid} cannot be collocated with itself")
            back = self.microservices[p].colocate_with
            if back not in (None, sid):
                raise ValidationError(f"collocation of {sid} and {p} conflicts with {p}->{back}")
        for cid, c in self.chains.items():
            if not c.services:
                raise ValidationError(f"chain {cid} is empty")
            if not c.latency_limit_ms > 0:
                raise ValidationError(f"chain {cid}: latency_limit_ms must be > 0")
            for s in c.services:
                if s not in self.microservices:
                    raise DanglingReferenceError(f"chain {cid} references unknown microservice {s!r}")
        for pair, rate in self.comm.items():
            for s in pair:
                if s not in self.microservices:
                    raise DanglingReferenceError(f"comm pair references unknown microservice {s!r}")
            if rate < 0:
                raise ValidationError(f"comm rate for {sorted(pair)} must be >= 0")

    def to_document(self) -> dict[str, Any]:
        ms = []
        for sid in self.service_ids:
            m = self.microservices[sid]
            regions = m.regions_allowed if m.regions_allowed == ANY_REGION else sorted(m.regions_allowed)
            ms.append({
                "id": sid,
                "demand": {"cpu": m.demand.cpu, "mem_gb": m.demand.mem_gb, "storage_gb": m.demand.storage_gb},
                "needs_gpu": m.needs_gpu,
                "regions_allowed": regions,
                "colocate_with": m.colocate_with,
            })
        chains = [{"id": c.id, "services": list(c.services), "latency_limit_ms": c.latency_limit_ms}
                  for c in (self.chains[k] for k in self.chain_ids)]
        comm = [{"a": a, "b": b, "rate": r} for a, b, r in self.comm_pairs()]
        return {"microservices": ms, "chains": chains, "comm": comm}


@dataclass(frozen=True)
class Workload:
    id: str
    chain_limits: Mapping[str, float]

    def limit(self, chain_id: str) -> float:
        return self.chain_limits[chain_id]

    def to_document(self) -> dict[str, Any]:
        return {"id": self.id, "chain_limits": dict(sorted(self.chain_limits.items()))}


def parse_application(document: str | Mapping) -> Application:
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"invalid JSON: {exc}") from None
    raw_ms = _req(document, "microservices", "application")
    if not isinstance(raw_ms, list):
        raise SchemaError("application.microservices", "expected a list")
    services: dict[str, Microservice] = {}
    for i, rm in enumerate(raw_ms):
        where = f"microservices[{i}]"
        sid = str(_req(rm, "id", where))
        if sid in services:
            raise ValidationError(f"duplicate microservice id {sid!r}")
        demand = _resources(rm.get("demand", {}), f"{where}.demand")
        needs_gpu = rm.get("needs_gpu", False)
        if not isinstance(needs_gpu, bool):
            raise SchemaError(f"{where}.needs_gpu", "expected a boolean")
        regions = rm.get("regions_allowed", ANY_REGION)
        if regions != ANY_REGION:
            if isinstance(regions, str) or not isinstance(regions, list):
                raise SchemaError(f"{where}.regions_allowed", 'expected "any" or a list of region tokens')
            regions = frozenset(str(r) for r in regions)
        partner = rm.get("colocate_with")
        services[sid] = Microservice(sid, demand, needs_gpu, regions,
                                     None if partner is None else str(partner))

    # make collocation symmetric
    for sid, ms in list(services.items()):
        p = ms.colocate_with
        if p and p in services and services[p].colocate_with is None:
            services[p] = Microservice(p, services[p].demand, services[p].needs_gpu,
                                       services[p].regions_allowed, sid)

    raw_chains = _req(document, "chains", "application")
    if not isinstance(raw_chains, list):
        raise SchemaError("application.chains", "expected a list")
    if not raw_chains:
        raise ValidationError("application.chains must not be empty")
    chains: dict[str, ServiceChain] = {}
    for i, rc in enumerate(raw_chains):
        where = f"chains[{i}]"
        cid = str(_req(rc, "id", where))
        if cid in chains:
            raise ValidationError(f"duplicate chain id {cid!r}")
        svc = _req(rc, "services", where)
        if not isinstance(svc, list):
            raise SchemaError(f"{where}.services", "expected a list")
        limit = _num(_req(rc, "latency_limit_ms", where), f"{where}.latency_limit_ms")
        chains[cid] = ServiceChain(cid, tuple(str(s) for s in svc), limit)

    comm: dict[frozenset, float] = {}
    for i, rc in enumerate(document.get("comm", [])):
        where = f"comm[{i}]"
        a, b = str(_req(rc, "a", where)), str(_req(rc, "b", where))
        if a == b:
            raise ValidationError(f"{where}: comm pair needs two distinct microservices")
        comm[frozenset((a, b))] = _num(_req(rc, "rate", where), f"{where}.rate")

    app = Application(services, chains, comm)
    app.validate()
    return app


def load_application(path: str | Path) -> Application:
    return parse_application(Path(path).read_text())


def build_workload(app: Application, composition: Mapping[str, int], workload_id: str = "custom") -> Workload:
    """Hand out latency tiers to chains sorted by id, strictest tier first."""
    unknown = set(composition) - set(TIERS)
    if unknown:
        raise ValidationError(f"unknown tiers {sorted(unknown)}; expected {sorted(TIERS)}")
    if any(v < 0 for v in composition.values()):
        raise ValidationError("tier counts must be >= 0")
    total = sum(composition.values())
    if total != len(app.chains):
        raise ArityError(f"tier counts sum to {total}, application has {len(app.chains)} chains")
    limits = {}
    ids = iter(app.chain_ids)
    for tier in TIER_ORDER:
        for _ in range(composition.get(tier, 0)):
            limits[next(ids)] = TIERS[tier]
    return Workload(workload_id, limits)


def default_workload(app: Application) -> Workload:
    """The limits written in the application document itself."""
    return Workload("custom", {c.id: c.latency_limit_ms for c in app.chains.values()})


def parse_workload(document: str | Mapping, app: Application) -> Workload:
    if isinstance(document, (str, bytes)):
        document = json.loads(document)
    if "composition" in document:
        return build_workload(app, document["composition"], str(document.get("id", "custom")))
    limits = {str(k): _num(v, f"chain_limits.{k}") for k, v in _req(document, "chain_limits", "workload").items()}
    if set(limits) != set(app.chains):
        raise ArityError("workload must give exactly one limit per chain")
    return Workload(str(document.get("id", "custom")), limits)


# -- bundled drone swarm scenario ---------------------------------------------

DRONE_CHAINS = {
    "Frontend": ["loadBal", "nginx", "cCtrl"],
    "Controller Cloud": ["nginx", "cCtrl", "consRoute", "eCtrl"],
    "Controller Edge": ["cCtrl", "eCtrl", "mCtrl", "camVid", "camImg", "loc", "speed", "lum", "orient"],
    "Construct Route": ["cCtrl", "consRoute", "eCtrl", "targetDB"],
    "Image": ["cCtrl", "eCtrl", "camImg", "imageDB"],
    "Video": ["cCtrl", "eCtrl", "camVid", "videoDB"],
    "Location": ["cCtrl", "eCtrl", "loc", "locationDB"],
    "Speed": ["cCtrl", "eCtrl", "speed", "speedDB"],
    "Luminosity": ["cCtrl", "eCtrl", "lum", "luminosityDB"],
    "Orientation": ["cCtrl", "eCtrl", "orient", "orientationDB"],
    "Motion Control": ["cCtrl", "eCtrl", "mCtrl", "imgRecog", "obsAvoid"],
    "Image Recog": ["eCtrl", "mCtrl", "imgRecog", "stockImageDB"],
    "Obs Avoidance": ["eCtrl", "mCtrl", "obsAvoid", "log"],
}

GPU_SHARE = 0.20
REGION_SHARE = 0.20
COLOCATION_SHARE = 0.10
RESTRICTED_REGION = "south"


def _share(n: int, frac: float) -> int:
    # round half up
    return int(n * frac + 0.5)


def drone_application(restricted_region: str = RESTRICTED_REGION) -> Application:
    ids = sorted({s for svcs in DRONE_CHAINS.values() for s in svcs})
    n = len(ids)
    n_gpu = _share(n, GPU_SHARE)
    n_region = _share(n, REGION_SHARE)
    # a share of 10% of 23 rounds to 2, i.e. one pair
    n_pairs = max(1, _share(n, COLOCATION_SHARE) // 2)

    free = list(ids)
    gpu = set(free[:n_gpu])
    free = [s for s in free if s not in gpu]
    region = set(free[:n_region])
    free = [s for s in free if s not in region]
    colocated = free[: 2 * n_pairs]
    partner = {}
    for a, b in zip(colocated[::2], colocated[1::2]):
        partner[a], partner[b] = b, a

    services = {}
    for sid in ids:
        storage = 10.0 if sid.endswith("DB") else 1.0
        services[sid] = Microservice(
            sid,
            ResourceVector(cpu=1.0, mem_gb=1.0, storage_gb=storage),
            needs_gpu=sid in gpu,
            regions_allowed=frozenset({restricted_region}) if sid in region else ANY_REGION,
            colocate_with=partner.get(sid),
        )
    chains = {cid: ServiceChain(cid, tuple(svcs), TIERS["relaxed"]) for cid, svcs in DRONE_CHAINS.items()}
    comm: dict[frozenset, float] = {}
    for svcs in DRONE_CHAINS.values():
        for a, b in zip(svcs, svcs[1:]):
            comm[frozenset((a, b))] = 1.0
    app = Application(services, chains, comm)
    app.validate()
    return app


def bundled_drone_scenario() -> tuple[Application, list[Workload]]:
    app = drone_application()
    workloads = [build_workload(app, comp, wid) for wid, comp in WORKLOAD_COMPOSITIONS.items()]
    return app, workloads

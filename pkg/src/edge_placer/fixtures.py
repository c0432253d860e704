"""Bundled topologies and the drone scenario."""
from __future__ import annotations

from importlib import resources

from .application import Application, Workload, bundled_drone_scenario
from .topology import NetworkGraph, parse_topology


def _read(name: str) -> str:
    return resources.files("edge_placer").joinpath("data", name).read_text()


def toy4() -> NetworkGraph:
    """Four edge sites, three base stations; small enough to check by hand."""
    return parse_topology(_read("toy4.json"))


def drone_topology() -> NetworkGraph:
    """Four edge sites (one remote) and six base stations for the drone application."""
    return parse_topology(_read("drone4.json"))


def drone_scenario() -> tuple[NetworkGraph, Application, dict[str, Workload]]:
    app, workloads = bundled_drone_scenario()
    return drone_topology(), app, {w.id: w for w in workloads}

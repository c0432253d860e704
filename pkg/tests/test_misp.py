import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from builders import application, assignment_oracle as oracle, cost_matrix as matrix, ms
from edge_placer.application import Workload
from edge_placer.costs import build_tmatrix, placement_cost
from edge_placer.errors import InfeasibleError
from edge_placer.misp import _branch_and_bound, ensure_latency, local_search, mip_solve, misp_place
from edge_placer.placement import Placement, chain_latency, coverage, validate_placement
from edge_placer.topology import ResourceVector


def unit_app(services):
    return application(services, {"all": (list(services), 1.0)})


def test_three_by_two_example():
    app = unit_app(["s1", "s2", "s3"])
    t = matrix(app.service_ids, ["e1", "e2"], [[1, 2], [2, 1], [3, 3]])
    caps = {"e1": ResourceVector(2, 2, 2), "e2": ResourceVector(2, 2, 2)}
    p = mip_solve(t, caps, app)
    assert p.assignments == {"e1": frozenset({"s1", "s3"}), "e2": frozenset({"s2"})}
    assert sum(t(s, e) for e, s in p.instances()) == 5


def test_single_feasible_site():
    app = unit_app(["s"])
    t = matrix(["s"], ["e1", "e2"], [[1, 1]], forbidden=[[True, False]])
    caps = {"e1": ResourceVector(9, 9, 9), "e2": ResourceVector(9, 9, 9)}
    assert mip_solve(t, caps, app).hosts("s") == ["e2"]


def test_forbidden_cell_avoided_when_alternative_exists():
    app = unit_app(["a", "b"])
    # the cheap-looking e1 cell for b is forbidden
    t = matrix(["a", "b"], ["e1", "e2"], [[1, 5], [0, 5]], forbidden=[[False, False], [True, False]])
    caps = {"e1": ResourceVector(9, 9, 9), "e2": ResourceVector(9, 9, 9)}
    p = mip_solve(t, caps, app)
    assert p.hosts("b") == ["e2"]


def test_only_forbidden_is_infeasible():
    app = unit_app(["a"])
    t = matrix(["a"], ["e1"], [[1]], forbidden=[[True]])
    with pytest.raises(InfeasibleError):
        mip_solve(t, {"e1": ResourceVector(9, 9, 9)}, app)


def test_capacity_infeasible():
    app = unit_app(["a", "b", "c"])
    t = matrix(app.service_ids, ["e1"], [[1], [1], [1]])
    with pytest.raises(InfeasibleError):
        mip_solve(t, {"e1": ResourceVector(2, 2, 2)}, app)


def test_collocated_pair_lands_together():
    app = application([ms("a", colocate="b"), ms("b"), ms("c")], {"all": (["a", "b", "c"], 1.0)})
    t = matrix(app.service_ids, ["e1", "e2"], [[1, 9], [9, 1], [1, 1]])
    caps = {"e1": ResourceVector(5, 5, 5), "e2": ResourceVector(5, 5, 5)}
    p = mip_solve(t, caps, app)
    assert p.hosts("a") == p.hosts("b")


@st.composite
def assignment_instances(draw):
    n, m = draw(st.integers(1, 6)), draw(st.integers(1, 4))
    entries = np.array([[draw(st.integers(0, 9)) for _ in range(m)] for _ in range(n)], dtype=float)
    forbidden = np.array([[draw(st.integers(0, 4)) == 0 for _ in range(m)] for _ in range(n)])
    demands = np.array([[draw(st.integers(0, 3)) for _ in range(3)] for _ in range(n)], dtype=float)
    caps = np.array([[draw(st.integers(0, 8)) for _ in range(3)] for _ in range(m)], dtype=float)
    return entries, forbidden, demands, caps


@given(assignment_instances())
def test_mip_matches_exhaustive_oracle(inst):
    entries, forbidden, demands, caps = inst
    n, m = entries.shape
    services = [f"s{i}" for i in range(n)]
    sites = [f"e{j}" for j in range(m)]
    app = application([ms(s, *demands[i]) for i, s in enumerate(services)], {"all": (services, 1.0)})
    t = matrix(services, sites, entries, forbidden)
    expect = oracle(t.entries, forbidden, demands, caps)
    capmap = {e: ResourceVector(*caps[j]) for j, e in enumerate(sites)}
    if expect is None:
        with pytest.raises(InfeasibleError):
            mip_solve(t, capmap, app)
        return
    p = mip_solve(t, capmap, app)
    got = tuple(sites.index(p.hosts(s)[0]) for s in services)
    assert got == expect[0]


@given(assignment_instances())
def test_branch_and_bound_matches_oracle(inst):
    entries, _, demands, caps = inst
    expect = oracle(entries, np.zeros_like(entries, dtype=bool), demands, caps)
    got = _branch_and_bound(entries, demands, caps)
    if expect is None:
        assert got is None
    else:
        assert got[0] == expect[0]
        assert got[1] == pytest.approx(expect[1])


# -- local search -----------------------------------------------------------------

def test_local_search_no_comm_is_identity(toy):
    app = unit_app(["a", "b"])
    t = build_tmatrix(app, toy)
    p = Placement({"E1": {"a"}, "E3": {"b"}})
    assert local_search(p, t, app, toy) == p


def test_local_search_merges_heavy_pair(toy):
    app = application(["a", "b"], {"ab": (["a", "b"], 1.0)}, comm=[("a", "b", 50.0)])
    t = build_tmatrix(app, toy)
    p = Placement({"E1": {"a"}, "E3": {"b"}})
    q = local_search(p, t, app, toy)
    assert len(q.assignments) == 1
    assert placement_cost(q, t, app, toy) < placement_cost(p, t, app, toy)


def test_local_search_blocked_moves(toy):
    # both services are pinned by region to their current sites
    app = application([ms("a", regions=["north"]), ms("b", regions=["south"])], {"ab": (["a", "b"], 1.0)},
                      comm=[("a", "b", 50.0)])
    t = build_tmatrix(app, toy)
    north_only = application([ms("a", gpu=True, regions=["north"]), ms("b", gpu=True, regions=["south"])],
                             {"ab": (["a", "b"], 1.0)}, comm=[("a", "b", 50.0)])
    t2 = build_tmatrix(north_only, toy)
    p = Placement({"E1": {"a"}, "E4": {"b"}})
    assert local_search(p, t2, north_only, toy) == p
    assert placement_cost(local_search(p, t, app, toy), t, app, toy) <= placement_cost(p, t, app, toy)


# -- latency repair -----------------------------------------------------------------

def test_ensure_latency_noop_when_met(toy):
    app = unit_app(["x"])
    w = Workload("w", {"all": 1.0})
    p = Placement({"E1": {"x"}})
    assert ensure_latency(p, toy, app, w, build_tmatrix(app, toy)) == p


def test_ensure_latency_adds_replica_near_b3(toy):
    app = unit_app(["x"])
    w = Workload("w", {"all": 0.25})
    p = Placement({"E1": {"x"}})
    assert chain_latency(toy, p, "B3", app.chains["all"]) == pytest.approx(0.30)
    q = ensure_latency(p, toy, app, w, build_tmatrix(app, toy))
    assert q.hosts("x") == ["E1", "E2"]  # E2 is B3's nearest site (0.20)
    assert chain_latency(toy, q, "B3", app.chains["all"]) <= 0.25


def test_ensure_latency_gives_up_below_link_floor(toy):
    app = unit_app(["x"])
    w = Workload("w", {"all": 0.01})
    p = Placement({"E1": {"x"}})
    q = ensure_latency(p, toy, app, w, build_tmatrix(app, toy))
    assert q.instance_count >= p.instance_count
    assert coverage(toy, q, app, w).coverage_pct == 0.0


# -- pipeline -------------------------------------------------------------------------

@pytest.mark.parametrize("wid", ["W1", "W2", "W3"])
def test_drone_coverage_and_validity(drone, wid):
    g, app, ws = drone
    p = misp_place(g, app, ws[wid])
    assert coverage(g, p, app, ws[wid]).coverage_pct == 100.0
    assert validate_placement(p, app, g).ok


def test_prev_equal_to_optimum_is_kept(drone):
    g, app, ws = drone
    fresh = misp_place(g, app, ws["W1"])
    assert misp_place(g, app, ws["W1"], prev=fresh) == fresh


def test_counts_monotone(drone):
    g, app, ws = drone
    counts = [misp_place(g, app, ws[w]).instance_count for w in ("W1", "W2", "W3")]
    assert counts == sorted(counts)
    assert all(math.isfinite(c) for c in counts)

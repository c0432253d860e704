import itertools
import math

import pytest
from hypothesis import given, strategies as st

from builders import application, bs, link, ms, site, topology
from edge_placer.costs import (KAPPA_FACTOR, CostBreakdown, ScoreWeights, build_tmatrix, communication_cost,
                               compute_cost, deployment_cost, max_placement_cost, normalize, placement_cost,
                               score)
from edge_placer.errors import ValidationError
from edge_placer.placement import Placement, validate_placement


@pytest.fixture(scope="module")
def pair_app():
    return application(["a", "b", "c"], {"ab": (["a", "b"], 1.0), "c": (["c"], 1.0)}, comm=[("a", "b", 1.0)])


def test_gamma_arithmetic():
    g = topology([site("E1", ucpu=2.0, ustor=0.1), bs("B1")], [link("B1", "E1", 0.1)])
    app = application([ms("s", cpu=1, storage=10)], {"c": (["s"], 1.0)})
    t = build_tmatrix(app, g)
    assert t("s", "E1") == pytest.approx(3.0)
    assert compute_cost(app, g, "s", "E1") == pytest.approx(3.0)


def test_gpu_cell_is_kappa(toy):
    app = application([ms("g", gpu=True), ms("n")], {"c": (["g", "n"], 1.0)})
    t = build_tmatrix(app, toy)
    assert t.is_forbidden("g", "E2") and t("g", "E2") == t.kappa
    assert not t.is_forbidden("g", "E1")
    finite = [t(s, e) for s in ("g", "n") for e in toy.sites if not t.is_forbidden(s, e)]
    assert t.kappa == KAPPA_FACTOR * (max(finite) + 1)


def test_relocation_surcharge(toy, pair_app):
    prev = Placement({"E1": {"a"}})
    t = build_tmatrix(pair_app, toy, prev)
    gamma = compute_cost(pair_app, toy, "a", "E2")
    assert t("a", "E1") == pytest.approx(compute_cost(pair_app, toy, "a", "E1"))
    assert t("a", "E2") == pytest.approx(1.5 * gamma)
    # services without a previous host are never surcharged
    assert t("b", "E2") == pytest.approx(compute_cost(pair_app, toy, "b", "E2"))


def test_kappa_dominates_feasible_totals(drone):
    g, app, _ = drone
    t = build_tmatrix(app, g)
    assert t.kappa > max_placement_cost(app, g, t)


def test_forbidden_cells_match_validation(drone):
    g, app, _ = drone
    t = build_tmatrix(app, g)
    for s, e in itertools.product(app.service_ids, g.sites):
        rep = validate_placement(Placement({e: {s}}), app, g)
        assert t.is_forbidden(s, e) == bool(rep.gpu_violations or rep.locality_violations)


def test_score_examples():
    assert score(ScoreWeights(1, 0, 0, 0, 0), CostBreakdown(deploy=0.7)) == pytest.approx(0.7)
    assert score(ScoreWeights(), CostBreakdown(1.0, 0.5, 0.5, 0, 0)) == pytest.approx(0.4)
    assert score(ScoreWeights(), CostBreakdown()) == 0


@pytest.mark.parametrize("ws", [(0.5, 0.5, 0.5, 0, 0), (1.2, -0.2, 0, 0, 0)])
def test_weight_validation(ws):
    with pytest.raises(ValidationError):
        ScoreWeights(*ws)


def test_weights_parse():
    assert ScoreWeights.parse("1,0,0,0,0") == ScoreWeights(1, 0, 0, 0, 0)
    with pytest.raises(ValidationError):
        ScoreWeights.parse("0.5,0.5")


simplex = st.lists(st.integers(0, 20), min_size=5, max_size=5).filter(sum).map(
    lambda xs: [x / sum(xs) for x in xs])
unit = st.floats(0, 1)


@given(simplex, st.lists(unit, min_size=5, max_size=5), st.permutations(range(5)))
def test_score_permutation_invariant(ws, comps, perm):
    direct = sum(w * c for w, c in zip(ws, comps))
    shuffled = sum(ws[i] * comps[i] for i in perm)
    assert score(ScoreWeights(*ws), CostBreakdown(*comps)) == pytest.approx(direct)
    assert shuffled == pytest.approx(direct)


@given(st.lists(st.lists(st.floats(0, 100), min_size=5, max_size=5), min_size=1, max_size=6))
def test_normalize_bounds(rows):
    out = normalize([CostBreakdown(*r) for r in rows])
    for k in range(5):
        top = max(r[k] for r in rows)
        for raw, n in zip(rows, out):
            c = n.components()[k]
            assert 0.0 <= c <= 1.0
            assert c == (0.0 if top == 0 else pytest.approx(raw[k] / top))


def test_placement_cost_examples(toy, pair_app):
    t = build_tmatrix(pair_app, toy)
    assert placement_cost(Placement(), t, pair_app, toy) == 0
    single = application(["s"], {"c": (["s"], 1.0)})
    ts = build_tmatrix(single, toy)
    assert placement_cost(Placement({"E3": {"s"}}), ts, single, toy) == pytest.approx(ts("s", "E3"))
    p = Placement({"E1": {"a", "c"}, "E3": {"b"}})
    tau = t("a", "E1") + t("c", "E1") + t("b", "E3")
    assert placement_cost(p, t, pair_app, toy) == pytest.approx(tau + 0.20)


def test_communication_examples(toy):
    app = application(["a", "b"], {"ab": (["a", "b"], 1.0)}, comm=[("a", "b", 2.0)])
    total, per = communication_cost(Placement({"E1": {"a"}, "E4": {"b"}}), app, toy)
    assert total == pytest.approx(0.30)
    assert per == pytest.approx({"a": 0.30, "b": 0.30})
    assert communication_cost(Placement({"E1": {"a", "b"}}), app, toy)[0] == 0
    assert communication_cost(Placement({"E1": {"a"}}), app, toy)[0] == math.inf
    plain = application(["a"], {"c": (["a"], 1.0)})
    assert communication_cost(Placement({"E1": {"a"}}), plain, toy) == (0.0, {"a": 0.0})


@given(st.sets(st.sampled_from(["E1", "E2", "E3", "E4"])), st.sets(st.sampled_from(["E1", "E2", "E3", "E4"])))
def test_cost_additive_without_comm(toy, left, right):
    app = application(["a", "b"], {"c": (["a", "b"], 1.0)})
    t = build_tmatrix(app, toy)
    p1 = Placement({e: {"a"} for e in left})
    p2 = Placement({e: {"b"} for e in right})
    both = p1.union(p2)
    assert placement_cost(both, t, app, toy) == pytest.approx(
        placement_cost(p1, t, app, toy) + placement_cost(p2, t, app, toy))


def test_deployment_cost_never_charges_kappa(toy):
    app = application([ms("n", regions=["north"])], {"c": (["n"], 1.0)})
    p = Placement({"E3": {"n"}})
    assert deployment_cost(p, app, toy) == pytest.approx(compute_cost(app, toy, "n", "E3"))
    moved = deployment_cost(p, app, toy, prev=Placement({"E1": {"n"}}))
    assert moved == pytest.approx(1.5 * compute_cost(app, toy, "n", "E3"))

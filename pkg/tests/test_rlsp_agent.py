import itertools

import numpy as np
import pytest

from builders import application, ms, random_policy, random_ppo_batch
from edge_placer.application import Workload
from edge_placer.errors import DivergenceError, SchemaError
from edge_placer.misp import misp_place
from edge_placer.placement import coverage, validate_placement
from edge_placer.rlsp_agent import (AgentConfig, PolicyParameters, RolloutBatch, collect_rollout, gae,
                                    greedy_rollout, init_params, joint_log_prob, load_checkpoint,
                                    policy_forward, ppo_loss_and_grad, ppo_update, save_checkpoint, train)
from edge_placer.rlsp_env import DEPLOY, HOLD, PlacementEnv, VecPlacementEnv

TINY = AgentConfig(n_envs=2, horizon=16, minibatch=8, epochs=2, total_steps=64, eval_every=0)


@pytest.fixture(scope="module")
def tiny_scenario(toy):
    app = application([ms("a"), ms("b")], {"ab": (["a", "b"], 0.5)})
    return toy, app, Workload("w", {"ab": 0.5})


def test_drone_head_sizes(drone):
    g, app, ws = drone
    venv = VecPlacementEnv(g, app, ws["W1"])
    p = init_params(len(venv.feature_scale()), venv.head_sizes)
    assert p.heads == (3, 23, 4)


def test_init_heads_near_uniform(drone):
    g, app, ws = drone
    venv = VecPlacementEnv(g, app, ws["W1"])
    scale = venv.feature_scale()
    p = init_params(len(scale), venv.head_sizes, obs_scale=scale)
    probs, v = policy_forward(p, venv.features()[0])
    for head in probs:
        assert head.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(np.abs(head * len(head) - 1.0) <= 0.1)
    assert np.isfinite(v)


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    p = random_policy(rng)
    x = rng.standard_normal(3)
    a, b = policy_forward(p, x), policy_forward(p, x)
    assert all(np.array_equal(u, w) for u, w in zip(a[0], b[0])) and a[1] == b[1]


def test_joint_log_prob_by_enumeration():
    rng = np.random.default_rng(1)
    p = random_policy(rng)
    x = rng.standard_normal(3)
    probs, _ = policy_forward(p, x)
    joint = np.zeros((3, 2, 2))
    for a in itertools.product(range(3), range(2), range(2)):
        joint[a] = np.exp(joint_log_prob(p, x, np.array(a))[0])
    assert joint.sum() == pytest.approx(1.0)
    outer = np.einsum("i,j,k->ijk", *probs)
    np.testing.assert_allclose(joint, outer, rtol=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = random_policy(rng)
    obs, actions, logp_old, adv, ret = random_ppo_batch(rng, p)
    cfg = AgentConfig()
    _, gp, gv, _ = ppo_loss_and_grad(p, obs, actions, logp_old, adv, ret, cfg)
    analytic = PolicyParameters(gp, gv, p.heads, p.obs_scale).flat()
    x0 = p.flat()
    numeric = np.zeros_like(x0)
    h = 1e-6
    q = p.copy()
    for i in range(len(x0)):
        for sign in (1, -1):
            x = x0.copy()
            x[i] += sign * h
            q.set_flat(x)
            numeric[i] += sign * ppo_loss_and_grad(q, obs, actions, logp_old, adv, ret, cfg)[0] / (2 * h)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic + numeric)
    assert rel < 1e-4


def test_clipped_branch_has_zero_policy_gradient():
    rng = np.random.default_rng(3)
    p = random_policy(rng)
    obs, actions, _, _, ret = random_ppo_batch(rng, p)
    # r = e > 1 + eps with positive advantage: the clipped constant is the minimum
    logp_old = joint_log_prob(p, obs, actions) - 1.0
    cfg = AgentConfig(ent_coef=0.0)
    _, gp, _, info = ppo_loss_and_grad(p, obs, actions, logp_old, np.ones(len(obs)), ret, cfg)
    assert info["clip_frac"] == 1.0
    assert all(np.all(g == 0) for g in gp.values())


def test_zero_advantage_leaves_only_value_and_entropy():
    rng = np.random.default_rng(4)
    p = random_policy(rng)
    obs, actions, logp_old, _, ret = random_ppo_batch(rng, p)
    zero = np.zeros(len(obs))
    _, gp, gv, info = ppo_loss_and_grad(p, obs, actions, logp_old, zero, ret, AgentConfig(ent_coef=0.0))
    assert info["policy_loss"] == 0
    assert all(np.all(g == 0) for g in gp.values())
    assert any(np.any(g != 0) for g in gv.values())
    _, gp, _, _ = ppo_loss_and_grad(p, obs, actions, logp_old, zero, ret, AgentConfig(ent_coef=0.01))
    assert any(np.any(g != 0) for g in gp.values())


def test_gae_base_case():
    adv, ret = gae([[2.0]], [[0.5]], [[0.0]], [1.5], 0.99, 0.95)
    assert adv[0, 0] == pytest.approx(2.0 + 0.99 * 1.5 - 0.5)
    assert ret[0, 0] == pytest.approx(2.0 + 0.99 * 1.5)
    adv, _ = gae([[2.0]], [[0.5]], [[1.0]], [1.5], 0.99, 0.95)
    assert adv[0, 0] == pytest.approx(1.5)


def test_gae_matches_discounted_sums():
    rng = np.random.default_rng(5)
    r, v = rng.standard_normal((6, 1)), rng.standard_normal((6, 1))
    # with lam = 1 the advantage is the discounted return minus the baseline
    adv, ret = gae(r, v, np.zeros((6, 1)), [0.0], 0.9, 1.0)
    expect = [sum(0.9 ** (k - t) * r[k, 0] for k in range(t, 6)) for t in range(6)]
    np.testing.assert_allclose(ret[:, 0], expect)
    adv0, ret0 = gae(np.zeros((6, 1)), np.zeros((6, 1)), np.zeros((6, 1)), [0.0], 0.9, 0.95)
    assert not ret0.any() and not adv0.any()


def test_rollout_shape_and_seed(tiny_scenario):
    g, app, w = tiny_scenario
    batches = []
    for _ in range(2):
        venv = VecPlacementEnv(g, app, w, n_envs=1)
        p = init_params(len(venv.feature_scale()), venv.head_sizes, seed=0, obs_scale=venv.feature_scale())
        batches.append(collect_rollout(venv, p, 1, 7, TINY))
    a, b = batches
    assert len(a) == 1
    for field in ("obs", "actions", "logp", "rewards", "values", "advantages", "returns"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert np.isfinite(a.advantages).all()


def test_update_rejects_nonfinite(tiny_scenario):
    g, app, w = tiny_scenario
    venv = VecPlacementEnv(g, app, w, n_envs=2)
    p = init_params(len(venv.feature_scale()), venv.head_sizes, obs_scale=venv.feature_scale())
    batch = collect_rollout(venv, p, 8, 0, TINY)
    bad = RolloutBatch(batch.obs, batch.actions, batch.logp, batch.rewards, batch.values, batch.dones,
                       batch.advantages, batch.returns * np.nan)
    with pytest.raises(DivergenceError):
        ppo_update(p, bad, TINY, np.random.default_rng(0))


def test_divergence_checkpoints_last_state(tiny_scenario, tmp_path):
    g, app, w = tiny_scenario
    venv = VecPlacementEnv(g, app, w, n_envs=2)
    p = init_params(len(venv.feature_scale()), venv.head_sizes, obs_scale=venv.feature_scale())
    p.value["b2"][:] = np.nan
    ck = tmp_path / "ck.json"
    with pytest.raises(DivergenceError):
        train(g, app, w, TINY, init=p, checkpoint=ck)
    assert ck.is_file()


def test_zero_budget_returns_init(tiny_scenario):
    g, app, w = tiny_scenario
    venv = VecPlacementEnv(g, app, w)
    p = init_params(len(venv.feature_scale()), venv.head_sizes, seed=3, obs_scale=venv.feature_scale())
    for cfg in (AgentConfig(total_steps=0, eval_every=0), AgentConfig(total_steps=0)):
        res = train(g, app, w, cfg, seed=3, init=p)
        assert res.steps == 0
        assert np.array_equal(res.params.flat(), p.flat())
    fresh = train(g, app, w, AgentConfig(total_steps=0, eval_every=0), seed=3)
    assert np.array_equal(fresh.params.flat(), p.flat())


def test_checkpoint_round_trip(tiny_scenario, tmp_path):
    g, app, w = tiny_scenario
    res = train(g, app, w, TINY, seed=1, checkpoint=tmp_path / "a.json")
    params, cfg, meta = load_checkpoint(tmp_path / "a.json")
    assert np.array_equal(params.flat(), res.params.flat())
    assert params.heads == res.params.heads and cfg == TINY
    assert meta == {"seed": 1, "steps": res.steps}


def test_checkpoint_version_checked(tiny_scenario, tmp_path):
    g, app, w = tiny_scenario
    venv = VecPlacementEnv(g, app, w)
    save_checkpoint(tmp_path / "c.json", init_params(len(venv.feature_scale()), venv.head_sizes), TINY, 0, 0)
    text = (tmp_path / "c.json").read_text().replace('"version": 1', '"version": 99')
    (tmp_path / "c.json").write_text(text)
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "c.json")


def test_training_is_byte_deterministic(tiny_scenario, tmp_path):
    g, app, w = tiny_scenario
    cfg = AgentConfig(n_envs=4, horizon=64, minibatch=16, total_steps=256, eval_every=2)
    for name in ("x", "y"):
        train(g, app, w, cfg, seed=11, checkpoint=tmp_path / f"{name}.json")
    assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()


def _biased(env, act_type, micro=0, site=0):
    venv = env.core
    p = init_params(len(venv.feature_scale()), venv.head_sizes, obs_scale=venv.feature_scale())
    p.policy["W2"][:] = 0.0
    b = np.zeros(sum(p.heads))
    b[act_type] = b[3 + micro] = b[3 + p.heads[1] + site] = 10.0
    p.policy["b2"] = b
    return p


def test_hold_policy_is_stationary(tiny_scenario):
    g, app, w = tiny_scenario
    env = PlacementEnv(g, app, w)
    ex = greedy_rollout(env, _biased(env, HOLD))
    assert ex.stationary and ex.changes == 0 and ex.steps == 20


def test_single_deploy_then_stationary(tiny_scenario):
    g, app, w = tiny_scenario
    env = PlacementEnv(g, app, w)
    ex = greedy_rollout(env, _biased(env, DEPLOY, 1, 2))
    assert ex.stationary and ex.changes == 1 and ex.steps == 21
    assert ex.placement.hosts(app.service_ids[1]) == [env.sites[2]]


@pytest.mark.slow
def test_trained_agent_extraction(drone, trained):
    g, app, ws = drone
    res = trained(0)
    assert res.converged
    ex = greedy_rollout(PlacementEnv(g, app, ws["W3"]), res.params)
    assert validate_placement(ex.placement, app, g).hard_ok()
    # the strictest limits are elementwise tightest, so this placement serves every workload
    for wid in ("W1", "W2", "W3"):
        assert coverage(g, ex.placement, app, ws[wid]).coverage_pct == 100.0
    assert ex.placement.instance_count <= misp_place(g, app, ws["W3"]).instance_count


@pytest.mark.slow
def test_retraining_converged_agent_keeps_coverage(drone, trained):
    g, app, ws = drone
    res = trained(0)
    again = train(g, app, ws["W3"], AgentConfig(total_steps=20_480), seed=5, init=res.params)
    ex = greedy_rollout(PlacementEnv(g, app, ws["W3"]), again.params)
    assert coverage(g, ex.placement, app, ws["W3"]).coverage_pct == 100.0

"""Clipped-surrogate policy gradient agent over the multi-discrete placement actions.

Everything (forward pass, backpropagation, Adam) is plain numpy. The policy
and the value function are separate two-layer tanh networks; the policy
outputs the concatenated logits of three independent categorical heads
(action type, microservice, site).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .application import Application, Workload
from .atomic import atomic_write_text
from .errors import ContractError, DivergenceError, SchemaError
from .placement import Placement, coverage
from .rlsp_env import DEPLOY, EVICT, VALID, Action, PlacementEnv, RewardConfig, VecPlacementEnv
from .topology import NetworkGraph

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AgentConfig:
    hidden: int = 64
    lr: float = 3e-4
    adam_eps: float = 1e-5
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    horizon: int = 2048
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_steps: int = 2_000_000
    # independent environment copies stepped together; horizon is split across them
    n_envs: int = 16
    # rewards are divided by this; 0 means the largest per-step access reward
    # divided by (1 - gamma), which keeps returns within about [-1, 1]
    reward_scale: float = 0.0
    stationary_window: int = 20
    # append the deployment bitmap and the episode clock to the network input
    observe_placement: bool = True
    # greedy evaluation every this many updates (0 disables); the best evaluated
    # policy is returned and training stops once it covers every (BS, chain)
    eval_every: int = 5
    stop_on_full_coverage: bool = True

    def __post_init__(self):
        if self.horizon < 1 or self.minibatch < 1 or self.n_envs < 1 or self.epochs < 0 or self.total_steps < 0:
            raise ContractError("horizon, minibatch >= 1 and epochs, total_steps >= 0 required")
        if self.eval_every < 0:
            raise ContractError("eval_every must be >= 0")


# ---------------------------------------------------------------------------
# networks

LAYERS = ("W0", "b0", "W1", "b1", "W2", "b2")


@dataclass
class PolicyParameters:
    """Policy and value MLP weights plus the head sizes they were built for."""

    policy: dict[str, np.ndarray]
    value: dict[str, np.ndarray]
    heads: tuple[int, ...]
    obs_scale: np.ndarray

    def copy(self) -> PolicyParameters:
        return PolicyParameters({k: v.copy() for k, v in self.policy.items()},
                                {k: v.copy() for k, v in self.value.items()},
                                self.heads, self.obs_scale.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([net[k].ravel() for net in (self.policy, self.value) for k in LAYERS])

    def set_flat(self, x: np.ndarray) -> None:
        i = 0
        for net in (self.policy, self.value):
            for k in LAYERS:
                n = net[k].size
                net[k] = x[i:i + n].reshape(net[k].shape).astype(net[k].dtype)
                i += n


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


def _mlp(rng, sizes, out_gain):
    net = {}
    for li, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if li == len(sizes) - 2 else math.sqrt(2.0)
        net[f"W{li}"] = _orthogonal(rng, a, b, gain)
        net[f"b{li}"] = np.zeros(b)
    return net


def init_params(obs_size: int, heads: tuple[int, ...], hidden: int = 64, seed: int = 0,
                obs_scale: np.ndarray | None = None) -> PolicyParameters:
    rng = np.random.default_rng(seed)
    sizes = (obs_size, hidden, hidden)
    policy = _mlp(rng, sizes + (sum(heads),), 0.01)
    value = _mlp(rng, sizes + (1,), 1.0)
    scale = np.ones(obs_size) if obs_scale is None else np.asarray(obs_scale, dtype=float)
    return PolicyParameters(policy, value, tuple(heads), scale)


def _forward(net, x):
    h1 = np.tanh(x @ net["W0"] + net["b0"])
    h2 = np.tanh(h1 @ net["W1"] + net["b1"])
    return h2 @ net["W2"] + net["b2"], (x, h1, h2)


def _backward(net, cache, dout):
    x, h1, h2 = cache
    g = {"W2": h2.T @ dout, "b2": dout.sum(axis=0)}
    d2 = (dout @ net["W2"].T) * (1.0 - h2 ** 2)
    g["W1"], g["b1"] = h1.T @ d2, d2.sum(axis=0)
    d1 = (d2 @ net["W1"].T) * (1.0 - h1 ** 2)
    g["W0"], g["b0"] = x.T @ d1, d1.sum(axis=0)
    return g


def _split(heads):
    bounds = np.cumsum((0,) + tuple(heads))
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def policy_forward(params: PolicyParameters, obs) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-head probabilities and the value estimate for one or many observations."""
    x = np.atleast_2d(np.asarray(obs, dtype=float)) / params.obs_scale
    logits, _ = _forward(params.policy, x)
    v, _ = _forward(params.value, x)
    probs = [np.exp(_log_softmax(logits[:, sl])) for sl in _split(params.heads)]
    if np.asarray(obs).ndim == 1:
        return [p[0] for p in probs], v[0, 0]
    return probs, v[:, 0]


def joint_log_prob(params: PolicyParameters, obs, actions) -> np.ndarray:
    """Sum of the three head log-probabilities of each action."""
    x = np.atleast_2d(np.asarray(obs, dtype=float)) / params.obs_scale
    logits, _ = _forward(params.policy, x)
    actions = np.atleast_2d(actions)
    rows = np.arange(len(x))
    return sum(_log_softmax(logits[:, sl])[rows, actions[:, h]] for h, sl in enumerate(_split(params.heads)))


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.rewards)


def _sample(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One inverse-CDF draw per row of ``probs``."""
    c = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * c[:, -1:]
    return np.minimum((c <= u).sum(axis=1), probs.shape[1] - 1)


def gae(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimates along axis 0; ``dones[t]`` ends the episode after step t."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    nxt_adv = np.zeros_like(rewards[0])
    nxt_val = np.asarray(last_value, dtype=float)
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_val * live - values[t]
        nxt_adv = delta + gamma * lam * live * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + values


def reward_scale(venv: VecPlacementEnv, cfg: AgentConfig) -> float:
    return cfg.reward_scale or venv.rewards.per_access_bonus * venv.n_bs * venv.n_chains / (1.0 - cfg.gamma)


def collect_rollout(venv: VecPlacementEnv, params: PolicyParameters, horizon: int,
                    rng: np.random.Generator | int, cfg: AgentConfig | None = None) -> RolloutBatch:
    """Sample ``horizon`` on-policy steps from each copy in ``venv``.

    Copies restart when their episode ends and keep their state between
    calls. The batch is time-major, flattened to ``horizon * n_envs`` rows,
    with advantages and returns filled in.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    cfg = cfg or AgentConfig()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    scale = reward_scale(venv, cfg)
    n = venv.n_envs
    obs = venv.features(cfg.observe_placement)
    buf_obs = np.zeros((horizon, n, obs.shape[1]))
    buf_act = np.zeros((horizon, n, 3), dtype=int)
    buf_logp, buf_rew, buf_val, buf_done = (np.zeros((horizon, n)) for _ in range(4))
    rows = np.arange(n)
    for t in range(horizon):
        probs, v = policy_forward(params, obs)
        act = np.stack([_sample(rng, p) for p in probs], axis=1)
        buf_obs[t], buf_act[t], buf_val[t] = obs, act, v
        buf_logp[t] = sum(np.log(np.maximum(p[rows, act[:, h]], 1e-300)) for h, p in enumerate(probs))
        _, r, done, _ = venv.step(act)
        buf_rew[t], buf_done[t] = r / scale, done
        obs = venv.features(cfg.observe_placement)
    _, last_v = policy_forward(params, obs)
    adv, ret = gae(buf_rew, buf_val, buf_done, last_v, cfg.gamma, cfg.lam)
    flat = lambda x: x.reshape(horizon * n, *x.shape[2:])  # noqa: E731
    return RolloutBatch(flat(buf_obs), flat(buf_act), flat(buf_logp), flat(buf_rew), flat(buf_val),
                        flat(buf_done), flat(adv), flat(ret))


# ---------------------------------------------------------------------------
# loss and update


def ppo_loss_and_grad(params: PolicyParameters, obs, actions, logp_old, adv, returns,
                      cfg: AgentConfig) -> tuple[float, dict, dict, dict]:
    """Clipped surrogate loss (to minimize) and its analytic gradients.

    ``adv`` is used as given; callers normalize it.
    """
    n = len(obs)
    x = np.asarray(obs, dtype=float) / params.obs_scale
    logits, pcache = _forward(params.policy, x)
    vout, vcache = _forward(params.value, x)
    v = vout[:, 0]
    rows = np.arange(n)
    dlogits = np.zeros_like(logits)
    logp = np.zeros(n)
    entropy = np.zeros(n)
    heads = _split(params.heads)
    cache = []
    for h, sl in enumerate(heads):
        lp = _log_softmax(logits[:, sl])
        p = np.exp(lp)
        logp += lp[rows, actions[:, h]]
        hh = -(p * lp).sum(axis=1)
        entropy += hh
        cache.append((sl, lp, p, hh))

    ratio = np.exp(logp - logp_old)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    surr1 = ratio * adv
    surr2 = np.clip(ratio, lo, hi) * adv
    surr = np.minimum(surr1, surr2)
    # gradient flows only where the unclipped term is the active minimum
    active = surr1 <= surr2
    dlogp = np.where(active, surr1, 0.0)  # d surr / d logp

    v_err = v - returns
    loss = -surr.mean() + cfg.vf_coef * (v_err ** 2).mean() - cfg.ent_coef * entropy.mean()

    for h, (sl, lp, p, hh) in enumerate(cache):
        onehot = np.zeros_like(p)
        onehot[rows, actions[:, h]] = 1.0
        d_pg = -(dlogp[:, None] * (onehot - p)) / n
        d_ent = cfg.ent_coef * (p * (lp + hh[:, None])) / n  # = -ent_coef * dH/dz / n
        dlogits[:, sl] = d_pg + d_ent
    gp = _backward(params.policy, pcache, dlogits)
    gv = _backward(params.value, vcache, (2.0 * cfg.vf_coef * v_err / n)[:, None])
    info = {"policy_loss": float(-surr.mean()), "value_loss": float((v_err ** 2).mean()),
            "entropy": float(entropy.mean()), "clip_frac": float((~active).mean()),
            "approx_kl": float((logp_old - logp).mean())}
    return float(loss), gp, gv, info


class Adam:
    def __init__(self, params: PolicyParameters, lr: float, eps: float):
        self.lr, self.eps, self.b1, self.b2, self.t = lr, eps, 0.9, 0.999, 0
        self.m = [{k: np.zeros_like(v) for k, v in net.items()} for net in (params.policy, params.value)]
        self.v = [{k: np.zeros_like(v) for k, v in net.items()} for net in (params.policy, params.value)]

    def step(self, params: PolicyParameters, grads: list[dict]):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for net, g, m, v in zip((params.policy, params.value), grads, self.m, self.v):
            for k in net:
                m[k] = self.b1 * m[k] + (1 - self.b1) * g[k]
                v[k] = self.b2 * v[k] + (1 - self.b2) * g[k] ** 2
                net[k] = net[k] - self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


def clip_grad_norm(grads: list[dict], max_norm: float) -> float:
    total = math.sqrt(sum(float((g ** 2).sum()) for d in grads for g in d.values()))
    if not math.isfinite(total):
        raise DivergenceError(f"non-finite gradient norm {total}")
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for d in grads:
            for k in d:
                d[k] = d[k] * s
    return total


def ppo_update(params: PolicyParameters, batch: RolloutBatch, cfg: AgentConfig,
               rng: np.random.Generator, opt: Adam | None = None) -> tuple[PolicyParameters, dict]:
    """Several epochs of minibatch Adam steps on the clipped surrogate."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    params = params.copy()
    opt = opt or Adam(params, cfg.lr, cfg.adam_eps)
    n = len(batch)
    info = {}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            adv = batch.advantages[idx]
            if len(idx) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            loss, gp, gv, info = ppo_loss_and_grad(params, batch.obs[idx], batch.actions[idx],
                                                   batch.logp[idx], adv, batch.returns[idx], cfg)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss}")
            clip_grad_norm([gp, gv], cfg.max_grad_norm)
            opt.step(params, [gp, gv])
    return params, info


# ---------------------------------------------------------------------------
# training, checkpoints, extraction


@dataclass
class TrainResult:
    params: PolicyParameters
    steps: int
    history: list[dict]
    # (steps, coverage_pct, instances, stationary) per greedy evaluation
    evaluations: list[tuple] = field(default_factory=list)
    converged: bool = False


def make_vec_env(g: NetworkGraph, app: Application, workload: Workload, cfg: AgentConfig,
                 rewards: RewardConfig | None = None) -> VecPlacementEnv:
    return VecPlacementEnv(g, app, workload, cfg.n_envs, rewards)


def train(g: NetworkGraph, app: Application, workload: Workload, cfg: AgentConfig | None = None,
          seed: int = 0, init: PolicyParameters | None = None, checkpoint: str | Path | None = None,
          rewards: RewardConfig | None = None,
          callback: Callable[[int, dict, PolicyParameters], None] | None = None) -> TrainResult:
    """Alternate rollouts and updates until ``cfg.total_steps`` samples are used.

    With ``cfg.eval_every`` set, the greedy rollout is scored on a fresh
    environment every few updates and the best-scoring parameters are
    returned; a stationary full-coverage rollout ends training early.
    """
    cfg = cfg or AgentConfig()
    rng = np.random.default_rng(seed)
    venv = make_vec_env(g, app, workload, cfg, rewards)
    scale = venv.feature_scale(cfg.observe_placement)
    params = init.copy() if init is not None else init_params(
        len(scale), venv.head_sizes, cfg.hidden, seed, scale)
    opt = Adam(params, cfg.lr, cfg.adam_eps)
    per_env = max(1, cfg.horizon // cfg.n_envs)
    steps, history, evals = 0, [], []
    best, best_key = None, None

    def evaluate() -> bool:
        nonlocal best, best_key
        ex = greedy_rollout(PlacementEnv(g, app, workload, rewards), params, cfg.stationary_window)
        pct = coverage(g, ex.placement, app, workload).coverage_pct
        evals.append((steps, pct, ex.placement.instance_count, ex.stationary))
        key = (pct, ex.stationary, -ex.placement.instance_count)
        if best_key is None or key > best_key:
            best, best_key = params.copy(), key
            log.info("train: %d steps, greedy coverage %.1f%% with %d instances",
                     steps, pct, ex.placement.instance_count)
        return cfg.stop_on_full_coverage and pct >= 100.0 and ex.stationary

    converged = bool(cfg.eval_every) and evaluate()
    while steps < cfg.total_steps and not converged:
        batch = collect_rollout(venv, params, per_env, rng, cfg)
        steps += len(batch)
        try:
            params, info = ppo_update(params, batch, cfg, rng, opt)
        except DivergenceError:
            if checkpoint is not None:
                save_checkpoint(checkpoint, params, cfg, seed, steps)
            raise
        var = float(batch.returns.var())
        ev = 1.0 - float((batch.returns - batch.values).var()) / var if var > 0 else 0.0
        info = dict(info, steps=steps, mean_reward=float(batch.rewards.mean()), explained_var=ev)
        history.append(info)
        log.debug("train: %d steps, reward %.5f, entropy %.3f", steps, info["mean_reward"], info["entropy"])
        if callback:
            callback(steps, info, params)
        if cfg.eval_every and len(history) % cfg.eval_every == 0:
            converged = evaluate()
    if best is not None:
        params = best
    if checkpoint is not None:
        save_checkpoint(checkpoint, params, cfg, seed, steps)
    return TrainResult(params, steps, history, evals, converged)


def _arrays_to_doc(net):
    return {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]} for k, v in net.items()}


def _doc_to_arrays(doc):
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc.items()}


def save_checkpoint(path: str | Path, params: PolicyParameters, cfg: AgentConfig, seed: int, steps: int) -> None:
    doc = {"version": CHECKPOINT_VERSION, "seed": seed, "steps": steps, "config": asdict(cfg),
           "heads": list(params.heads), "obs_scale": [float(x) for x in params.obs_scale],
           "policy": _arrays_to_doc(params.policy), "value": _arrays_to_doc(params.value)}
    atomic_write_text(path, json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[PolicyParameters, AgentConfig, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaError("version", f"unsupported checkpoint version {doc.get('version')!r}")
    params = PolicyParameters(_doc_to_arrays(doc["policy"]), _doc_to_arrays(doc["value"]),
                              tuple(doc["heads"]), np.array(doc["obs_scale"], dtype=float))
    return params, AgentConfig(**doc["config"]), {"seed": doc["seed"], "steps": doc["steps"]}


@dataclass
class Extraction:
    placement: Placement
    steps: int
    changes: int
    stationary: bool


def greedy_rollout(env: PlacementEnv, params: PolicyParameters, window: int = 20) -> Extraction:
    """Argmax rollout from reset until done or ``window`` steps without a placement change."""
    observe = len(params.obs_scale) > env.obs_size
    env.reset(0)
    changes, quiet, steps = 0, 0, 0
    while True:
        probs, _ = policy_forward(params, env.features(observe))
        a = Action(*(int(np.argmax(p)) for p in probs))
        _, _, done = env.step(a)
        steps += 1
        changed = env.log[-1].status == VALID and a.act_type in (DEPLOY, EVICT)
        changes += changed
        quiet = 0 if changed else quiet + 1
        if quiet >= window:
            return Extraction(env.placement, steps, changes, True)
        if done:
            return Extraction(env.placement, steps, changes, False)


def extract_placement(env: PlacementEnv, params: PolicyParameters, window: int = 20) -> Placement:
    return greedy_rollout(env, params, window).placement

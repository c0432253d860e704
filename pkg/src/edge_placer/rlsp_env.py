"""Step-based placement environment for the learning agent.

The agent deploys, evicts or holds one microservice on one site per step.
Observations are the number of accessible chains per base station followed
by the number of instances per site. Forbidden moves (hardware, locality,
capacity) are penalized and rejected so the placement stays valid.

``VecPlacementEnv`` steps a batch of independent copies with array
operations; ``PlacementEnv`` is the single-copy view with logging and
Placement objects, built on a batch of one so both share the same arithmetic.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .application import Application, Workload
from .costs import build_tmatrix, max_placement_cost
from .errors import ContractError
from .placement import AccessEntry, AccessMatrix, LatencyModel, Placement
from .topology import NetworkGraph

DEPLOY, EVICT, HOLD = 0, 1, 2
ACT_NAMES = ("deploy", "evict", "hold")
VALID, INVALID, FORBIDDEN = "valid", "invalid", "forbidden"
STATUS_NAMES = (VALID, INVALID, FORBIDDEN)
MAX_STEPS = 200


@dataclass(frozen=True)
class Action:
    act_type: int
    micro_idx: int
    site_idx: int


@dataclass(frozen=True)
class Observation:
    chains_per_bs: tuple[int, ...]
    micro_per_site: tuple[int, ...]

    def as_array(self) -> np.ndarray:
        return np.array(self.chains_per_bs + self.micro_per_site, dtype=float)


@dataclass(frozen=True)
class RewardConfig:
    valid_bonus: float = 1.0
    invalid_penalty: float = -1.0
    constraint_penalty: float = -10.0
    per_access_bonus: float = 5.0
    cost_scale: float = 1.0

    def __post_init__(self):
        if self.valid_bonus <= 0 or self.per_access_bonus <= 0:
            raise ContractError("valid_bonus and per_access_bonus must be positive")
        if self.invalid_penalty >= 0 or self.constraint_penalty >= 0:
            raise ContractError("penalties must be negative")

    def deltas(self) -> np.ndarray:
        return np.array([self.valid_bonus, self.invalid_penalty, self.constraint_penalty])


@dataclass
class EnvState:
    placement: Placement
    access: np.ndarray  # B x C accessibility, consistent with placement
    counter: int = 0
    max_steps: int = MAX_STEPS
    reward_accum: float = 0.0
    rng_seed: int = 0


class VecPlacementEnv:
    """``n_envs`` independent environments over one (graph, app, workload)."""

    def __init__(self, g: NetworkGraph, app: Application, workload: Workload, n_envs: int = 1,
                 rewards: RewardConfig | None = None, max_steps: int = MAX_STEPS):
        if max_steps < 1 or n_envs < 1:
            raise ContractError("max_steps and n_envs must be >= 1")
        self.g, self.app, self.workload = g, app, workload
        self.n_envs = n_envs
        self.rewards = rewards or RewardConfig()
        self.max_steps = max_steps
        self.model = LatencyModel(g, app)
        self.services = self.model.services
        self.sites = self.model.sites
        self.limits = self.model.limits_vector(workload)
        sidx = {s: i for i, s in enumerate(self.services)}
        self.partner = np.array([sidx.get(app.partner(s), -1) for s in self.services], dtype=int)
        self.demand = np.array([app.microservices[s].demand.as_tuple() for s in self.services]).reshape(-1, 3)
        self.capacity = np.array([g.node(e).capacity.as_tuple() for e in self.sites]).reshape(-1, 3)
        pairs = app.comm_pairs()
        self.pair_a = np.array([sidx[a] for a, _, _ in pairs], dtype=int)
        self.pair_b = np.array([sidx[b] for _, b, _ in pairs], dtype=int)
        self.pair_rate = np.array([r for _, _, r in pairs], dtype=float)
        self.site_lat = np.asarray(g.site_site_latency, dtype=float)
        self.bs_lat = np.asarray(g.bs_site_latency, dtype=float)
        self.membership = self.model.membership
        self._deltas = self.rewards.deltas()
        self.reset()

    @property
    def n_bs(self) -> int:
        return len(self.model.bss)

    @property
    def n_chains(self) -> int:
        return len(self.model.chains)

    @property
    def head_sizes(self) -> tuple[int, int, int]:
        return (3, len(self.services), len(self.sites))

    @property
    def obs_size(self) -> int:
        return self.n_bs + len(self.sites)

    def reset(self) -> np.ndarray:
        t = build_tmatrix(self.app, self.g)
        self.forbidden = np.asarray(t.forbidden, dtype=bool)
        self.tau = np.where(self.forbidden, 0.0, t.entries)
        self.max_cost = max_placement_cost(self.app, self.g, t)
        n, s, e = self.n_envs, len(self.services), len(self.sites)
        self.hosted = np.zeros((n, s, e), dtype=bool)
        self.access = np.zeros((n, self.n_bs, self.n_chains), dtype=bool)
        self.counter = np.zeros(n, dtype=int)
        return self.observations()

    def _reset_rows(self, rows: np.ndarray):
        self.hosted[rows] = False
        self.access[rows] = False
        self.counter[rows] = 0

    def observations(self) -> np.ndarray:
        return np.concatenate([self.access.sum(axis=2), self.hosted.sum(axis=1)], axis=1)

    def check(self, actions: np.ndarray):
        hi = np.array(self.head_sizes)
        if actions.shape != (self.n_envs, 3) or (actions < 0).any() or (actions >= hi).any():
            raise ContractError(f"actions must be {self.n_envs} x 3 within {self.head_sizes}")

    def apply(self, actions: np.ndarray) -> np.ndarray:
        """Apply one action per copy; returns status codes (index into STATUS_NAMES)."""
        actions = np.asarray(actions, dtype=int)
        self.check(actions)
        rows = np.arange(self.n_envs)
        kind, i, j = actions[:, 0], actions[:, 1], actions[:, 2]
        present = self.hosted[rows, i, j]
        status = np.where(present, 0, 1)  # hold: valid iff present
        p = self.partner[i]
        has_p = p >= 0
        pp = np.where(has_p, p, 0)

        ev = (kind == EVICT) & present
        if ev.any():
            self.hosted[rows[ev], i[ev], j[ev]] = False
            evp = ev & has_p
            self.hosted[rows[evp], pp[evp], j[evp]] = False

        dep = kind == DEPLOY
        status = np.where(dep, np.where(present, 1, 0), status)
        want = dep & ~present
        if want.any():
            add_p = want & has_p & ~self.hosted[rows, pp, j]
            bad = self.forbidden[i, j] | (add_p & self.forbidden[pp, j])
            load = np.einsum("nse,sk->nek", self.hosted, self.demand)[rows, j]
            load = load + self.demand[i] + np.where(add_p[:, None], self.demand[pp], 0.0)
            bad |= (load > self.capacity[j] + 1e-9).any(axis=1)
            status = np.where(want & bad, 2, status)
            ok = want & ~bad
            self.hosted[rows[ok], i[ok], j[ok]] = True
            okp = ok & add_p
            self.hosted[rows[okp], pp[okp], j[okp]] = True
        return status

    def refresh_access(self):
        near = np.where(self.hosted[:, None, :, :], self.bs_lat[None, :, None, :], np.inf).min(axis=3)
        missing = np.isinf(near)
        lat = np.where(missing, 0.0, near) @ self.membership.T
        lat[(missing.astype(float) @ self.membership.T) > 0] = np.inf
        self.latency = lat
        self.access = lat <= self.limits[None, None, :] + 1e-9

    def costs(self) -> np.ndarray:
        """Deployment cost plus communication between hosted pairs, per copy."""
        h = self.hosted
        total = (h * self.tau[None]).sum(axis=(1, 2))
        if len(self.pair_a):
            both = h[:, self.pair_a, :, None] & h[:, self.pair_b, None, :]
            lat = np.where(both, self.site_lat[None, None], np.inf).min(axis=(2, 3))
            ok = np.isfinite(lat)
            total = total + (np.where(ok, lat, 0.0) * self.pair_rate[None]).sum(axis=1)
        return total

    def step(self, actions, auto_reset: bool = True):
        """Returns (observations, rewards, dones, status codes).

        With ``auto_reset`` finished copies restart and the returned
        observation is their fresh one.
        """
        if (self.counter >= self.max_steps).any():
            raise ContractError("episode is done; call reset()")
        self.counter += 1
        status = self.apply(actions)
        self.refresh_access()
        r = self.rewards
        n_access = self.access.sum(axis=(1, 2))
        modifier = self.counter / self.max_steps
        reward = (self._deltas[status] + r.per_access_bonus * n_access
                  - r.cost_scale * self.costs() / self.max_cost) * modifier
        done = self.counter >= self.max_steps
        if auto_reset and done.any():
            self._reset_rows(np.flatnonzero(done))
        return self.observations(), reward, done, status

    def features(self, observe_placement: bool = True) -> np.ndarray:
        """Network input per copy: observation, then optionally the bitmap and step counter."""
        obs = self.observations().astype(float)
        if not observe_placement:
            return obs
        return np.concatenate([obs, self.hosted.reshape(self.n_envs, -1).astype(float),
                               self.counter[:, None].astype(float)], axis=1)

    def feature_scale(self, observe_placement: bool = True) -> np.ndarray:
        """Divide chain counts by |C| and instance counts by |S|; extra features by their range."""
        scale = [self.n_chains] * self.n_bs + [len(self.services)] * len(self.sites)
        if observe_placement:
            scale += [1] * (len(self.services) * len(self.sites)) + [self.max_steps]
        return np.array(scale, dtype=float)


@dataclass(frozen=True)
class StepRecord:
    step: int
    act_type: int
    micro: str
    site: str
    status: str
    reward: float
    accessible: int
    deployed: int


class PlacementEnv:
    """One single-stepper environment instance over a fixed (graph, app, workload)."""

    def __init__(self, g: NetworkGraph, app: Application, workload: Workload,
                 rewards: RewardConfig | None = None, max_steps: int = MAX_STEPS):
        self.core = VecPlacementEnv(g, app, workload, 1, rewards, max_steps)
        self.g, self.app, self.workload = g, app, workload
        self.rewards = self.core.rewards
        self.max_steps = max_steps
        self.services, self.sites = self.core.services, self.core.sites
        self.log: list[StepRecord] = []
        self.reset(0)

    n_bs = property(lambda self: self.core.n_bs)
    n_chains = property(lambda self: self.core.n_chains)
    head_sizes = property(lambda self: self.core.head_sizes)
    obs_size = property(lambda self: self.core.obs_size)

    @property
    def hosted(self) -> np.ndarray:
        return self.core.hosted[0]

    def reset(self, seed: int = 0) -> Observation:
        """Empty placement, counter 0, cost table rebuilt."""
        self.core.reset()
        self.state = EnvState(Placement(), self.core.access[0].copy(), 0, self.max_steps, 0.0, int(seed))
        self.log = []
        return self.observation()

    def observation(self) -> Observation:
        o = self.core.observations()[0]
        return Observation(tuple(int(x) for x in o[:self.n_bs]), tuple(int(x) for x in o[self.n_bs:]))

    def _arr(self, a: Action) -> np.ndarray:
        return np.array([[a.act_type, a.micro_idx, a.site_idx]], dtype=int)

    def take_action(self, a: Action) -> tuple[str, float]:
        """Apply one action to the placement; returns (status, delta reward)."""
        code = int(self.core.apply(self._arr(a))[0])
        self._sync()
        return STATUS_NAMES[code], float(self.rewards.deltas()[code])

    def _sync(self):
        self.state.placement = Placement.from_matrix(self.hosted, self.services, self.sites)

    def cost(self) -> float:
        return float(self.core.costs()[0])

    @property
    def max_cost(self) -> float:
        return self.core.max_cost

    def step(self, a: Action) -> tuple[Observation, float, bool]:
        s = self.state
        if s.counter >= s.max_steps:
            raise ContractError("episode is done; call reset()")
        before = self.hosted.copy()
        _, rew, done, status = self.core.step(self._arr(a), auto_reset=False)
        reward = float(rew[0])
        s.counter = int(self.core.counter[0])
        s.access = self.core.access[0].copy()
        s.reward_accum += reward
        if not np.array_equal(before, self.hosted):
            self._sync()
        self.log.append(StepRecord(s.counter, a.act_type, self.services[a.micro_idx], self.sites[a.site_idx],
                                   STATUS_NAMES[int(status[0])], reward, int(s.access.sum()),
                                   int(self.hosted.sum())))
        return self.observation(), reward, bool(done[0])

    def features(self, observe_placement: bool = True) -> np.ndarray:
        return self.core.features(observe_placement)[0]

    @property
    def placement(self) -> Placement:
        return self.state.placement

    def access_matrix(self) -> AccessMatrix:
        self.core.refresh_access()
        lat = self.core.latency[0]
        entries = {}
        for ci, cid in enumerate(self.core.model.chains):
            for bi, b in enumerate(self.core.model.bss):
                entries[(b, cid)] = AccessEntry(bool(self.state.access[bi, ci]), float(lat[bi, ci]))
        return AccessMatrix(entries, {c: self.workload.limit(c) for c in self.core.model.chains})

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "act_type", "micro", "site", "status", "reward", "accessible", "deployed"])
        for rec in self.log:
            w.writerow([rec.step, rec.act_type, rec.micro, rec.site, rec.status, repr(rec.reward),
                        rec.accessible, rec.deployed])
        return buf.getvalue()


def env_reset(env: PlacementEnv, seed: int = 0) -> Observation:
    return env.reset(seed)


def take_action(env: PlacementEnv, a: Action) -> tuple[str, float]:
    return env.take_action(a)


def env_step(env: PlacementEnv, a: Action) -> tuple[Observation, float, bool]:
    return env.step(a)


def next_observation(env: PlacementEnv) -> Observation:
    return env.observation()

"""Supervised DDPG for coded cache placement.

The actor maps ``[predicted demand, previous cache]`` to sigmoid outputs that
are rescaled per node to the cache capacity; the critic has a split first
layer (state branch + action branch, summed). Actor and critic are pre-trained
from per-slot LP solutions before ordinary DDPG updates take over.
"""
from __future__ import annotations

import copy
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .net_model import CostParams, Topology, network_cost, replacement_cost, transmission_cost
from .per_slot import PerSlotProblem, allocation_weights, solve_per_slot
from .tensor_nn import Adam, Dense, Layer, Sequential, mse_grad

log = logging.getLogger(__name__)

EXHAUSTIVE_QUANT_MAX_F = 12


# --------------------------------------------------------------------------- env


class CachingEnv:
    """Serves a per-user demand trace with whatever cache the policy applies."""

    def __init__(self, topology: Topology, per_user: np.ndarray, state_demand: np.ndarray,
                 capacity: float, cost: CostParams, file_size: float = 1.0):
        self.topology = topology
        self.per_user = np.asarray(per_user)  # (T, K, F)
        self.state_demand = np.asarray(state_demand, dtype=float)  # (T, F) fed to the policy
        self.capacity = capacity
        self.cost = cost
        self.file_size = file_size
        self.n_nodes = topology.n_nodes
        self.n_files = self.per_user.shape[2]
        self.reset(0)

    def reset(self, slot: int, cache: np.ndarray | None = None) -> None:
        self.t = slot
        self.cache = np.zeros((self.n_nodes, self.n_files)) if cache is None else np.array(cache, dtype=float)

    @property
    def done(self) -> bool:
        return self.t >= len(self.per_user)

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        return self.state_demand[self.t], self.cache.copy()

    def weights(self) -> np.ndarray:
        prev = self.per_user[self.t - 1] if self.t > 0 else np.zeros_like(self.per_user[0])
        return allocation_weights(prev)

    def step(self, action: np.ndarray) -> dict:
        action = np.asarray(action, dtype=float)
        c_d = transmission_cost(self.topology, action, self.per_user[self.t], self.file_size)
        c_r = replacement_cost(self.cache, action)
        out = {"slot": self.t, "c_d": c_d, "c_r": c_r, "c_total": network_cost(c_d, c_r, self.cost)}
        self.cache = action.copy()
        self.t += 1
        return out


# ---------------------------------------------------------------------- networks


class SplitCritic:
    """Q(s, a): ReLU state and action branches summed, ReLU trunk, linear output."""

    def __init__(self, state_dim, action_dim, hidden=(200, 100), rng=None):
        rng = np.random.default_rng(rng)
        h1, h2 = hidden
        self.state_branch = Dense(state_dim, h1, "relu", rng=rng)
        self.action_branch = Dense(action_dim, h1, "relu", rng=rng)
        self.trunk = Sequential([Dense(h1, h2, "relu", rng=rng), Dense(h2, 1, "linear", rng=rng)])
        self._forwarded = False

    @property
    def layers(self) -> list[Layer]:
        return [self.state_branch, self.action_branch, *self.trunk.layers]

    def forward(self, s, a):
        h = self.state_branch.forward(s) + self.action_branch.forward(a)
        self._forwarded = True
        return self.trunk.forward(h)

    __call__ = forward

    def backward(self, dq):
        dh = self.trunk.backward(dq)
        return self.state_branch.backward(dh), self.action_branch.backward(dh)

    def named_parameters(self):
        return [(f"{i}.{k}", v) for i, layer in enumerate(self.layers) for k, v in layer.params.items()]

    def parameters(self):
        return [v for _, v in self.named_parameters()]

    def gradients(self):
        return [layer.grads[k] for layer in self.layers for k in layer.params]


def make_actor(state_dim, action_dim, hidden=(800, 400), rng=None) -> Sequential:
    rng = np.random.default_rng(rng)
    layers, size = [], state_dim
    for h in hidden:
        layers.append(Dense(size, h, "relu", rng=rng))
        size = h
    layers.append(Dense(size, action_dim, "sigmoid", rng=rng))
    return Sequential(layers)


def soft_update(target, learned, tau: float) -> None:
    for pt, p in zip(target.parameters(), learned.parameters()):
        pt *= 1.0 - tau
        pt += tau * p


def param_distance(a, b) -> float:
    return float(np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a.parameters(), b.parameters()))))


# ------------------------------------------------------------------ action maps


def scale_action(raw: np.ndarray, capacity: float) -> np.ndarray:
    """Rescale each node's row to sum to ``capacity``, then clip at 1.

    Works on ``(..., N, F)``. A row of zeros stays zero.
    """
    raw = np.asarray(raw, dtype=float)
    s = raw.sum(axis=-1, keepdims=True)
    factor = np.divide(capacity, s, out=np.zeros_like(s), where=s > 0)
    return np.minimum(raw * factor, 1.0)


def scale_action_grad(raw: np.ndarray, grad_out: np.ndarray, capacity: float) -> np.ndarray:
    """Vector-Jacobian product of :func:`scale_action` (clipped entries pass no gradient)."""
    raw = np.asarray(raw, dtype=float)
    s = raw.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    free = (raw * capacity / safe < 1.0) & (s > 0)
    g = np.where(free, grad_out, 0.0)
    return capacity / safe * g - capacity / safe**2 * np.sum(g * raw, axis=-1, keepdims=True)


def _round_bounds(row: np.ndarray, l: int) -> tuple[np.ndarray, np.ndarray]:
    scaled = row * l
    near = np.abs(scaled - np.rint(scaled)) < 1e-9
    lo = np.where(near, np.rint(scaled), np.floor(scaled)) / l
    hi = np.where(near, np.rint(scaled), np.ceil(scaled)) / l
    return lo, hi


def _quantize_row_exhaustive(row, l, capacity):
    lo, hi = _round_bounds(row, l)
    free = np.flatnonzero(hi > lo)
    best, best_key = lo, None
    for bits in itertools.product((0, 1), repeat=len(free)):
        cand = lo.copy()
        cand[free] = np.where(np.asarray(bits, dtype=bool), hi[free], lo[free])
        if cand.sum() > capacity + 1e-9:
            continue
        key = (round(float(np.sum((cand - row) ** 2)), 12), -sum(bits))
        if best_key is None or key < best_key:
            best, best_key = cand, key
    return best


def _quantize_row_greedy(row, l, capacity):
    lo, hi = _round_bounds(row, l)
    out = lo.copy()
    budget = int(np.floor((capacity - lo.sum()) * l + 1e-9))
    gain = (hi - row) ** 2 - (lo - row) ** 2
    cand = [i for i in np.argsort(gain, kind="stable") if hi[i] > lo[i] and gain[i] <= 1e-12]
    for i in cand[: max(budget, 0)]:
        out[i] = hi[i]
    return out


def quantize_action(cache: np.ndarray, l: int | None, capacity: float, exhaustive: bool | None = None) -> np.ndarray:
    """Snap each node's row to the nearest capacity-feasible vector of 1/l multiples.

    Candidates round every entry down or up. All up-moves cost the same
    capacity (1/l), so taking the largest distance savings first is exact;
    small rows are also searched exhaustively. ``l=None`` means no coding limit.
    """
    if l is None:
        return np.array(cache, dtype=float)
    if l < 1:
        raise ValueError("l must be >= 1")
    cache = np.asarray(cache, dtype=float)
    if exhaustive is None:
        exhaustive = cache.shape[1] <= EXHAUSTIVE_QUANT_MAX_F
    fn = _quantize_row_exhaustive if exhaustive else _quantize_row_greedy
    return np.stack([fn(row, l, capacity) for row in cache])


# ------------------------------------------------------------------- exploration


class OUProcess:
    """Mean-zero Ornstein-Uhlenbeck noise, one coordinate per action entry."""

    def __init__(self, size, theta=0.15, sigma=0.2, rng=None, x0=None):
        self.size, self.theta, self.sigma = size, theta, sigma
        self.rng = np.random.default_rng(rng)
        self.x = np.zeros(size) if x0 is None else np.array(x0, dtype=float)

    def reset(self):
        self.x = np.zeros(self.size)

    def sample(self) -> np.ndarray:
        self.x = self.x + self.theta * (0.0 - self.x) + self.sigma * self.rng.standard_normal(self.size)
        return self.x.copy()


def ou_sample(process: OUProcess) -> np.ndarray:
    return process.sample()


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray


class ReplayBuffer:
    def __init__(self, capacity: int, rng=None):
        self.items: deque[Transition] = deque(maxlen=capacity)
        self.capacity = capacity
        self.rng = np.random.default_rng(rng)

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition) -> None:
        self.items.append(tr)

    def sample_indices(self, n: int) -> np.ndarray:
        return self.rng.integers(len(self.items), size=n)

    def sample(self, n: int):
        idx = self.sample_indices(n)
        batch = [self.items[i] for i in idx]
        return (
            np.stack([b.state for b in batch]),
            np.stack([b.action for b in batch]),
            np.array([b.reward for b in batch])[:, None],
            np.stack([b.next_state for b in batch]),
        )


# ------------------------------------------------------------------------ agent


@dataclass
class AgentConfig:
    actor_hidden: tuple[int, ...] = (800, 400)
    critic_hidden: tuple[int, int] = (200, 100)
    gamma: float = 0.99
    tau: float = 5e-4
    buffer_size: int = 1000
    batch_size: int = 32
    actor_lr: float = 1e-5
    critic_lr: float = 5e-4
    pretrain_lr: float = 5e-5
    pretrain_steps: int = 3000
    pretrain_slots: int = 500
    ou_theta: float = 0.15
    ou_sigma_start: float = 0.2
    ou_sigma_end: float = 0.02
    quant_l: int | None = None
    reward_scale: float = 1.0
    seed: int = 0
    ou_seed: int | None = None  # separate exploration stream; derived from seed when None


def encode_state(demand: np.ndarray, prev_cache: np.ndarray, demand_scale: float = 1.0) -> np.ndarray:
    demand = np.asarray(demand, dtype=float)
    prev_cache = np.asarray(prev_cache, dtype=float)
    if demand.ndim != 1 or prev_cache.ndim != 2 or prev_cache.shape[1] != len(demand):
        raise ValueError("expected demand (F,) and previous cache (N, F)")
    return np.concatenate([demand / demand_scale, prev_cache.ravel()])


def decode_state(state: np.ndarray, n_nodes: int, n_files: int) -> tuple[np.ndarray, np.ndarray]:
    return state[:n_files].copy(), state[n_files:].reshape(n_nodes, n_files).copy()


@dataclass
class PretrainSample:
    demand: np.ndarray
    prev_cache: np.ndarray
    target: np.ndarray


class SDDPGAgent:
    def __init__(self, n_nodes: int, n_files: int, capacity: float, config: AgentConfig = AgentConfig()):
        self.N, self.F, self.capacity, self.cfg = n_nodes, n_files, capacity, config
        ss = np.random.SeedSequence(config.seed)
        s_actor, s_critic, s_buf, s_ou, s_pre = (np.random.default_rng(s) for s in ss.spawn(5))
        self.state_dim = n_files + n_nodes * n_files
        self.action_dim = n_nodes * n_files
        self.actor = make_actor(self.state_dim, self.action_dim, config.actor_hidden, s_actor)
        self.critic = SplitCritic(self.state_dim, self.action_dim, config.critic_hidden, s_critic)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic_target = copy.deepcopy(self.critic)
        self.actor_opt = Adam(self.actor.parameters(), lr=config.actor_lr)
        self.critic_opt = Adam(self.critic.parameters(), lr=config.critic_lr)
        self.buffer = ReplayBuffer(config.buffer_size, s_buf)
        if config.ou_seed is not None:
            s_ou = np.random.default_rng(config.ou_seed)
        self.noise = OUProcess(self.action_dim, config.ou_theta, config.ou_sigma_start, s_ou)
        self.pre_rng = s_pre
        self.demand_scale = 1.0
        self.freeze_actor = False

    # -- helpers
    def encode(self, demand, prev_cache, update_scale=True) -> np.ndarray:
        if update_scale:
            self.demand_scale = max(self.demand_scale, float(np.max(demand, initial=0.0)))
        return encode_state(demand, prev_cache, self.demand_scale)

    def policy(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.actor_target if target else self.actor
        raw = net.forward(np.atleast_2d(states)).reshape(-1, self.N, self.F)
        return scale_action(raw, self.capacity).reshape(len(raw), -1)

    def act(self, state: np.ndarray, explore: bool = True) -> np.ndarray:
        raw = self.actor.forward(state[None])[0]
        if explore:
            raw = np.clip(raw + self.noise.sample(), 0.0, 1.0)
        cache = scale_action(raw.reshape(self.N, self.F), self.capacity)
        return quantize_action(cache, self.cfg.quant_l, self.capacity)

    # -- learning steps
    def critic_update(self, batch=None) -> float | None:
        if batch is None:
            if len(self.buffer) == 0:
                return None
            batch = self.buffer.sample(self.cfg.batch_size)
        s, a, r, s2 = batch
        q_next = self.critic_target.forward(s2, self.policy(s2, target=True))
        y = r + self.cfg.gamma * q_next
        q = self.critic.forward(s, a)
        loss = float(np.mean((q - y) ** 2))
        self.critic.backward(mse_grad(q, y))
        self.critic_opt.step(self.critic.gradients())
        return loss

    def actor_gradients(self, states: np.ndarray) -> tuple[list[np.ndarray], float]:
        """Gradients of ``-mean Q(s, scale(actor(s)))`` w.r.t. actor parameters."""
        raw = self.actor.forward(states)
        raw3 = raw.reshape(-1, self.N, self.F)
        a = scale_action(raw3, self.capacity).reshape(len(raw), -1)
        q = self.critic.forward(states, a)
        _, da = self.critic.backward(np.full_like(q, -1.0 / len(q)))
        draw = scale_action_grad(raw3, da.reshape(raw3.shape), self.capacity).reshape(raw.shape)
        self.actor.backward(draw)
        return [g.copy() for g in self.actor.gradients()], float(np.mean(q))

    def actor_update(self, states=None) -> float:
        if states is None:
            if len(self.buffer) == 0:
                return 0.0
            states = self.buffer.sample(self.cfg.batch_size)[0]
        grads, _ = self.actor_gradients(states)
        self.actor_opt.step(grads)
        return float(np.sqrt(sum(np.sum(g * g) for g in grads)))

    def soft_update_targets(self) -> None:
        soft_update(self.actor_target, self.actor, self.cfg.tau)
        soft_update(self.critic_target, self.critic, self.cfg.tau)

    # -- pre-training
    def pretrain_actor(self, samples: list[PretrainSample], steps: int | None = None, log_every: int = 0) -> list[float]:
        """Regress scaled actor outputs onto LP placements; returns the loss curve."""
        if not samples:
            raise ValueError("empty pre-training set")
        steps = self.cfg.pretrain_steps if steps is None else steps
        X = np.stack([encode_state(s.demand, s.prev_cache, self.demand_scale) for s in samples])
        Y = np.stack([s.target.ravel() for s in samples])
        opt = Adam(self.actor.parameters(), lr=self.cfg.pretrain_lr)
        losses = []
        for step in range(steps):
            idx = self.pre_rng.integers(len(X), size=min(self.cfg.batch_size, len(X)))
            x, y = X[idx], Y[idx]
            raw = self.actor.forward(x)
            raw3 = raw.reshape(-1, self.N, self.F)
            out = scale_action(raw3, self.capacity).reshape(len(x), -1)
            g = mse_grad(out, y)
            losses.append(float(np.mean((out - y) ** 2)))
            draw = scale_action_grad(raw3, g.reshape(raw3.shape), self.capacity).reshape(raw.shape)
            self.actor.backward(draw)
            opt.step(self.actor.gradients())
            if log_every and step % log_every == 0:
                log.info("actor pre-train step %d loss %.4g", step, losses[-1])
        self.actor_target = copy.deepcopy(self.actor)
        return losses

    def placement_error(self, samples: list[PretrainSample]) -> float:
        X = np.stack([encode_state(s.demand, s.prev_cache, self.demand_scale) for s in samples])
        Y = np.stack([s.target.ravel() for s in samples])
        return float(np.mean((self.policy(X) - Y) ** 2))

    def reset_exploration(self) -> None:
        self.buffer.items.clear()
        self.noise.reset()

    def interact(self, env: CachingEnv, n_slots: int, learn_actor: bool = True, explore: bool = True) -> list[dict]:
        """Run the DDPG loop for ``n_slots`` slots of ``env`` and return the cost log."""
        cfg = self.cfg
        logs = []
        demand, prev = env.observe()
        s = self.encode(demand, prev)
        for i in range(n_slots):
            if explore:
                frac = i / max(n_slots - 1, 1)
                self.noise.sigma = cfg.ou_sigma_start + frac * (cfg.ou_sigma_end - cfg.ou_sigma_start)
            a = self.act(s, explore=explore)
            rec = env.step(a)
            r = -rec["c_total"] / cfg.reward_scale
            if env.done:
                s2 = s
            else:
                demand, prev = env.observe()
                s2 = self.encode(demand, prev)
            self.buffer.add(Transition(s, a.ravel(), r, s2))
            rec["critic_loss"] = self.critic_update()
            if learn_actor and not self.freeze_actor:
                self.actor_update()
            self.soft_update_targets()
            logs.append(rec)
            s = s2
            if env.done:
                break
        return logs


def pretrain_critic(agent: SDDPGAgent, env: CachingEnv, n_slots: int) -> list[dict]:
    """DDPG interaction with the actor frozen; both targets still soft-update."""
    agent.freeze_actor = True
    try:
        return agent.interact(env, n_slots, learn_actor=False)
    finally:
        agent.freeze_actor = False


def lp_chain(topology: Topology, per_user: np.ndarray, demand: np.ndarray, slots, capacity: float,
             beta: float, file_size: float = 1.0, init_cache: np.ndarray | None = None) -> list[PretrainSample]:
    """Chain per-slot LP solutions over ``slots``; each solve starts from the previous optimum."""
    N, F = topology.n_nodes, per_user.shape[2]
    prev = np.zeros((N, F)) if init_cache is None else np.asarray(init_cache, dtype=float)
    out = []
    for t in slots:
        w = allocation_weights(per_user[t - 1]) if t > 0 else np.full((per_user.shape[1], F), 1.0 / per_user.shape[1])
        sol = solve_per_slot(PerSlotProblem(topology, prev, demand[t], w, beta, capacity, file_size))
        out.append(PretrainSample(np.asarray(demand[t], dtype=float), prev.copy(), sol.cache))
        prev = sol.cache
    return out


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r["c_total"] for r in self.records])

    @property
    def running_avg(self) -> np.ndarray:
        c = self.costs
        return np.cumsum(c) / np.arange(1, len(c) + 1)


def run_pso_p(env: CachingEnv, n_slots: int, quant_l: int | None = None) -> RunLog:
    """Per-slot optimisation baseline: solve the LP every slot with the state demand."""
    out = RunLog()
    for _ in range(n_slots):
        if env.done:
            break
        demand, prev = env.observe()
        sol = solve_per_slot(PerSlotProblem(env.topology, prev, demand, env.weights(), env.cost.beta, env.capacity, env.file_size))
        out.records.append(env.step(quantize_action(sol.cache, quant_l, env.capacity)))
    return out


def run_sddpg(agent: SDDPGAgent, env: CachingEnv, n_slots: int) -> RunLog:
    """Phase 2: fresh buffer and noise, then online DDPG updates every slot."""
    agent.reset_exploration()
    return RunLog(agent.interact(env, n_slots))

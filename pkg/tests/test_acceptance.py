"""Acceptance checks, one test per criterion.

Each test records a one-line verdict that ``conftest.py`` prints in the
terminal summary. The long reproductions are marked ``slow``; deselect them
with ``-m "not slow"``.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

from coded_cache import agent as agent_mod
from coded_cache import harness
from coded_cache.agent import AgentConfig, SDDPGAgent, SplitCritic, param_distance
from coded_cache.net_model import file_delay, topology_from_positions
from coded_cache.per_slot import brute_force_oracle, grid_resolution, solve_per_slot
from coded_cache.predictor import run_online
from coded_cache.tensor_nn import LSTM, Dense, LastStep, Sequential
from gradcheck import check_network, numeric_grad, rel_error
from instances import random_problem

VERDICTS: dict[int, str] = {}
SEEDS = (0, 1, 2)


def record(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])


def majority(flags) -> bool:
    flags = list(flags)
    return sum(flags) * 2 > len(flags)


# ----------------------------------------------------------------- 1: delay


def greedy_download(delays, fracs, size):
    remaining, total = 1.0, 0.0
    for lam, d in zip(fracs, delays[:-1]):
        take = min(lam, remaining)
        total += take * d
        remaining -= take
    return size * (total + remaining * delays[-1])


def test_criterion_1_delay_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for _ in range(1000):
        n_nodes = int(rng.integers(1, 6))
        user = rng.uniform(-300, 300, (1, 2))
        nodes = rng.uniform(-400, 400, (n_nodes, 2))
        nodes[0] = user[0] + rng.uniform(10, 100, 2)
        topo = topology_from_positions(nodes, user, 500.0)
        lam = rng.uniform(0, 1, (n_nodes, 1)) * (rng.uniform(size=(n_nodes, 1)) < 0.7)
        size = rng.uniform(1e3, 1e6)
        reach = topo.reachable_sets[0]
        expected = greedy_download(topo.per_bit_delay[0, reach], [lam[n - 1, 0] for n in reach[:-1]], size)
        worst = max(worst, abs(file_delay(topo, lam, 0, 0, size) - expected) / expected)
        checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 5.0
    record(1, ok, f"{checked} instances, max rel err {worst:.1e}, {elapsed:.2f}s")
    assert ok


# --------------------------------------------------------------- 2: gradients


def actor_case(rng):
    n, f = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    cfg = AgentConfig(actor_hidden=(int(rng.integers(3, 8)),), critic_hidden=(5, 4), seed=int(rng.integers(1 << 30)))
    ag = SDDPGAgent(n, f, float(rng.uniform(0.5, 1.5)), cfg)
    states = rng.uniform(size=(3, ag.state_dim))
    grads, _ = ag.actor_gradients(states)

    def loss():
        return -float(np.mean(ag.critic.forward(states, ag.policy(states))))

    return max(rel_error(g, numeric_grad(loss, p), floor=1e-4) for p, g in zip(ag.actor.parameters(), grads))


def critic_case(rng):
    sd, ad = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    critic = SplitCritic(sd, ad, (int(rng.integers(3, 8)), int(rng.integers(2, 5))), rng=rng)
    s, a = rng.normal(size=(4, sd)), rng.uniform(size=(4, ad))
    w = rng.normal(size=(4, 1))

    def loss():
        return float(np.sum(w * critic.forward(s, a)))

    critic.forward(s, a)
    critic.backward(w)
    grads = [g.copy() for g in critic.gradients()]
    return max(rel_error(g, numeric_grad(loss, p), floor=1e-4) for p, g in zip(critic.parameters(), grads))


def test_criterion_2_gradients():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    errs = {"dense": [], "lstm": [], "actor": [], "critic": []}
    for _ in range(13):
        d = Sequential([Dense(3, int(rng.integers(2, 6)), str(rng.choice(["tanh", "sigmoid", "linear"])), rng=rng)])
        d.layers.append(Dense(d.layers[0].params["W"].shape[0], 2, "tanh", rng=rng))
        errs["dense"].append(check_network(d, rng.normal(size=(4, 3)), rng))
        h = int(rng.integers(1, 5))
        lstm = Sequential([LSTM(1, h, rng=rng), LSTM(h, 2, rng=rng), LastStep(), Dense(2, 1, rng=rng)])
        errs["lstm"].append(check_network(lstm, rng.normal(size=(2, int(rng.integers(1, 5)), 1)), rng))
        errs["actor"].append(actor_case(rng))
        errs["critic"].append(critic_case(rng))
    elapsed = time.perf_counter() - start
    worst = {k: max(v) for k, v in errs.items()}
    n = sum(len(v) for v in errs.values())
    ok = max(worst.values()) <= 1e-4 and elapsed < 60 and n >= 50
    record(2, ok, f"{n} networks, worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------- 3: LP


def test_criterion_3_lp_vs_grid_oracle():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    bad, gaps = 0, []
    for _ in range(200):
        p = random_problem(rng)
        lp = solve_per_slot(p)
        grid = brute_force_oracle(p, 0.05)
        res = grid_resolution(p, 0.05)
        gap = grid.objective - lp.objective
        gaps.append(gap / max(res, 1e-12))
        if not (lp.success and -1e-7 * max(1.0, grid.objective) <= gap <= res):
            bad += 1
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 120
    record(3, ok, f"200 instances, {bad} outside one grid step, max gap/resolution {max(gaps):.3f}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------- shared caching runs


class ActionAudit:
    """Wraps ``CachingEnv.step`` to check every applied action."""

    def __init__(self):
        self.count = 0
        self.violations = 0
        self.off_grid = 0
        self.quant = None

    def check(self, env, action):
        a = np.asarray(action, dtype=float)
        self.count += 1
        if a.min() < 0 or a.max() > 1 or np.any(a.sum(axis=1) > env.capacity + 1e-9):
            self.violations += 1
        if self.quant is not None and not np.allclose(a * self.quant, np.rint(a * self.quant), atol=1e-9):
            self.off_grid += 1


AUDITS: dict[tuple, ActionAudit] = {}


def desk_config(**over):
    return harness.config_from_dict({"profile": "desk", **over})


@lru_cache(maxsize=None)
def desk_setup(seed):
    cfg = desk_config()
    ctx = harness.seed_everything(cfg, seed)
    return cfg, ctx, harness.prepare_caching(cfg, ctx)


@lru_cache(maxsize=None)
def caching_run(policy, seed, beta, quant_l=None):
    cfg, ctx, setup = desk_setup(seed)
    audit = ActionAudit()
    audit.quant = quant_l
    original = agent_mod.CachingEnv.step

    def step(self, action):
        audit.check(self, action)
        return original(self, action)

    agent_mod.CachingEnv.step = step
    try:
        rl = harness.run_policy(policy, setup, cfg, ctx, beta, quant_l)
    finally:
        agent_mod.CachingEnv.step = original
    AUDITS[(policy, seed, beta, quant_l)] = audit
    c_r = float(np.mean([r["c_r"] for r in rl.records]))
    return float(rl.running_avg[-1]), c_r


# ------------------------------------------------------------ 4: constraints


@pytest.mark.slow
def test_criterion_4_constraint_safety():
    for l in (None, 1, 2, 4):
        caching_run("sddpg", 0, 1.5, l)
    total = sum(a.count for a in AUDITS.values())
    bad = sum(a.violations for a in AUDITS.values())
    off = sum(a.off_grid for a in AUDITS.values())
    ok = total > 0 and bad == 0 and off == 0
    record(4, ok, f"{total} applied actions over l in (inf,1,2,4): {bad} capacity/box violations, {off} off the 1/l grid")
    assert ok


# ------------------------------------------------------------ 5: predictors


@pytest.mark.slow
def test_criterion_5_predictor_ordering():
    cfg = harness.full_profile()
    wins, lines = [], []
    for seed in SEEDS:
        ctx = harness.seed_everything(cfg, seed)
        trace = harness.make_trace(cfg, ctx)
        ps = ctx.seeds["predictor"]
        c4 = run_online(trace, harness.predictor_config(cfg, "clstm", ps, 12, 4)).average_nmse
        c1 = run_online(trace, harness.predictor_config(cfg, "clstm", ps, 12, 1)).average_nmse
        per_file = run_online(trace, harness.predictor_config(cfg, "lstm", ps, 12)).average_nmse
        wins.append(c4 < per_file and c4 < c1)
        lines.append(f"seed {seed}: C4 {c4:.4f} LSTM {per_file:.4f} C1 {c1:.4f}")
    ok = majority(wins)
    record(5, ok, f"C-LSTM(C=4) best in {sum(wins)}/{len(wins)} seeds; " + "; ".join(lines))
    assert ok


# ------------------------------------------------------------ 6: policies


@pytest.mark.slow
def test_criterion_6_policy_ordering():
    wins, lines = [], []
    for seed in SEEDS:
        c = {p: caching_run(p, seed, 1.5)[0] for p in ("sddpg_r", "sddpg", "pso_p", "ddpg")}
        wins.append(c["sddpg_r"] <= c["sddpg"] < c["pso_p"] < c["ddpg"])
        lines.append(f"seed {seed}: " + " ".join(f"{k} {v:.3f}" for k, v in c.items()))
    ok = majority(wins)
    record(6, ok, f"ordering holds in {sum(wins)}/{len(wins)} seeds; " + "; ".join(lines))
    assert ok


# ------------------------------------------------------------- 7: beta ends


BIG_BETA = 100.0


@pytest.mark.slow
def test_criterion_7_beta_extremes():
    zero = {p: np.mean([caching_run(p, s, 0.0)[0] for s in SEEDS]) for p in ("pso_p", "sddpg")}
    big = {p: [caching_run(p, s, BIG_BETA) for s in SEEDS] for p in ("pso_p", "sddpg", "sddpg_r")}
    big_cost = {p: float(np.mean([c for c, _ in v])) for p, v in big.items()}
    big_cr = {p: float(np.mean([r for _, r in v])) for p, v in big.items()}
    low_ok = zero["pso_p"] <= zero["sddpg"] <= 1.10 * zero["pso_p"]
    spread = max(big_cost.values()) / min(big_cost.values()) - 1.0
    # replacement "vanishes" when it is a negligible share of the cost
    share = max(BIG_BETA * big_cr[p] / big_cost[p] for p in big_cost)
    high_ok = spread <= 0.05 and share <= 0.01
    ok = low_ok and high_ok
    record(
        7, ok,
        f"beta=0: PSO-P {zero['pso_p']:.3f} SDDPG {zero['sddpg']:.3f} ({'ok' if low_ok else 'fails'}); "
        f"beta={BIG_BETA:g}: " + " ".join(f"{k} {v:.3f}" for k, v in big_cost.items())
        + f", spread {spread:.1%}, max replacement share {share:.1%} ({'ok' if high_ok else 'fails'})",
    )
    assert ok


# ------------------------------------------------------------ 8: quantizing


@pytest.mark.slow
def test_criterion_8_quantization():
    levels = (1, 2, 4, None)
    cost = {l: float(np.mean([caching_run("sddpg", s, 1.5, l)[0] for s in SEEDS])) for l in levels}
    seq = [cost[l] for l in levels]
    monotone = all(b <= a for a, b in zip(seq, seq[1:]))
    close = abs(cost[4] - cost[None]) <= 0.05 * cost[None]
    ok = monotone and close
    record(8, ok, "mean cost " + " ".join(f"l={'inf' if l is None else l}: {cost[l]:.3f}" for l in levels)
           + f" (non-increasing: {monotone}, l=4 within 5%: {close})")
    assert ok


# ----------------------------------------------------------- 9: determinism


def test_criterion_9_determinism(tmp_path):
    cfg = harness.config_from_dict({
        "name": "det",
        "topology": {"n_nodes": 3, "n_users": 4, "capacity": 1.0},
        "trace": {"n_files": 5, "n_slots": 60, "n_patterns": 2},
        "predictor": {"rho": 6, "n_clusters": 2, "hidden": [6, 4]},
        "agent": {"actor_hidden": [32, 16], "critic_hidden": [16, 8], "pretrain_slots": 20, "pretrain_steps": 50},
        "sweep": {"betas": [0.0, 1.5], "quant_levels": [None, 2]},
        "seeds": [0, 1],
    })
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        harness.run_prediction_experiment(cfg, out / "prediction")
        harness.run_caching_experiment(cfg, out / "caching")
        outputs.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))})
    ok = outputs[0] == outputs[1] and len(outputs[0]) > 10
    record(9, ok, f"{len(outputs[0])} CSV files, bitwise identical across two runs: {outputs[0] == outputs[1]}")
    assert ok


# ---------------------------------------------------------- 10: bookkeeping


def test_criterion_10_bookkeeping():
    cfg = desk_config()
    ctx = harness.seed_everything(cfg, 0)
    trace = harness.make_trace(cfg, ctx)
    run = run_online(trace, harness.predictor_config(cfg, "clstm", 0))
    F, rho = trace.files, run.start
    counts_ok = all(int(c.sum()) == F * (i + 1) for i, c in enumerate(run.cluster_counts))
    counts_ok &= len(run.cluster_counts) == trace.slots - rho

    # replay buffers: small capacities, checked after every insertion
    from coded_cache.predictor import LstmBank
    from coded_cache.agent import ReplayBuffer

    peak = {"bank": 0, "agent": 0}
    bank_add, buf_add = LstmBank.add, ReplayBuffer.add

    def bank_spy(self, group, normalized, target):
        bank_add(self, group, normalized, target)
        peak["bank"] = max(peak["bank"], max(len(b) / b.maxlen for b in self.buffers))

    def buf_spy(self, tr):
        buf_add(self, tr)
        peak["agent"] = max(peak["agent"], len(self) / self.capacity)

    LstmBank.add, ReplayBuffer.add = bank_spy, buf_spy
    try:
        small = harness.predictor_config(cfg, "clstm", 0)
        small.buffer_size = 40
        run_online(trace, small)
        setup = harness.prepare_caching(cfg, ctx, prediction=run)
        cfg_small = desk_config(agent={"buffer_size": 30, "pretrain_steps": 20, "pretrain_slots": 120})
        harness.run_policy("ddpg", setup, cfg_small, ctx)
    finally:
        LstmBank.add, ReplayBuffer.add = bank_add, buf_add
    buffers_ok = 0 < peak["bank"] <= 1.0 and 0 < peak["agent"] <= 1.0

    # target contraction with a frozen learner
    tau = 0.05
    ag = SDDPGAgent(2, 3, 1.0, AgentConfig(actor_hidden=(8,), critic_hidden=(6, 4), tau=tau, actor_lr=0.0, critic_lr=0.0))
    for net in (ag.actor_target, ag.critic_target):
        for p in net.parameters():
            p += 1.0
    d_actor, d_critic = param_distance(ag.actor_target, ag.actor), param_distance(ag.critic_target, ag.critic)
    ratios = []
    for _ in range(10):
        ag.soft_update_targets()
        da, dc = param_distance(ag.actor_target, ag.actor), param_distance(ag.critic_target, ag.critic)
        ratios += [da / d_actor, dc / d_critic]
        d_actor, d_critic = da, dc
    contraction_ok = np.allclose(ratios, 1 - tau, rtol=1e-9)

    ok = counts_ok and buffers_ok and contraction_ok
    record(10, ok, f"sum S_i = F(t-rho) at all {len(run.cluster_counts)} slots: {counts_ok}; "
           f"buffer fill peaks bank {peak['bank']:.2f} agent {peak['agent']:.2f} of capacity; "
           f"target contraction factors {min(ratios):.6f}..{max(ratios):.6f} vs {1 - tau}")
    assert ok

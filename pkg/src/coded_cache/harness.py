"""Experiment orchestration: configs, seeding, prediction and caching runs, CSV output.

Configs are YAML documents mirroring :class:`ExperimentConfig`. Caching runs
use a normalised file size so that one file fetched over the slowest cache
link costs one delay unit; the replacement weight ``beta`` is in the same unit.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .agent import (
    AgentConfig,
    CachingEnv,
    RunLog,
    SDDPGAgent,
    lp_chain,
    pretrain_critic,
    run_pso_p,
    run_sddpg,
)
from .net_model import CostParams, Topology, build_hex_topology, transmission_cost
from .predictor import PredictionRun, PredictorConfig, run_online, write_nmse_log
from .trace import DemandTrace, allocate_to_users, load_per_user, load_trace, synth_trace, top_f_filter

log = logging.getLogger(__name__)

POLICIES = ("pso_p", "ddpg", "sddpg", "sddpg_r")
PREDICTION_METHODS = ("clstm", "lstm", "last_value")
SEED_NAMES = ("topology", "trace", "allocation", "predictor", "agent", "ou")


# ------------------------------------------------------------------------ config


@dataclass
class TopologySettings:
    n_nodes: int = 7
    inter_node_distance: float = 500.0
    n_users: int = 20
    coverage_radius: float = 500.0
    inner_exclusion_radius: float = 50.0
    capacity: float = 5.0
    tx_power_w: float = 1.0
    bandwidth_hz: float = 1e5
    noise_psd_dbm_hz: float = -152.0
    antenna_gain_dbi: float = 1.0
    # bits per file; None means one file over the slowest cache link costs 1
    file_size: float | None = None

    def link(self) -> dict:
        return dict(
            tx_power_w=self.tx_power_w,
            bandwidth_hz=self.bandwidth_hz,
            noise_psd_dbm_hz=self.noise_psd_dbm_hz,
            antenna_gain_dbi=self.antenna_gain_dbi,
        )


@dataclass
class TraceSettings:
    path: str | None = None  # aggregate slot,file_id,count CSV; synthetic when None
    per_user_path: str | None = None
    n_files: int = 50
    n_slots: int = 600
    n_patterns: int = 4
    period: int = 24
    noise_level: float = 0.1
    mean_rate: float = 20.0
    drift: float = 0.3
    release_fraction: float = 0.3
    hype: float = 0.0
    hype_decay: float = 48.0
    phase_jitter: float = 0.5
    switch_every: float = 150.0


@dataclass
class PredictorSettings:
    rho: int = 12
    n_clusters: int = 4
    buffer_size: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    hidden: tuple[int, ...] = (24, 24, 12)


@dataclass
class SweepSettings:
    methods: tuple[str, ...] = PREDICTION_METHODS
    rhos: tuple[int, ...] = ()
    clusters: tuple[int, ...] = ()
    policies: tuple[str, ...] = POLICIES
    betas: tuple[float, ...] = ()
    quant_levels: tuple[int | None, ...] = ()


@dataclass
class ExperimentConfig:
    name: str = "full"
    topology: TopologySettings = field(default_factory=TopologySettings)
    trace: TraceSettings = field(default_factory=TraceSettings)
    predictor: PredictorSettings = field(default_factory=PredictorSettings)
    agent: AgentConfig = field(default_factory=AgentConfig)
    beta: float = 1.5
    gamma: float = 0.99
    sweep: SweepSettings = field(default_factory=SweepSettings)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    workers: int = 1

    def validate(self) -> None:
        CostParams(self.beta, self.gamma)
        if self.topology.capacity < 0:
            raise ValueError("capacity must be non-negative")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for m in self.sweep.methods:
            if m not in PREDICTION_METHODS:
                raise ValueError(f"unknown prediction method {m!r}")
        for p in self.sweep.policies:
            if p not in POLICIES:
                raise ValueError(f"unknown policy {p!r}")
        rho = self.predictor.rho
        if self.trace.path is None and self.trace.n_slots <= rho + self.agent.pretrain_slots:
            raise ValueError("trace too short for the prediction window plus pre-training slots")


def full_profile() -> ExperimentConfig:
    return ExperimentConfig()


def desk_profile() -> ExperimentConfig:
    """Small network for laptop runs, keeping the full 500-slot pre-training window."""
    return ExperimentConfig(
        name="desk",
        topology=TopologySettings(n_nodes=3, n_users=6, capacity=2.0),
        trace=TraceSettings(n_files=10, n_slots=900, n_patterns=2),
        seeds=(0, 1, 2),
    )


PROFILES = {"full": full_profile, "desk": desk_profile}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


def config_to_dict(config: ExperimentConfig) -> dict:
    return _to_plain(config)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        current = getattr(defaults, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value, f"{where}.{key}")
        elif isinstance(current, tuple) and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay ``data`` onto ``base`` (full profile by default)."""
    merged = config_to_dict(base or full_profile())

    def overlay(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                overlay(dst[k], v)
            else:
                dst[k] = v

    data = dict(data or {})
    profile = data.pop("profile", None)
    if profile is not None:
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        merged = config_to_dict(PROFILES[profile]())
    overlay(merged, data)
    cfg = _build(ExperimentConfig, merged, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=False)


# ----------------------------------------------------------------------- seeding


@dataclass
class RunContext:
    seed: int
    seeds: dict[str, int]


def seed_everything(config: ExperimentConfig, seed: int) -> RunContext:
    """Derive one integer sub-seed per stochastic component from ``seed``.

    Sub-seeds depend only on the run seed and the component name, so changing
    how one component consumes randomness never shifts the others.
    """
    seeds = {}
    for name in SEED_NAMES:
        tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
        seeds[name] = int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])
    return RunContext(seed, seeds)


# ------------------------------------------------------------------ data set-up


def make_topology(config: ExperimentConfig, ctx: RunContext) -> Topology:
    t = config.topology
    return build_hex_topology(
        t.n_nodes, t.inter_node_distance, t.n_users, t.coverage_radius, t.inner_exclusion_radius,
        rng_seed=ctx.seeds["topology"], **t.link(),
    )


def make_trace(config: ExperimentConfig, ctx: RunContext) -> DemandTrace:
    tr = config.trace
    K = config.topology.n_users
    if tr.path is None:
        return synth_trace(
            tr.n_files, tr.n_slots, K, tr.n_patterns, tr.period, tr.noise_level, ctx.seeds["trace"],
            mean_rate=tr.mean_rate, drift=tr.drift, release_fraction=tr.release_fraction,
            hype=tr.hype, hype_decay=tr.hype_decay, phase_jitter=tr.phase_jitter,
            switch_every=tr.switch_every,
        )
    trace = load_trace(tr.path)
    if tr.per_user_path is not None:
        trace = load_per_user(tr.per_user_path, trace, K)
    if trace.files > tr.n_files:
        trace = top_f_filter(trace, tr.n_files)
    if trace.per_user is None:
        trace = allocate_to_users(trace, K, ctx.seeds["allocation"])
    return trace


def normalised_file_size(topology: Topology) -> float:
    """File size making one full-file fetch over the slowest cache link cost 1."""
    d = topology.per_bit_delay[:, 1:]
    reach = np.zeros_like(d, dtype=bool)
    for k, nodes in enumerate(topology.reachable_sets):
        for n in nodes:
            if n != 0:
                reach[k, n - 1] = True
    return 1.0 / float(d[reach].max()) if reach.any() else 1.0 / float(topology.per_bit_delay[:, 0].max())


def predictor_config(config: ExperimentConfig, method: str, seed: int, rho=None, n_clusters=None) -> PredictorConfig:
    p = config.predictor
    return PredictorConfig(
        method=method,
        rho=p.rho if rho is None else rho,
        n_clusters=p.n_clusters if n_clusters is None else n_clusters,
        buffer_size=p.buffer_size,
        batch_size=p.batch_size,
        lr=p.lr,
        hidden=tuple(p.hidden),
        seed=seed,
    )


# -------------------------------------------------------------------- csv output


def write_cost_log(log_: RunLog, path: str | Path) -> None:
    ravg = log_.running_avg
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "c_d", "c_r", "c_total", "running_avg"])
        for rec, ra in zip(log_.records, ravg):
            w.writerow([rec["slot"], repr(float(rec["c_d"])), repr(float(rec["c_r"])), repr(float(rec["c_total"])), repr(float(ra))])


def write_rows(path: str | Path, header: list[str], rows: list[list[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


# ------------------------------------------------------------ prediction runs


def run_prediction_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Average NMSE per method and sweep point for every configured seed.

    Returns ``{"rows": [...], "summary": [...]}``; rows hold
    ``(seed, method, rho, n_clusters, avg_nmse)``.
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed_rows in _map_seeds(_prediction_seed, config, out):
        rows.extend(seed_rows)
    write_rows(out / "prediction_runs.csv", ["seed", "method", "rho", "n_clusters", "avg_nmse"], rows)
    summary = _summarise(rows, key_cols=(1, 2, 3), value_col=4)
    write_rows(out / "prediction_summary.csv", ["method", "rho", "n_clusters", "mean_avg_nmse", "std_avg_nmse", "n_seeds"], summary)
    return {"rows": rows, "summary": summary}


def _prediction_seed(config: ExperimentConfig, seed: int, out: Path) -> list[list]:
    rhos = config.sweep.rhos or (config.predictor.rho,)
    clusters = config.sweep.clusters or (config.predictor.n_clusters,)
    ctx = seed_everything(config, seed)
    trace = make_trace(config, ctx)
    rows = []
    for method in config.sweep.methods:
        for rho in rhos:
            for c in clusters if method == "clstm" else (clusters[0],):
                pc = predictor_config(config, method, ctx.seeds["predictor"], rho, c)
                run = run_online(trace, pc)
                rows.append([seed, method, rho, c if method == "clstm" else 0, run.average_nmse])
                tag = f"seed{seed}_{method}_rho{rho}" + (f"_C{c}" if method == "clstm" else "")
                write_nmse_log(run, out / f"nmse_{tag}.csv")
                log.info("%s: average NMSE %.4f", tag, run.average_nmse)
    return rows


def _map_seeds(fn, config: ExperimentConfig, out: Path) -> list:
    """Run ``fn(config, seed, out)`` per seed, in worker processes if configured.

    Results come back in seed order either way.
    """
    if config.workers <= 1 or len(config.seeds) == 1:
        return [fn(config, seed, out) for seed in config.seeds]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        futures = [pool.submit(fn, config, seed, out) for seed in config.seeds]
        return [f.result() for f in futures]


def _summarise(rows, key_cols, value_col):
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[i] for i in key_cols), []).append(r[value_col])
    out = []
    for key, vals in groups.items():
        m, s = mean_std(vals)
        out.append([*key, m, s, len(vals)])
    return out


# --------------------------------------------------------------- caching runs


@dataclass
class CachingSetup:
    topology: Topology
    trace: DemandTrace
    predicted: np.ndarray  # (T, F) C-LSTM forecasts, NaN before the first predictable slot
    file_size: float
    start: int  # first slot with a forecast
    phase2: int  # first slot after pre-training
    reward_scale: float


def prepare_caching(config: ExperimentConfig, ctx: RunContext, prediction: PredictionRun | None = None) -> CachingSetup:
    topo = make_topology(config, ctx)
    trace = make_trace(config, ctx)
    if prediction is None:
        prediction = run_online(trace, predictor_config(config, "clstm", ctx.seeds["predictor"]))
    file_size = config.topology.file_size or normalised_file_size(topo)
    start = prediction.start
    phase2 = start + config.agent.pretrain_slots
    if phase2 >= trace.slots:
        raise ValueError("no slots left after pre-training")
    # reward unit: mean cost of serving everything from the MBS during pre-training
    empty = np.zeros((topo.n_nodes, trace.files))
    scale = float(np.mean([
        transmission_cost(topo, empty, trace.per_user[t], file_size) for t in range(start, phase2)
    ]))
    return CachingSetup(topo, trace, prediction.predictions, file_size, start, phase2, max(scale, 1e-12))


def _env(setup: CachingSetup, config: ExperimentConfig, actual_state: bool, beta: float) -> CachingEnv:
    state = setup.trace.aggregate.astype(float) if actual_state else np.nan_to_num(setup.predicted)
    return CachingEnv(
        setup.topology, setup.trace.per_user, state, config.topology.capacity,
        CostParams(beta, config.gamma), setup.file_size,
    )


def run_policy(policy: str, setup: CachingSetup, config: ExperimentConfig, ctx: RunContext,
               beta: float | None = None, quant_l: int | None = None) -> RunLog:
    """Run one policy over Phase 2 (pre-training first where the policy needs it).

    Every policy enters Phase 2 with an empty cache so the reported averages
    compare like with like.
    """
    beta = config.beta if beta is None else beta
    n2 = setup.trace.slots - setup.phase2
    if policy == "pso_p":
        env = _env(setup, config, False, beta)
        env.reset(setup.phase2)
        return run_pso_p(env, n2, quant_l)
    actual = policy == "sddpg_r"
    acfg = dataclasses.replace(config.agent, quant_l=quant_l, reward_scale=setup.reward_scale,
                               seed=ctx.seeds["agent"],
                               ou_seed=ctx.seeds["ou"] if config.agent.ou_seed is None else config.agent.ou_seed)
    agent = SDDPGAgent(setup.topology.n_nodes, setup.trace.files, config.topology.capacity, acfg)
    env = _env(setup, config, actual, beta)
    if policy in ("sddpg", "sddpg_r"):
        pre = range(setup.start, setup.phase2)
        samples = lp_chain(
            setup.topology, setup.trace.per_user, env.state_demand, pre, config.topology.capacity,
            beta, setup.file_size,
        )
        for s in samples:
            agent.encode(s.demand, s.prev_cache)
        agent.pretrain_actor(samples)
        env.reset(setup.start)
        pretrain_critic(agent, env, len(pre))
    else:
        # no supervised phase, but the demand normaliser sees the same window
        for t in range(setup.start, setup.phase2):
            agent.encode(env.state_demand[t], np.zeros((agent.N, agent.F)))
    env.reset(setup.phase2)
    return run_sddpg(agent, env, n2)


def _caching_seed(config: ExperimentConfig, seed: int, out: Path) -> list[list]:
    betas = config.sweep.betas or (config.beta,)
    levels = config.sweep.quant_levels or (config.agent.quant_l,)
    ctx = seed_everything(config, seed)
    setup = prepare_caching(config, ctx)
    rows = []
    for beta in betas:
        for l in levels:
            for policy in config.sweep.policies:
                rl = run_policy(policy, setup, config, ctx, beta, l)
                tag = f"seed{seed}_{policy}_beta{beta:g}_l{'inf' if l is None else l}"
                write_cost_log(rl, out / f"cost_{tag}.csv")
                c_r = np.array([r["c_r"] for r in rl.records])
                rows.append([seed, policy, float(beta), "inf" if l is None else int(l),
                             float(rl.running_avg[-1]), float(c_r.mean()), len(rl.records)])
                log.info("%s: average cost %.4f", tag, rows[-1][4])
    return rows


def run_caching_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Phase-2 cost curves for every policy, seed, beta and quantisation level."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed_rows in _map_seeds(_caching_seed, config, out):
        rows.extend(seed_rows)
    header = ["seed", "policy", "beta", "l", "avg_cost", "avg_c_r", "slots"]
    write_rows(out / "caching_runs.csv", header, rows)
    summary = _summarise(rows, key_cols=(1, 2, 3), value_col=4)
    write_rows(out / "caching_summary.csv", ["policy", "beta", "l", "mean_avg_cost", "std_avg_cost", "n_seeds"], summary)
    return {"rows": rows, "summary": summary}


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: str | Path, config: ExperimentConfig) -> None:
    out = Path(out_dir)
    save_config(config, out / "config.yaml")
    digests = {p.name: file_digest(p) for p in sorted(out.glob("*.csv"))}
    (out / "manifest.json").write_text(json.dumps(digests, indent=1, sort_keys=True))

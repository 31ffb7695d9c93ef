"""Command-line entry point: ``coded-cache <subcommand> [--config F] [--seed S] [--out DIR]``.

Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr and
exit with status 2.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import harness
from .agent import SDDPGAgent, lp_chain, pretrain_critic
from .tensor_nn import load_checkpoint, load_into, save_checkpoint
from .trace import load_trace, save_trace, top_f_filter

log = logging.getLogger("coded_cache")


def _parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict, value parsed as YAML."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def _merge(dst: dict, src: dict) -> dict:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v
    return dst


def resolve_config(args) -> harness.ExperimentConfig:
    data: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    if args.profile:
        data["profile"] = args.profile
    for ov in args.set or []:
        _merge(data, _parse_override(ov))
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.out is not None:
        data["out_dir"] = args.out
    return harness.config_from_dict(data)


def _out(config) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_topo(config, args) -> dict:
    out = _out(config)
    paths = []
    for seed in config.seeds:
        topo = harness.make_topology(config, harness.seed_everything(config, seed))
        path = out / f"topology_seed{seed}.json"
        topo.save(path)
        paths.append(str(path))
    return {"topologies": paths}


def cmd_trace(config, args) -> dict:
    out = _out(config)
    paths = []
    for seed in config.seeds:
        ctx = harness.seed_everything(config, seed)
        if args.input:
            trace = load_trace(args.input)
            if trace.files > config.trace.n_files:
                trace = top_f_filter(trace, config.trace.n_files)
        else:
            trace = harness.make_trace(config, ctx)
        agg = out / f"trace_seed{seed}.csv"
        per_user = out / f"trace_per_user_seed{seed}.csv"
        save_trace(trace, agg, per_user if trace.per_user is not None else None)
        paths.append(str(agg))
    return {"traces": paths}


def cmd_predict(config, args) -> dict:
    res = harness.run_prediction_experiment(config, _out(config))
    return {"summary": res["summary"]}


def cmd_pretrain(config, args) -> dict:
    """Supervised actor pre-training plus critic warm-up; writes checkpoints."""
    out = _out(config)
    result = {}
    for seed in config.seeds:
        ctx = harness.seed_everything(config, seed)
        setup = harness.prepare_caching(config, ctx)
        env = harness._env(setup, config, args.actual, config.beta)
        acfg = dataclasses.replace(config.agent, reward_scale=setup.reward_scale, seed=ctx.seeds["agent"],
                                   ou_seed=ctx.seeds["ou"] if config.agent.ou_seed is None else config.agent.ou_seed)
        agent = SDDPGAgent(setup.topology.n_nodes, setup.trace.files, config.topology.capacity, acfg)
        pre = range(setup.start, setup.phase2)
        samples = lp_chain(setup.topology, setup.trace.per_user, env.state_demand, pre,
                           config.topology.capacity, config.beta, setup.file_size)
        for s in samples:
            agent.encode(s.demand, s.prev_cache)
        losses = agent.pretrain_actor(samples)
        env.reset(setup.start)
        critic_log = pretrain_critic(agent, env, len(pre))
        harness.write_rows(out / f"pretrain_actor_seed{seed}.csv", ["step", "loss"], [[i, float(v)] for i, v in enumerate(losses)])
        harness.write_rows(
            out / f"pretrain_critic_seed{seed}.csv", ["slot", "c_total", "critic_loss"],
            [[r["slot"], float(r["c_total"]), float("nan") if r["critic_loss"] is None else float(r["critic_loss"])] for r in critic_log],
        )
        save_checkpoint(out / f"actor_seed{seed}", agent.actor.named_parameters())
        save_checkpoint(out / f"critic_seed{seed}", agent.critic.named_parameters())
        result[seed] = {"placement_mse": agent.placement_error(samples), "demand_scale": agent.demand_scale}
    (out / "pretrain_summary.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return {"pretrain": result}


def cmd_train(config, args) -> dict:
    if args.policy:
        config = dataclasses.replace(config, sweep=dataclasses.replace(config.sweep, policies=tuple(args.policy)))
        config.validate()
    res = harness.run_caching_experiment(config, _out(config))
    harness.write_manifest(config.out_dir, config)
    return {"summary": res["summary"]}


def cmd_evaluate(config, args) -> dict:
    """Roll a pre-trained actor over Phase 2 without exploration or learning."""
    out = _out(config)
    ckpt_dir = Path(args.checkpoint_dir or config.out_dir)
    rows = []
    for seed in config.seeds:
        ctx = harness.seed_everything(config, seed)
        setup = harness.prepare_caching(config, ctx)
        env = harness._env(setup, config, args.actual, config.beta)
        agent = SDDPGAgent(setup.topology.n_nodes, setup.trace.files, config.topology.capacity, config.agent)
        load_into(agent.actor.named_parameters(), load_checkpoint(ckpt_dir / f"actor_seed{seed}"))
        for t in range(setup.start, setup.phase2):
            agent.encode(env.state_demand[t], np.zeros((agent.N, agent.F)))
        env.reset(setup.phase2)
        rl = harness.RunLog()
        while not env.done:
            demand, prev = env.observe()
            rl.records.append(env.step(agent.act(agent.encode(demand, prev), explore=False)))
        harness.write_cost_log(rl, out / f"eval_seed{seed}.csv")
        rows.append([seed, float(rl.running_avg[-1]), len(rl.records)])
    harness.write_rows(out / "evaluation.csv", ["seed", "avg_cost", "slots"], rows)
    return {"evaluation": rows}


def cmd_sweep(config, args) -> dict:
    out = _out(config)
    result = {}
    if args.kind in ("prediction", "all"):
        result["prediction"] = harness.run_prediction_experiment(config, out / "prediction")["summary"]
    if args.kind in ("caching", "all"):
        result["caching"] = harness.run_caching_experiment(config, out / "caching")["summary"]
    save = out / "config.yaml"
    harness.save_config(config, save)
    return result


COMMANDS = {
    "topo": (cmd_topo, "build and save the network topology"),
    "trace": (cmd_trace, "generate a synthetic trace or convert a CSV trace"),
    "predict": (cmd_predict, "run the request predictors and write NMSE logs"),
    "pretrain": (cmd_pretrain, "supervised actor pre-training and critic warm-up"),
    "train": (cmd_train, "run caching policies and write cost logs"),
    "evaluate": (cmd_evaluate, "roll out a saved actor without exploration"),
    "sweep": (cmd_sweep, "run the configured prediction and caching sweeps"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coded-cache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--profile", choices=sorted(harness.PROFILES), help="start from a named profile")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. beta=0")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "trace":
            p.add_argument("--input", help="existing slot,file_id,count CSV to convert")
        if name in ("pretrain", "evaluate"):
            p.add_argument("--actual", action="store_true", help="use actual instead of predicted demand in the state")
        if name == "train":
            p.add_argument("--policy", action="append", choices=harness.POLICIES)
        if name == "evaluate":
            p.add_argument("--checkpoint-dir", help="directory holding actor_seed<S> checkpoints")
        if name == "sweep":
            p.add_argument("--kind", choices=("prediction", "caching", "all"), default="all")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        fn, _ = COMMANDS[args.command]
        result = fn(config, args)
    except Exception as exc:  # reported as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 2
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

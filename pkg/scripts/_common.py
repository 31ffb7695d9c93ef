"""Shared argument handling for the sweep scripts."""
import argparse
import logging

from coded_cache import harness


def parser(description: str, profile: str = "desk") -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="YAML config to start from")
    p.add_argument("--profile", default=profile, choices=sorted(harness.PROFILES))
    p.add_argument("--seeds", type=int, nargs="+", help="override the configured seeds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_config(args, **sweep) -> harness.ExperimentConfig:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.PROFILES[args.profile]()
    data = harness.config_to_dict(cfg)
    data["sweep"].update(sweep)
    data["out_dir"] = args.out
    data["workers"] = args.workers
    if args.seeds:
        data["seeds"] = args.seeds
    return harness.config_from_dict(data)


def show(header, rows) -> None:
    print(",".join(header))
    for r in rows:
        print(",".join(f"{x:.4f}" if isinstance(x, float) else str(x) for x in r))

"""Command line entry point: ``formica {gen,train,eval,compare,exact} CONFIG``.

Configs are JSON objects whose keys mirror ``ExperimentConfig`` (gen, eval,
compare, exact) or ``TrainConfig`` (train; a nested ``scenario`` object holds
generator overrides on top of ``preset``).  Exit codes: 0 success, 1 config
error, 2 partial method failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import network
from .core import save_scenario
from .harness import ExperimentConfig, load_json_config, run_experiment, write_csv, write_experiment
from .scenario import generate, preset
from .solver import ExactConfig, solve_exact
from .training import TrainConfig, train

logger = logging.getLogger("formica")


class ConfigError(Exception):
    pass


def _experiment_config(args) -> ExperimentConfig:
    data = load_json_config(args.config)
    if args.seed is not None:
        data["base_seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = args.out
    if args.workers is not None:
        data["workers"] = args.workers
    if data.get("output_dir") is None:
        raise ConfigError("an output directory is required (config 'output_dir' or --out)")
    try:
        cfg = ExperimentConfig.from_dict(data)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def train_config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    scen = dict(data.pop("scenario", {}))
    gen = preset(scen.pop("preset", data.pop("preset", "training")), **scen)
    known = {f.name for f in fields(TrainConfig)}
    extra = set(data) - known - {"output_dir"}
    if extra:
        raise ValueError(f"unknown train config fields {sorted(extra)}")
    data.pop("output_dir", None)
    return TrainConfig(scenario=gen, **data)


def cmd_gen(args) -> int:
    cfg = _experiment_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = cfg.gen_config()
    for k in range(cfg.n_scenarios):
        save_scenario(generate(replace(gen, seed=cfg.base_seed + k)), out / f"scenario_{k:05d}.json")
    logger.info("wrote %d scenarios to %s", cfg.n_scenarios, out)
    return 0


def cmd_train(args) -> int:
    data = load_json_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    out = args.out or data.get("output_dir")
    if out is None:
        raise ConfigError("an output directory is required (config 'output_dir' or --out)")
    try:
        cfg = train_config_from_dict(data)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    params, report = train(cfg)
    network.save(params, out / "checkpoint.bin")
    write_csv(out / "train_report.csv",
              ({"step": s, "phase": ph, "loss": loss, "lam": lam, "wall_ms": ms}
               for s, ph, loss, lam, ms in report.rows()),
              columns=["step", "phase", "loss", "lam", "wall_ms"])
    logger.info("trained in %.1f s, final lambda %g -> %s", report.wall_seconds, report.final_lam, out)
    return 0


def _cmd_experiment(args, compare: bool) -> int:
    cfg = _experiment_config(args)
    if compare and len(cfg.methods) < 2:
        raise ConfigError("compare needs at least two methods")
    result = run_experiment(cfg)
    for path in write_experiment(result, cfg.output_dir, compare=compare):
        logger.info("wrote %s", path)
    return result.exit_code


def cmd_eval(args) -> int:
    return _cmd_experiment(args, compare=False)


def cmd_compare(args) -> int:
    return _cmd_experiment(args, compare=True)


def cmd_exact(args) -> int:
    cfg = _experiment_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = cfg.gen_config()
    exact_cfg = ExactConfig(cfg.exact_time_limit, cfg.exact_node_limit)
    stats, assignments = [], []
    for k in range(cfg.n_scenarios):
        scen = generate(replace(gen, seed=cfg.base_seed + k))
        res = solve_exact(scen, exact_cfg)
        stats.append({"index": k, "seed": scen.seed, "objective": res.objective, "bound": res.bound,
                      "gap": res.gap, "status": res.status, "nodes": res.nodes, "ms": res.ms})
        assignments.extend({"index": k, "task": j, "robot": int(r)} for j, r in enumerate(res.assignment))
    write_csv(out / "exact_assignments.csv", assignments, columns=["index", "task", "robot"])
    write_csv(out / "exact_stats.csv", stats)
    return 0 if all(s["status"] == "optimal" for s in stats) else 2


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "exact": cmd_exact}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formica", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the (base) seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="evaluation worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"formica {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

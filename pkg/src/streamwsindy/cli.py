"""Command line entry point: simulate, identify, experiment, verify."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .grid import iter_snapshot_stream
from .analysis import reach_and_hold
from .harness import (ConfigError, ExperimentConfig, config_fields, dataset_for, load_config, noisy_stream,
                      parse_config_text, run_experiment, run_stream, truth_problem, write_trial_csv)
from .sims import DIMENSION, LHS_ORDER, SimulationDiverged, write_dataset
from .sparse import DivergenceError
from .weakform import MarginError, NotReady, build_library

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("streamwsindy")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for name in config_fields():
        if name == "out":
            continue
        flag = "--" + name.lower().replace("_", "-")
        p.add_argument(flag, dest=name, default=None, metavar="VALUE")
    p.add_argument("--out", default=None, help="output directory")


def _config_from_args(args) -> ExperimentConfig:
    fields_ = config_fields()
    raw = [f"{k}={getattr(args, k)}" for k in fields_ if getattr(args, k, None) is not None]
    overrides = parse_config_text("\n".join(raw))
    return load_config(args.config, **overrides)


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.out:
        raise ConfigError("simulate needs --out")
    sim = cfg.sim_config()
    path = write_dataset(sim, cfg.out)
    print(f"wrote {sim.steps} {sim.problem} snapshots to {path}")
    return EXIT_OK


def cmd_identify(args) -> int:
    if args.data_dir is None:
        args.source = "simulate"
        cfg = _config_from_args(args)
        if cfg.dt is None:
            raise ConfigError("reading snapshots from stdin needs --dt")
        stream = iter_snapshot_stream(sys.stdin.buffer, cfg.dt)
        problem = None
    else:
        args.source = "directory"
        cfg = _config_from_args(args)
        ds = dataset_for(cfg)
        rng = np.random.default_rng(cfg.seed)
        stream = noisy_stream(ds, cfg.sigma_nr[0], rng, cfg.running_rms)
        problem = truth_problem(cfg)
    state, rows = run_stream(cfg, stream, problem)
    lib = build_library(DIMENSION[cfg.problem], LHS_ORDER[cfg.problem])
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_trial_csv(out / "identify.csv", rows, lib.labels)
        (out / "library.txt").write_text(lib.serialize())
    w = rows[-1]["w"]
    terms = [f"{w[k]:+.6g} {lib.labels[k]}" for k in np.flatnonzero(w)]
    lhs = "u_t" if lib.lhs_order == 1 else "u_tt"
    print(f"{lhs} = " + " ".join(terms) if terms else f"{lhs} = 0")
    return EXIT_DIVERGED if state.divergences else EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config_from_args(args)
    result = run_experiment(cfg)
    diverged = 0
    for sigma, trials in result.trials.items():
        done = result.completed(sigma)
        held = sum(reach_and_hold(t.column("tpr")) is not None for t in done)
        diverged += sum(t.divergences for t in done)
        print(f"sigma_nr={sigma:g}: {len(done)}/{len(trials)} trials completed, "
              f"{held} reached and held TPR=1")
    if cfg.out:
        print(f"results in {cfg.out}")
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks
    ok = run_checks(quick=not args.full)
    return EXIT_OK if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamwsindy", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, helptext in [
        ("simulate", cmd_simulate, "write a snapshot directory"),
        ("identify", cmd_identify, "stream snapshots from a directory (--data-dir) or stdin"),
        ("experiment", cmd_experiment, "run a multi-trial noise sweep"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("verify", help="run the built-in consistency checks")
    p.add_argument("--full", action="store_true", help="include the slower simulator checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MarginError, NotReady, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, SimulationDiverged, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``run``, ``simulate`` and ``observability``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from .harness import FILTERS, SCHEMA, ConfigError, ExperimentConfig, _format_value, run_experiment
from .inekf import null_space, numerical_rank, observability_matrix, unobservable_basis
from .kinematics import UnreachableError
from .simulator import generate, write_stream_csv

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _set_pairs(pairs):
    """Parse ``--set key=value`` through the config grammar."""
    text = "\n".join(p.replace("=", " = ", 1) if "=" in p else p for p in pairs or [])
    return ExperimentConfig.parse(text, "--set").values, {p.split("=", 1)[0].strip() for p in pairs or []}


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "set", None):
        values, keys = _set_pairs(args.set)
        cfg = cfg.override(**{k: values[k] for k in keys})
    flags = {k: getattr(args, k, None) for k in ("trials", "seed", "filter", "preset", "workers")}
    return cfg.override(**flags)


def _add_config(p, required: bool):
    p.add_argument("--config", required=required, help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contact-inekf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Monte-Carlo convergence experiment")
    _add_config(run, required=True)
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--filter", choices=[*FILTERS, "both"])
    run.add_argument("--preset", choices=["desk", "paper"])
    run.add_argument("--workers", type=int)
    run.add_argument("--out", default="results", help="output directory (default: results)")

    sim = sub.add_parser("simulate", help="dump the sensor stream of a config to CSV")
    _add_config(sim, required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--preset", choices=["desk", "paper"])
    sim.add_argument("--out", required=True, help="CSV path")

    obs = sub.add_parser("observability", help="rank and null space of the single-contact bias-free system")
    obs.add_argument("--dt", type=float, required=True)
    obs.add_argument("--steps", type=int, default=10)

    sub.add_parser("keys", help="list config keys and defaults")
    return parser


def _cmd_run(args) -> int:
    cfg = _load(args)
    start = time.perf_counter()

    def progress(done, total):
        if args.verbose:
            print(f"trial {done}/{total}", file=sys.stderr)

    result = run_experiment(cfg, out_dir=args.out, progress=progress)
    print(f"{'filter':<6} {'converged':>9} {'median_s':>9} {'iqr_s':>15} {'diverged':>8}")
    for kind, m in result.summary.items():
        iqr = f"{m['iqr_low']:.3g}-{m['iqr_high']:.3g}"
        print(f"{kind:<6} {m['converged_fraction']:>9.2f} {m['median_convergence_time']:>9.3g} {iqr:>15} {m['diverged']:>8}")
    print(f"wrote {args.out} in {time.perf_counter() - start:.1f} s")
    return 0


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    _, stream = generate(cfg.gait())
    write_stream_csv(stream, args.out)
    print(f"wrote {len(stream)} events to {args.out}")
    return 0


def _cmd_observability(args) -> int:
    if not args.dt > 0 or args.steps < 1:
        raise ConfigError("--dt must be positive and --steps >= 1")
    O = observability_matrix(args.steps, args.dt)
    rank = numerical_rank(O)
    N = null_space(O)
    B = unobservable_basis(1, with_bias=False)
    B = B / np.linalg.norm(B, axis=0)
    # largest sine of the principal angles between the two subspaces
    gap = np.linalg.norm(B - N @ (N.T @ B), 2) if N.shape[1] else 1.0
    print(f"state dim 12, rank {rank}, unobservable {N.shape[1]}")
    print("null-space basis (columns: yaw, x, y, z; rows: R, v, p, d):")
    with np.printoptions(precision=6, suppress=True, linewidth=120):
        print(B)
    print(f"matches SVD null space: max principal-angle sine {gap:.2e}")
    return 0


def _cmd_keys(args) -> int:
    for key, (_, default) in SCHEMA.items():
        print(f"{key} = {_format_value(default)}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = {
        "run": _cmd_run,
        "simulate": _cmd_simulate,
        "observability": _cmd_observability,
        "keys": _cmd_keys,
    }[args.command]
    try:
        return command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnreachableError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

::

    pilotfarm run --config exp.json [--backend local|sim] [--seed N] [--out DIR]
    pilotfarm analyze [DIR] [--out DIR] [--bin-s S] [--threshold F]
    pilotfarm plot-data [DIR] [--out DIR] [--no-figures]
    pilotfarm validate-config --config exp.json [--backend local|sim]

Exit codes: 0 ok, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .config import ConfigError, load_config, resolve_output_dir
from .harness import (EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, MissingArtifacts, analyze,
                      emit_plots, run_experiment)
from .metrics import MissingEvents, NoTasks
from .model import Backend


def _backend(s: str) -> Backend:
    try:
        return Backend(s.upper())
    except ValueError:
        raise argparse.ArgumentTypeError(f"backend must be local or sim, not {s!r}") from None


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pilotfarm", description="Run and analyze pilot task-farm experiments.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def config_flags(p):
        p.add_argument("--config", required=True, help="experiment file (JSON)")
        p.add_argument("--backend", type=_backend, help="override the configured backend")
        p.add_argument("--seed", type=int, help="override the workload seed")

    p = sub.add_parser("run", help="run an experiment and write all artifacts")
    config_flags(p)
    p.add_argument("--out", help="output directory (beats RAPTOR_OUT and the config)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("analyze", help="recompute report.json from a run's event log")
    p.add_argument("dir", nargs="?")
    p.add_argument("--out")
    p.add_argument("--bin-s", type=float)
    p.add_argument("--threshold", type=float, default=0.95)

    p = sub.add_parser("plot-data", help="write the TSV series and figures of a run")
    p.add_argument("dir", nargs="?")
    p.add_argument("--out")
    p.add_argument("--bin-s", type=float)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("validate-config", help="check an experiment file")
    config_flags(p)
    return ap


def _load(args):
    cfg = load_config(args.config)
    if args.backend is not None:
        cfg = cfg.with_backend(args.backend)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    return cfg


def _run_dir(args) -> str:
    d = args.dir or args.out
    if d is None:
        raise MissingArtifacts("no run directory given")
    return d


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "validate-config":
            cfg = _load(args)
            n = len(cfg.pilots)
            print(f"ok: {cfg.name} ({cfg.backend.value}, {n} pilot{'s' if n != 1 else ''}, "
                  f"{cfg.workload.n_tasks} tasks)")
            return EXIT_OK
        if args.cmd == "run":
            cfg = _load(args)
            out = resolve_output_dir(cfg, args.out)
            o = run_experiment(cfg, out, plots=not args.no_figures)
            for e in o.errors:
                print(f"error: {e}", file=sys.stderr)
            if o.report is not None:
                sys.stdout.write(o.report.to_table())
            print(f"{out}: exit {o.exit_code} after {o.wall_s:.1f}s")
            return o.exit_code
        if args.cmd == "analyze":
            r = analyze(_run_dir(args), args.bin_s, args.threshold)
            sys.stdout.write(r.to_table())
            return EXIT_OK
        if args.cmd == "plot-data":
            for path in emit_plots(_run_dir(args), args.bin_s, figures=not args.no_figures):
                print(path)
            return EXIT_OK
    except MissingArtifacts as e:
        print(f"error: missing artifacts: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoTasks, MissingEvents, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

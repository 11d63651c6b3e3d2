"""Command line entry point: ``cemflow run | sweep | verify``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import harness
from .model import ConfigError, RasterError, load_config

log = logging.getLogger("cemflow")

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="cemflow", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS threads (the pipeline itself is sequential)")
    p.add_argument("--seed", type=int, default=None,
                   help="accepted for compatibility; the pipeline is deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one configuration")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--cache", type=Path, default=None,
                   help="directory for cached basis matrices")

    s = sub.add_parser("sweep", help="sweep H and L for a built-in experiment")
    s.add_argument("--experiment", required=True, choices=["E1", "E2", "E3", "E4"])
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n", type=int, default=128)
    s.add_argument("--hdiv", type=int, nargs="+", default=list(harness.SWEEP_HDIV))
    s.add_argument("--basis", type=int, nargs="+", default=list(harness.SWEEP_BASIS))

    v = sub.add_parser("verify", help="run the self-checks and check an existing report")
    v.add_argument("--out", required=True, type=Path)
    return p


def _log_row(row):
    log.info("%s H=1/%d m=%d L=%d  e_H1=%.4f%%  e_L2=%.4f%%  (%.1fs + %.1fs)",
             row.experiment, round(1 / row.H), row.m, row.L, 100 * row.err_H1,
             100 * row.err_L2, row.offline_s, row.online_s)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            if args.command == "run":
                rep = harness.run_experiment(load_config(args.config), args.cache)
                for row in rep.rows:
                    _log_row(row)
                print(harness.emit_report(rep, args.out))
                return EXIT_OK
            if args.command == "sweep":
                rep = harness.sweep(args.experiment, args.n, args.hdiv, args.basis, log=_log_row)
                print(harness.emit_report(rep, args.out))
                ok = all(ok for _, ok, _ in harness.check_report_rows(rep.rows))
                return EXIT_OK if ok else EXIT_FAILED
            ok = harness.verify(args.out)
            return EXIT_OK if ok else EXIT_FAILED
    except (ConfigError, RasterError, harness.StageError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

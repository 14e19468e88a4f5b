"""Command-line entry point: ``kac-contact run|validate|fixed-point``."""
import argparse
import logging
import os
import sys

from .config import load_config
from .errors import ConfigurationError, NumericalError, ValidationError
from .events import write_cluster_csv
from .macro import format_fixed_point, homogeneous_fixed_point
from .report import emit_report
from .studies import run_study

log = logging.getLogger("kac_contact")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_VERDICT = 4


def _run(args):
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(seed=args.seed, replicas=args.replicas)
    snap_dir = os.path.join(args.out, "snapshots") if args.snapshots else None
    report, stats = run_study(cfg, threads=args.threads, snapshot_dir=snap_dir)
    csv_path, json_path = emit_report(report, args.out)
    if stats is not None:
        write_cluster_csv(stats, os.path.join(args.out, f"{report.study}_clusters.csv"))
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    print(report.verdict.get("line", "VERDICT"))
    return EXIT_OK if report.passed else EXIT_VERDICT


def _validate(args):
    cfg = load_config(args.config)
    print(f"ok: study={cfg.study} model={cfg.model} d={cfg.d} n1={cfg.n1} n2={cfg.n2} n3={cfg.n3}")
    return EXIT_OK


def _fixed_point(args):
    fp = homogeneous_fixed_point(args.k, args.lambda_star)
    sys.stdout.write(format_fixed_point(fp, args.k, args.lambda_star))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="kac-contact", description="Generalized contact process with Kac potentials.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the study named in a config file")
    r.add_argument("config")
    r.add_argument("--out", default=".")
    r.add_argument("--seed", type=int)
    r.add_argument("--replicas", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--snapshots", action="store_true", help="write per-replica lattice snapshots")
    r.set_defaults(func=_run)

    v = sub.add_parser("validate", help="check a config file and exit")
    v.add_argument("config")
    v.set_defaults(func=_validate)

    f = sub.add_parser("fixed-point", help="print the homogeneous stationary densities")
    f.add_argument("--k", type=int, required=True)
    f.add_argument("--lambda", dest="lambda_star", type=float, required=True)
    f.set_defaults(func=_fixed_point)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError) as exc:
        field = getattr(exc, "field", None)
        print(f"error: {exc}" + (f" (field: {field})" if field else ""), file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

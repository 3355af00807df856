"""Command-line entry point: ``nofas run|sweep|validate``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from nofas.config import ConfigError, dump_config, fast_profile, load_config, load_sweep
from nofas.experiments import OUTPUT_ENV, run_experiment, run_sweep

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--fast", action="store_true", help="reduced-scale profile (T_F = 3000)")
    common.add_argument("--out", default=None,
                        help=f"output root (default: config 'out', then ${OUTPUT_ENV}, then ./runs)")
    parser = argparse.ArgumentParser(prog="nofas", description="Normalizing-flow inference with adaptive surrogates.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment").add_argument("config")
    sub.add_parser("sweep", parents=[common], help="run a parameter sweep").add_argument("spec")
    sub.add_parser("validate", parents=[common], help="print the fully resolved config").add_argument("config")
    return parser


def _adjust(cfg, args):
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.fast:
        cfg = fast_profile(cfg)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "sweep":
            spec = load_sweep(args.spec)
            spec = replace(spec, base=_adjust(spec.base, args))
        else:
            cfg = _adjust(load_config(args.config), args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if args.command == "run":
        result = run_experiment(cfg, args.out)
        print(result.run_dir)
        if result.status != EXIT_OK:
            print(f"error: {result.error}", file=sys.stderr)
        return result.status
    sweep_dir, rows = run_sweep(spec, args.out)
    print(sweep_dir / "sweep.csv")
    failed = sum(1 for r in rows if r["status"] != "ok")
    if failed:
        print(f"{failed} of {len(rows)} cells failed", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``nngp-cert`` command line entry point."""

from __future__ import annotations

import argparse
import json
import sys

from .arch import ArchError
from .harness import (
    EXIT_CONFIG,
    SUBCOMMANDS,
    ConfigError,
    load_config,
    make_config,
    run_config,
)

# flag -> config field
_FLAGS = {
    "arch": dict(type=str, help="architecture file, or one of linear/fc/conv/skip"),
    "seed": dict(type=int, help="RNG seed (required, here or in the config)"),
    "out": dict(type=str, help="output directory"),
    "n": dict(type=int, help="input dimension (covering, linear kernel)"),
    "m": dict(type=int, help="lattice denominator (covering)"),
    "samples": dict(type=int, help="Monte-Carlo samples (covering)"),
    "trials": dict(type=int, help="GP draws"),
    "grid_size": dict(type=int, help="region discretization size"),
    "norm2": dict(type=float, help="||x0||_2 (certify)"),
    "x0": dict(type=str, help="file holding x0 (.npy or text)"),
    "delta": dict(type=float, nargs="+", dest="deltas", help="failure probabilities"),
    "p": dict(type=str, nargs="+", dest="norms", help="norms: 1 2 inf"),
    "radii": dict(type=float, nargs="+", help="explicit region radii"),
    "dims": dict(type=int, nargs="+", help="dimension sweep"),
    "widths": dict(type=int, nargs="+", help="hidden widths"),
    "nets": dict(type=int, help="random networks per dimension"),
    "points_per_net": dict(type=int, help="start points per network"),
    "draws": dict(type=int, help="network draws (verify-kernel)"),
    "points": dict(type=int, help="number of random points"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nngp-cert",
        description="NNGP kernels, certified radii and their Monte-Carlo checks.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, help="YAML or JSON run configuration")
        for flag, kw in _FLAGS.items():
            sp.add_argument("--" + flag.replace("_", "-"), **kw)
        if name == "covering":
            sp.add_argument("--dudley", action="store_true", default=None,
                            help="also compare the entropy integral with a_n")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("config",) and v is not None}
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
            if cfg.subcommand != args.subcommand:
                raise ConfigError(
                    f"config is for {cfg.subcommand!r}, command line asks for {args.subcommand!r}"
                )
        else:
            cfg = make_config(overrides)
        outcome = run_config(cfg)
    except (ConfigError, ArchError) as exc:
        print(f"nngp-cert: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"nngp-cert: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status = "PASS" if outcome.passed else "FAIL"
    if cfg.subcommand == "certify":
        print(json.dumps(outcome.summary["certificates"], indent=2))
    for path in outcome.files:
        print(f"wrote {path}")
    print(f"{cfg.subcommand}: {status}")
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())

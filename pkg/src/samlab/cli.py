"""``samlab <subcommand> --config <path> [--out <dir>] [--seeds N] [--format csv,json]``.

Exit codes: 0 pass, 1 a checked direction/assertion failed, 2 configuration
error, 3 inconclusive (standard errors too large to decide).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from samlab.config import EXPERIMENTS, load_config
from samlab.errors import CapabilityError, ConfigError, ContractError
from samlab.experiments import run

EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samlab", description="SAM/USAM variant laboratory: verification suites and mechanism experiments.")
    p.add_argument("subcommand", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--out", default=None, help="output directory (default: print the summary only)")
    p.add_argument("--seeds", type=int, default=None, help="override the config's seeds with 0..N-1")
    p.add_argument("--format", default=None, help="comma-separated subset of csv,json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def write_outputs(result, out_dir: str, formats) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)

    if "csv" in formats:
        for name, text in sorted(result.files.items()):
            put(name, text)
        for name, text in sorted(result.sidecar.items()):
            put(name, text)
    if "json" in formats:
        put("summary.json", result.summary_json())
    return written


def main(argv=None) -> int:
    # argparse exits with 2 on usage errors, which matches the config-error code
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.experiment != args.subcommand:
            raise ConfigError(f"config is for {cfg.experiment!r} but the subcommand is {args.subcommand!r}")
        if args.seeds is not None:
            cfg = cfg.with_seed_count(args.seeds)
        if args.format is not None:
            cfg = cfg.with_formats(p.strip() for p in args.format.split(",") if p.strip())
        result = run(cfg)
    except (ConfigError, ContractError, CapabilityError) as exc:
        print(f"samlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        write_outputs(result, args.out, cfg.formats)
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}" + (f"  ({c.detail})" if c.detail else ""))
    print(f"status: {result.status}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())

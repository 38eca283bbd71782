"""Command-line front end.

Subcommands: gen, calibrate, compress, remap, eval, verify, sweep-k.
Flag precedence: command line over --config JSON over built-in defaults.
Exit codes: 0 success, 1 invariant or oracle failure, 2 I/O or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import fileio, pipeline, verify
from .allocate import AllocError
from .curvature import StatsError
from .fileio import FileFormatError
from .linalg import LinalgError
from .net import NetError
from .pipeline import ConfigError, RunConfig
from .remap import RemapError
from .whiten import WhitenError

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2

_CONFIG_KEYS = (
    "seed",
    "ratio",
    "eta",
    "top_k",
    "damping_r",
    "damping_c",
    "whitening",
    "remap",
    "dims",
    "tokens",
)

_WHITENING_CLI = {"none": "none", "input": "input", "double": "double"}
_REMAP_CLI = {"off": "off", "plain": "plain", "loss": "loss", "hq": "hq"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--ratio", type=float, help="maintenance ratio: fraction of parameters kept")
    p.add_argument("--eta", type=float, help="minimum-rank ratio")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--damping-r", dest="damping_r", type=_damping)
    p.add_argument("--damping-c", dest="damping_c", type=_damping)
    p.add_argument("--whitening", choices=sorted(_WHITENING_CLI))
    p.add_argument("--remap", choices=sorted(_REMAP_CLI))
    p.add_argument("--dims", type=_dims, help="comma-separated layer dims, e.g. 48,32,32,24")
    p.add_argument("--tokens", type=int)


def _damping(text: str):
    if text == "auto":
        return None
    return float(text)


def _dims(text: str):
    return tuple(int(x) for x in text.split(","))


def _build_config(args: argparse.Namespace) -> RunConfig:
    file_values: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        unknown = set(raw) - set(_CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        file_values = raw
    cli_values = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    return pipeline.merge_config(RunConfig(), file_values, cli_values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankpress",
        description="Low-rank compression of small dense networks with "
        "calibration-aware whitening, greedy rank allocation, and int8 row remapping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a seeded toy model and calibration set")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("calibrate", help="accumulate per-layer statistics")
    _add_config_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="statistics file")

    p = sub.add_parser("compress", help="allocate ranks and write the compressed model")
    _add_config_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--stats", type=Path)
    p.add_argument("--plan", type=Path, help="apply an existing plan instead of allocating")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("remap", help="quantize factor rows of a compressed model")
    _add_config_flags(p)
    p.add_argument("--model", type=Path, required=True, help="compressed model file")
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="hybrid model file")

    p = sub.add_parser("eval", help="report losses, KL to the original, and storage")
    _add_config_flags(p)
    p.add_argument("--original", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="compressed or hybrid model")
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--plan", type=Path)
    p.add_argument("--out", type=Path, required=True, help="report JSON")

    p = sub.add_parser("verify", help="run the brute-force oracle battery")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="also write the JSON report here")

    p = sub.add_parser("sweep-k", help="sweep the curvature top-K and report KL per K")
    _add_config_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--k-list", dest="k_list", required=True, type=_dims, help="e.g. 2,4,8,16,24")
    p.add_argument("--out", type=Path, required=True, help="CSV file")

    return parser


def _run(args: argparse.Namespace) -> int:
    config = _build_config(args)
    if args.command == "gen":
        args.out.mkdir(parents=True, exist_ok=True)
        pipeline.cmd_gen(config, args.out / "model.bin", args.out / "calib.bin")
    elif args.command == "calibrate":
        pipeline.cmd_calibrate(config, args.model, args.calib, args.out)
    elif args.command == "compress":
        args.out.mkdir(parents=True, exist_ok=True)
        pipeline.cmd_compress(
            config,
            args.model,
            args.calib,
            args.stats,
            args.out / "compressed.bin",
            args.out / "plan.json",
            plan_path=args.plan,
        )
    elif args.command == "remap":
        pipeline.cmd_remap(config, args.model, args.calib, args.plan, args.out)
    elif args.command == "eval":
        pipeline.cmd_eval(
            config, args.original, args.model, args.calib, args.out, plan_path=args.plan
        )
    elif args.command == "verify":
        reports = verify.run_verification(config.seed)
        doc = json.dumps([r.as_dict() for r in reports], indent=1, sort_keys=True)
        print(doc)
        if args.out:
            args.out.write_text(doc + "\n")
        if not all(r.passed for r in reports):
            return EXIT_INVARIANT
    elif args.command == "sweep-k":
        pipeline.cmd_sweep_k(config, args.model, args.calib, list(args.k_list), args.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, FileFormatError, OSError) as exc:
        print(f"rankpress: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LinalgError, NetError, StatsError, WhitenError, AllocError, RemapError) as exc:
        print(f"rankpress: failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

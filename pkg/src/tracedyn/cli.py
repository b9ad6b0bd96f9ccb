"""Command-line entry point: ``tracedyn run|validate|list``.

Exit codes: 0 success, 1 an embedded check failed, 2 configuration or
usage error (including refusing to overwrite results without ``--force``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import __version__
from .config import EXPERIMENTS, ConfigError, load_config
from .experiments import OutputExistsError, build_manifest, run_experiment, write_results

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("tracedyn")

DESCRIPTIONS = {
    "conservation": "drift of H, N and C-tilde along rk4 trajectories",
    "liouville": "phase-space divergence of the trace-Hamiltonian flow",
    "ensemble_gaussian": "equipartition check <Tr q^2> = N^2/(2 tau)",
    "ward": "Ward-identity terms for (W, x) choices",
    "hbar": "effective hbar from the raw-chain C-tilde average",
    "collapse_born": "outcome frequencies and martingale check",
    "collapse_lindblad": "trajectory average vs Lindblad evolution",
    "degenerate_contrast": "energy-driven vs CSL on a degenerate superposition",
    "noise_bridge": "C-tilde fluctuation statistics",
    "algebra": "Grassmann axioms and Jacobi residuals",
    "derivative": "trace derivative vs finite differences",
    "gauge": "raw vs unitary-fixed ensemble averages",
    "norm_drift": "linear vs completed collapse norm drift",
}


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tracedyn", description="Trace-dynamics numerical experiments.")
    ap.add_argument("--version", action="version", version=f"tracedyn {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write results")
    run.add_argument("--config", required=True, metavar="PATH")
    run.add_argument("--seed", type=_seed, metavar="U64", help="override the config seed")
    run.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    run.add_argument("--force", action="store_true", help="overwrite existing results")
    val = sub.add_parser("validate", help="parse a config and print the resolved form")
    val.add_argument("--config", required=True, metavar="PATH")
    sub.add_parser("list", help="list experiment names")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "list":
        for name in EXPERIMENTS:
            print(f"{name:20s} {DESCRIPTIONS[name]}")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"error: {args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(cfg.to_json())
        return EXIT_OK

    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or cfg.output
    if out is None:
        print("error: no output directory (use --out or set 'output')", file=sys.stderr)
        return EXIT_CONFIG

    # refuse early, before spending compute
    from pathlib import Path

    if (Path(out) / "manifest.json").exists() and not args.force:
        print(f"error: {out} already holds results; pass --force to overwrite", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = run_experiment(cfg)
    except ConfigError as e:
        print(f"error: {args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        write_results(result.artifacts, out, build_manifest(cfg, result), force=args.force)
    except OutputExistsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    status = "PASS" if result.passed else "FAIL"
    print(f"{cfg.experiment}: {status} -> {out}")
    return EXIT_OK if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

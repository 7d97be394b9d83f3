"""Command line interface.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
The default output directory can be set with QRES_OUT_DIR.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _default_out(value):
    if value is not None:
        return Path(value)
    env = os.environ.get("QRES_OUT_DIR")
    return Path(env) if env else Path(".")


def _cmd_run(args) -> int:
    from .harness import parse_config, run_experiment

    config = parse_config(args.config)
    if args.seed is not None:
        config.raw["seed"] = args.seed
        config = parse_config(config.raw)
    result = run_experiment(config, threads=args.threads, out_dir=_default_out(args.out))
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    print(f"wrote {result.csv_path} and {result.json_path}", file=sys.stderr)
    return 0


def _cmd_theory(args) -> int:
    from .harness import parse_config, theory_tables

    config = parse_config(args.config)
    paths = theory_tables(config, _default_out(args.out))
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _cmd_check_regularity(args) -> int:
    from .geometry import ProbeSpec, check_regularity, load_positions, preset

    try:
        geom = preset(args.array)
    except Exception:
        geom = load_positions(args.array)
    probe = ProbeSpec(tuples=args.tuples)
    rng = np.random.default_rng(args.seed)
    report = check_regularity(geom, args.M, mode=args.mode, probe=probe, rng=rng)
    print(f"array: {geom.name} (N={geom.n_elements}, {geom.kind})")
    print(f"{report.mode} {args.M}-regular: {report.regular}")
    print(f"worst singular-value ratio: {report.worst_ratio:.3e} over {report.tuples_checked} tuples")
    if report.note:
        print(f"note: {report.note}")
    if not report.regular and report.witness is not None:
        print("witness directions:")
        for u, v in report.witness:
            print(f"  u={u:+.6f} v={v:+.6f}")
    return 0


def _cmd_crlb(args) -> int:
    import math

    from .bounds import crlb_directions, crlb_directions_model4
    from .harness import parse_config

    config = parse_config(args.config)
    geom = config.geom
    dirs = config.true_directions()
    bw = geom.beamwidth()
    snr = 10.0 ** (config.snr_db / 10.0)
    per_target = snr / config.m_true
    print(f"array: {geom.name}  BW={bw:.4f}  SNR={config.snr_db} dB  M={config.m_true}")
    for dphi in (0.0, 90.0, 180.0):
        phases = np.exp(1j * np.deg2rad(dphi) * np.arange(config.m_true))
        b = np.sqrt(per_target) * phases
        try:
            var = crlb_directions(geom, dirs, b, snapshots=config.test.snapshots)
            stds = "  ".join(f"{math.sqrt(v) / bw:.4f}" for v in var)
            print(f"deterministic dphi={dphi:5.1f}: sqrt(CRLB)/BW = {stds}")
        except Exception as exc:
            print(f"deterministic dphi={dphi:5.1f}: {exc}")
    var4 = crlb_directions_model4(
        geom, dirs, np.full(config.m_true, per_target), snapshots=config.test.snapshots
    )
    stds = "  ".join(f"{math.sqrt(v) / bw:.4f}" for v in var4)
    print(f"rayleigh fluctuating    : sqrt(CRLB)/BW = {stds}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qres", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a Monte Carlo experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_theory = sub.add_parser("theory", help="emit closed-form curves as CSV")
    p_theory.add_argument("config")
    p_theory.add_argument("--out", default=None)
    p_theory.set_defaults(func=_cmd_theory)

    p_reg = sub.add_parser("check-regularity", help="probe strong/weak M-regularity")
    p_reg.add_argument("array", help="preset name or position file")
    p_reg.add_argument("--M", type=int, required=True)
    p_reg.add_argument("--mode", choices=["strong", "weak"], default="strong")
    p_reg.add_argument("--tuples", type=int, default=10_000)
    p_reg.add_argument("--seed", type=int, default=0)
    p_reg.set_defaults(func=_cmd_check_regularity)

    p_crlb = sub.add_parser("crlb", help="print CRLB table for a configured scenario")
    p_crlb.add_argument("config")
    p_crlb.set_defaults(func=_cmd_crlb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - map to documented exit codes
        from .harness import ConfigError

        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, ConfigError) else 2


if __name__ == "__main__":
    sys.exit(main())

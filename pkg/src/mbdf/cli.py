"""Command-line front end for sweeps, transfer curves and complexity tables.

Subcommands: ``ber`` (Monte Carlo sweep), ``exit`` (detector mutual-information
transfer curve), ``complexity`` (closed-form operation counts), and
``order-compare`` (optimal vs suboptimal ordering gap).  Every flag can also
come from a plain ``key = value`` config file via ``--config``; explicit
command-line flags win.  Exit status is 0 on success and 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict

from .detectors import DetectorConfig
from .harness import (
    SimConfig,
    complexity_table,
    exit_chart,
    order_compare,
    run_ber_sweep,
    write_csv,
    write_dat,
    write_json,
)


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from exc


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def load_config_tokens(path: str) -> list[str]:
    """Read ``key = value`` lines into CLI tokens (later flags override)."""
    tokens: list[str] = []
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line is not key=value: {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "yes", "1") and key in ("coded", "quiet", "full-scale", "full_scale"):
                tokens.append(flag)
            elif value.lower() in ("false", "no", "0") and key in ("coded", "quiet", "full-scale", "full_scale"):
                continue
            else:
                tokens.extend([flag, value])
    return tokens


def _add_sim_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-t", type=_positive_int, default=4, help="transmit streams")
    parser.add_argument("--n-r", type=_positive_int, default=4, help="receive antennas")
    parser.add_argument("--constellation", default="qpsk", help="qpsk or 16qam")
    parser.add_argument("--snr", type=_float_list, default=(0.0, 4.0, 8.0, 12.0),
                        help="comma/space separated SNR grid in dB")
    parser.add_argument("--detector", default="mbdf",
                        choices=("ml", "linear", "sic", "df", "mbdf"))
    parser.add_argument("--branches", type=_positive_int, default=4, help="parallel branches L")
    parser.add_argument("--beta", type=float, default=1.0, help="feedback scale in [0,1]")
    parser.add_argument("--ordering", default="fixed",
                        choices=("fixed", "optimal", "suboptimal"))
    parser.add_argument("--metric", default="full", choices=("reduced", "full"))
    parser.add_argument("--selection", default="joint", choices=("per_stream", "joint"))
    parser.add_argument("--stages", type=_positive_int, default=1, help="refinement stages")
    parser.add_argument("--channel-mode", default="block", choices=("block", "jakes"))
    parser.add_argument("--doppler", type=float, default=0.0, help="normalized Doppler f_D*T")
    parser.add_argument("--packet-len", type=_positive_int, default=500)
    parser.add_argument("--training-len", type=int, default=0)
    parser.add_argument("--coded", action="store_true", help="rate-1/2 coded pipeline")
    parser.add_argument("--iterations", type=_positive_int, default=5)
    parser.add_argument("--csi", default="perfect", choices=("perfect", "adaptive"))
    parser.add_argument("--seed", type=int, default=12345)
    parser.add_argument("--min-errors", type=_positive_int, default=200)
    parser.add_argument("--max-bits", type=_positive_int, default=2_000_000)
    parser.add_argument("--workers", type=_positive_int, default=1)


def _sim_config(args: argparse.Namespace) -> SimConfig:
    detector = DetectorConfig(
        kind=args.detector,
        branches=args.branches if args.detector == "mbdf" else 1,
        stages=args.stages,
        ordering=args.ordering,
        beta=args.beta,
        metric=args.metric,
        selection=args.selection,
    )
    return SimConfig(
        n_t=args.n_t,
        n_r=args.n_r,
        constellation=args.constellation,
        snr_grid=args.snr,
        detector=detector,
        channel_mode=args.channel_mode,
        doppler=args.doppler,
        packet_len=args.packet_len,
        training_len=args.training_len,
        coded=args.coded,
        iterations=args.iterations,
        csi=args.csi,
        seed=args.seed,
        min_errors=args.min_errors,
        max_bits=args.max_bits,
        workers=args.workers,
    )


def _print_report(report, quiet: bool) -> None:
    if quiet:
        return
    cfg = report.config
    print(
        f"# {cfg.detector.kind} L={cfg.detector.branches} beta={cfg.detector.beta} "
        f"{cfg.n_t}x{cfg.n_r} {cfg.constellation} seed={cfg.seed} "
        f"hash={report.config_hash[:12]}"
    )
    print(f"{'snr_db':>8} {'bits':>10} {'errors':>8} {'ber':>12} {'ci_low':>12} {'ci_high':>12}")
    for p in report.points:
        print(
            f"{p.snr_db:>8.2f} {p.bits:>10d} {p.bit_errors:>8d} "
            f"{p.ber:>12.4e} {p.ci_low:>12.4e} {p.ci_high:>12.4e}"
        )


def _cmd_ber(args: argparse.Namespace) -> int:
    report = run_ber_sweep(_sim_config(args))
    _print_report(report, args.quiet)
    if args.csv:
        write_csv(report, args.csv)
    if args.json:
        write_json(report, args.json)
    if args.dat:
        write_dat(report, args.dat)
    return 0


def _cmd_exit(args: argparse.Namespace) -> int:
    n_t, n_r = (10, 10) if args.full_scale else (args.n_t, args.n_r)
    grid = args.i_a if args.i_a else tuple(
        i / (args.steps - 1) * 0.999 for i in range(args.steps)
    )
    rows = exit_chart(
        n_t,
        n_r,
        args.snr_db,
        grid,
        branches=args.branches,
        beta=args.beta,
        constellation=args.constellation,
        packets=args.packets,
        packet_len=args.packet_len,
        seed=args.seed,
        metric=args.metric,
        selection=args.selection,
    )
    lines = ["# i_a i_e"] + [f"{ia:.6f} {ie:.6f}" for ia, ie in rows]
    text = "\n".join(lines)
    if not args.quiet:
        print(text)
    if args.dat:
        with open(args.dat, "w") as fh:
            fh.write(text + "\n")
    return 0


def _cmd_complexity(args: argparse.Namespace) -> int:
    table = complexity_table(
        args.n_t, args.n_r, args.branches, m=args.m, sd_radius=args.sd_radius
    )
    if not args.quiet:
        print(f"# per received vector, N_T={args.n_t} N_R={args.n_r} L={args.branches}")
        print(f"{'algorithm':<26} {'mults':>16} {'adds':>16}")
        for name, row in table.items():
            fmt = lambda x: f"{x:.1f}" if isinstance(x, float) else str(x)
            print(f"{name:<26} {fmt(row['mults']):>16} {fmt(row['adds']):>16}")
    if args.json:
        import json as _json

        with open(args.json, "w") as fh:
            _json.dump(
                {k: {kk: str(vv) for kk, vv in v.items()} for k, v in table.items()},
                fh,
                indent=2,
            )
    return 0


def _cmd_order_compare(args: argparse.Namespace) -> int:
    cfg = _sim_config(args)
    outcome = order_compare(cfg, target_ber=args.target_ber)
    if not args.quiet:
        for mode in ("optimal", "suboptimal"):
            print(f"## ordering={mode}")
            _print_report(outcome[mode], False)
        snr_o, snr_s = outcome["snr_optimal"], outcome["snr_suboptimal"]
        print(f"# snr at ber={args.target_ber:g}: "
              f"optimal={'-' if snr_o is None else f'{snr_o:.3f}'} dB, "
              f"suboptimal={'-' if snr_s is None else f'{snr_s:.3f}'} dB")
        gap = outcome["gap_db"]
        print(f"# horizontal gap: {'not bracketed by the grid' if gap is None else f'{gap:.3f} dB'}")
    if args.json:
        import json as _json

        doc = {
            "target_ber": outcome["target_ber"],
            "snr_optimal": outcome["snr_optimal"],
            "snr_suboptimal": outcome["snr_suboptimal"],
            "gap_db": outcome["gap_db"],
            "optimal": [asdict(p) for p in outcome["optimal"].points],
            "suboptimal": [asdict(p) for p in outcome["suboptimal"].points],
        }
        with open(args.json, "w") as fh:
            _json.dump(doc, fh, indent=2)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mbdf", description="Multi-branch decision-feedback MIMO detection toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file supplying defaults")
    common.add_argument("--quiet", action="store_true", help="suppress stdout tables")

    ber = sub.add_parser("ber", parents=[common], help="Monte Carlo BER sweep")
    _add_sim_flags(ber)
    ber.add_argument("--csv", help="write per-point CSV here")
    ber.add_argument("--json", help="write the full report as JSON here")
    ber.add_argument("--dat", help="write gnuplot-style columns here")
    ber.set_defaults(func=_cmd_ber)

    exit_p = sub.add_parser("exit", parents=[common], help="detector EXIT curve")
    exit_p.add_argument("--n-t", type=_positive_int, default=4)
    exit_p.add_argument("--n-r", type=_positive_int, default=4)
    exit_p.add_argument("--snr-db", type=float, default=8.0)
    exit_p.add_argument("--i-a", type=_float_list, default=(),
                        help="explicit prior-MI grid (overrides --steps)")
    exit_p.add_argument("--steps", type=_positive_int, default=9)
    exit_p.add_argument("--branches", type=_positive_int, default=4)
    exit_p.add_argument("--beta", type=float, default=1.0)
    exit_p.add_argument("--constellation", default="qpsk")
    exit_p.add_argument("--packets", type=_positive_int, default=20)
    exit_p.add_argument("--packet-len", type=_positive_int, default=200)
    exit_p.add_argument("--seed", type=int, default=2024)
    exit_p.add_argument("--metric", default="full", choices=("reduced", "full"))
    exit_p.add_argument("--selection", default="joint",
                        choices=("per_stream", "joint"))
    exit_p.add_argument("--full-scale", action="store_true",
                        help="run the 10x10 system (slow)")
    exit_p.add_argument("--dat", help="write the curve here")
    exit_p.set_defaults(func=_cmd_exit)

    comp = sub.add_parser("complexity", parents=[common], help="closed-form op counts")
    comp.add_argument("--n-t", type=_positive_int, default=4)
    comp.add_argument("--n-r", type=_positive_int, default=4)
    comp.add_argument("--branches", type=_positive_int, default=4)
    comp.add_argument("--m", type=_positive_int, default=4,
                      help="constellation size for the sphere-search bound")
    comp.add_argument("--sd-radius", type=float, default=1.0)
    comp.add_argument("--json", help="write the table as JSON here")
    comp.set_defaults(func=_cmd_complexity)

    oc = sub.add_parser("order-compare", parents=[common],
                        help="optimal vs suboptimal ordering gap")
    _add_sim_flags(oc)
    oc.add_argument("--target-ber", type=float, default=1e-2)
    oc.add_argument("--json", help="write the comparison as JSON here")
    oc.set_defaults(func=_cmd_order_compare)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            tokens = load_config_tokens(known.config)
        except (OSError, ValueError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return 2
        if argv and not argv[0].startswith("-"):
            argv = [argv[0]] + tokens + argv[1:]
        else:
            argv = tokens + argv
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

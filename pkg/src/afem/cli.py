"""Command line entry point: ``afem run|rates|mesh-dump``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2


def _thread_limit():
    from .bench import thread_cap

    cap = thread_cap()
    if cap is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=cap)


def cmd_run(args) -> int:
    from .bench import run_benchmark

    report = run_benchmark(args.config, output_dir=args.output_dir)
    final = report.history[-1]
    print(f"levels: {len(report.history)}  dofs: {final.n_dof}  estimator: {final.estimator:.6e}")
    for j, lam, err in zip(final.indices, final.lam, final.errors):
        tail = "" if err is None else f"  err {err:.3e}"
        print(f"lambda_{j} = {lam.real:.12g} {lam.imag:+.3e}i{tail}")
    for name, slope in sorted(report.slopes.items()):
        print(f"slope[{name}] = {slope:.4f}")
    print(f"wrote {report.output_dir}")
    return EXIT_OK


def cmd_rates(args) -> int:
    from .adaptive import fit_rate
    from .bench import compute_slopes, read_history

    try:
        history = read_history(args.csv)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.quantity:
        print(f"{args.quantity}: {fit_rate(history, args.quantity, args.window):.6f}")
        return EXIT_OK
    slopes = compute_slopes(history, args.window)
    if not slopes:
        print(f"error: need at least {max(args.window, 3)} levels to fit a rate", file=sys.stderr)
        return EXIT_NUMERICAL
    for name, slope in sorted(slopes.items()):
        print(f"{name}: {slope:.6f}")
    return EXIT_OK


def cmd_mesh_dump(args) -> int:
    from .adaptive import run_afem
    from .bench import load_config
    from .mesh import write_vtk

    settings = load_config(args.config)
    cfg = dataclasses.replace(settings.afem, max_levels=args.level + 1, with_osc=False)
    dumped = []

    def grab(level, mesh, *_):
        if level == args.level:
            dumped.append(mesh)

    history = run_afem(cfg, on_level=grab)
    if not dumped:
        print(f"error: the run stopped after {len(history)} levels, before level {args.level}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    out = Path(args.output or f"mesh_level{args.level:03d}.vtk")
    write_vtk(dumped[0], out)
    print(f"wrote {out} ({dumped[0].n_triangles} triangles)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afem", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a benchmark configuration")
    run.add_argument("config")
    run.add_argument("--output-dir", default=None, help="override the configured output directory")
    run.set_defaults(func=cmd_run)

    rates = sub.add_parser("rates", help="fit convergence rates from a history.csv")
    rates.add_argument("csv")
    rates.add_argument("--window", type=int, default=5)
    rates.add_argument("--quantity", default=None,
                       help="estimator, eta2, eta2_star, err_mean or err<j> (default: all)")
    rates.set_defaults(func=cmd_rates)

    dump = sub.add_parser("mesh-dump", help="write the mesh of one adaptive level as VTK")
    dump.add_argument("config")
    dump.add_argument("--level", type=int, required=True)
    dump.add_argument("-o", "--output", default=None)
    dump.set_defaults(func=cmd_mesh_dump)
    return parser


def main(argv=None) -> int:
    from .adaptive import AfemError
    from .assembly import AssemblyError, SolverError
    from .bench import ConfigError
    from .eigen import EigenError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AfemError, EigenError, SolverError, AssemblyError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

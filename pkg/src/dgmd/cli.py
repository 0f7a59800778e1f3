"""Command-line driver: run, convergence and check subcommands.

``run`` integrates the configured system and writes the diagnostics CSV, an
extended-XYZ trajectory and an energy figure, all sharing one output prefix.
``convergence`` sweeps a tau ladder per integrator and writes the error
table plus a log-log figure.  ``check`` executes the invariant suite and
exits nonzero if any check fails.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .config import VARIANTS, build_engine, build_system, load_config
from .convergence import convergence_study, ladder_from_config
from .core import ConfigurationError, ParseError, StepFailure
from .dataio import write_diagnostics_csv, write_xyz_frame
from .integrators import INTEGRATORS, run_simulation
from .reports import convergence_figure, energy_figure, write_error_table
from .verify import run_checks


def _add_common(parser):
    parser.add_argument("config", help="experiment TOML file")
    parser.add_argument("--integrator", choices=INTEGRATORS, default=None)
    parser.add_argument("--dg-variant", choices=VARIANTS, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--tmax", type=float, default=None)
    parser.add_argument("--ranks", type=int, default=None)
    parser.add_argument("--out-prefix", default=None,
                        help="output path prefix (default: experiment name)")


def _parser():
    parser = argparse.ArgumentParser(
        prog="dgmd",
        description="energy-conserving molecular dynamics driver")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="integrate and write CSV/XYZ/figure")
    _add_common(run)
    run.add_argument("--no-xyz", action="store_true",
                     help="skip the trajectory file")
    conv = sub.add_parser("convergence",
                          help="tau-refinement error table and figure")
    _add_common(conv)
    conv.add_argument("--rungs", type=int, default=None,
                      help="ladder length when the config gives no grid")
    check = sub.add_parser("check", help="invariant suite on the system")
    _add_common(check)
    check.add_argument("--steps", type=int, default=50)
    return parser


def _load(args):
    config = load_config(args.config)
    if args.integrator:
        config.integrator = args.integrator
    if args.dg_variant:
        config.dg_variant = args.dg_variant
    if args.tau is not None:
        if args.tau <= 0:
            raise ConfigurationError("--tau must be positive")
        config.tau = args.tau
    if args.tmax is not None:
        if args.tmax <= 0:
            raise ConfigurationError("--tmax must be positive")
        config.t_max = args.tmax
    if args.ranks is not None:
        if args.ranks < 1:
            raise ConfigurationError("--ranks must be at least 1")
        config.ranks = args.ranks
    prefix = args.out_prefix or config.name
    return config, prefix


def _cmd_run(args):
    config, prefix = _load(args)
    system, topology = build_system(config)
    engine = build_engine(config, system, topology)
    parent = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(parent, exist_ok=True)

    xyz_path = prefix + ".xyz"
    xyz_every = config.xyz_every or config.record_every
    labels = config.species.names
    on_frame = None
    if not args.no_xyz:
        if os.path.exists(xyz_path):
            os.remove(xyz_path)
        snap = system.copy()

        def on_frame(rec, q, p):
            if rec.step % xyz_every == 0 or rec.step == config.n_steps:
                snap.q[:] = q
                snap.p[:] = p
                write_xyz_frame(xyz_path, rec.step, rec.time, snap,
                                labels=labels, box=config.box)

    result = run_simulation(engine, config.tau, config.n_steps,
                            integrator=config.integrator,
                            variant=config.dg_variant,
                            settings=config.solver,
                            record_every=config.record_every,
                            on_frame=on_frame)
    csv_path = prefix + ".csv"
    write_diagnostics_csv(csv_path, result.records)
    fig_path = energy_figure(result.records, prefix + "_energy.png",
                             title=config.name)

    e = result.energies
    drift = float(np.abs(e - e[0]).max() / max(abs(e[0]), 1e-300))
    print(f"{config.name}: {config.n_steps} steps of {config.integrator}"
          f"{'/' + config.dg_variant if config.integrator == 'dg' else ''}"
          f" at tau={config.tau:g}")
    print(f"  H(0) = {float(e[0])!r}, max relative drift {drift:.3e}")
    print(f"  wrote {csv_path}, {fig_path}"
          + ("" if args.no_xyz else f", {xyz_path}"))
    return 0


def _cmd_convergence(args):
    config, prefix = _load(args)
    system, topology = build_system(config)

    def make_engine():
        return build_engine(config, system.copy(), topology)

    section = config.convergence or {}
    taus = section.get("taus") or ladder_from_config(
        config.tau, rungs=args.rungs or int(section.get("rungs", 4)))
    if args.tau is not None:
        taus = ladder_from_config(config.tau, rungs=args.rungs or 4)
    t_max = (config.t_max if args.tmax is not None
             else float(section.get("t_max", config.t_max)))
    solver = config.solver
    if "newton_tol" in section:
        solver = replace(solver, newton_tol=float(section["newton_tol"]))
    protocol = section.get("protocol", "fine_reference")
    ref_tau = section.get("ref_tau")
    integrators = section.get("integrators", [config.integrator])
    if args.integrator:
        integrators = [args.integrator]

    results = {}
    for integrator in integrators:
        label = (f"dg/{config.dg_variant}" if integrator == "dg"
                 else integrator)
        results[label] = convergence_study(
            make_engine, taus, t_max, integrator=integrator,
            variant=config.dg_variant, settings=solver,
            protocol=protocol,
            ref_tau=None if ref_tau is None else float(ref_tau),
            ref_variant=section.get("ref_variant"),
            ref_integrator=section.get("ref_integrator"))

    table = write_error_table(prefix + "_convergence.csv", results)
    figure = convergence_figure(results, prefix + "_convergence.png",
                                title=config.name)
    for label, res in results.items():
        print(f"{config.name} {label}: slope {res.slope:.3f} over "
              f"{len(res.taus)} rungs ({res.protocol})")
        for tau, err in res.rows():
            print(f"  tau={tau:<12g} error={err:.6e}")
    print(f"  wrote {table}, {figure}")
    return 0


def _cmd_check(args):
    config, _ = _load(args)
    checks = run_checks(config, ranks=args.ranks, steps=args.steps)
    for check in checks:
        print(check.line())
    return 0 if all(c.passed for c in checks) else 1


def main(argv=None):
    args = _parser().parse_args(argv)
    handlers = {"run": _cmd_run, "convergence": _cmd_convergence,
                "check": _cmd_check}
    try:
        return handlers[args.command](args)
    except (ConfigurationError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StepFailure as exc:
        print(f"error: integration failed at {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``massdae powerflow | run | bench``.

Exit codes: 0 success, 1 invalid input, 2 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import ReferenceConfig, bench_work_precision, format_records_csv
from .case import CaseError, bundled_case_path, load_case
from .dae import ModelError, NotRepresentableError, to_traditional
from .io import format_trajectory_csv
from .network import IslandError, SwitchingError
from .powerflow import NonConvergence, SingularJacobian, init_dynamics, nr_powerflow
from .solvers import (IntegrationError, NewtonConfig, NewtonError, StepController, StepperKind,
                      integrate)

log = logging.getLogger("massdae")

EXIT_INPUT = 1
EXIT_SOLVER = 2


class InputError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _gamma(text: str):
    if text == "h":
        return "h"
    try:
        g = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("gamma must be 'h' or a number") from None
    if g == 0:
        raise argparse.ArgumentTypeError("gamma must be nonzero")
    return g


class _Parser(argparse.ArgumentParser):
    # bad flags are input errors, not solver failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="massdae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def case_arg(p):
        p.add_argument("--case", default=None,
                       help="case JSON file (default: bundled kundur_two_area)")

    pf = sub.add_parser("powerflow", help="solve the power flow and print the bus table")
    case_arg(pf)
    pf.add_argument("--tol", type=float, default=1e-8)
    pf.add_argument("--max-iter", type=int, default=20)

    run = sub.add_parser("run", help="integrate the case and write the trajectory CSV")
    case_arg(run)
    run.add_argument("--solver", default=None, help="ie | trap | bdf2")
    run.add_argument("--formulation", choices=("mass", "traditional"), default="mass")
    run.add_argument("--h", type=float, default=None, help="fixed step size")
    run.add_argument("--rtol", type=float, default=None, help="adaptive relative tolerance")
    run.add_argument("--atol", type=float, default=None, help="adaptive absolute tolerance")
    run.add_argument("--gamma", type=_gamma, default="h")
    run.add_argument("--newton-tol", type=float, default=1e-8)
    run.add_argument("--tf", type=float, default=None)
    run.add_argument("--output", default=None, help="CSV path (default: stdout)")
    run.add_argument("--seed", type=int, default=None, help="reserved")

    b = sub.add_parser("bench", help="work-precision benchmark")
    case_arg(b)
    b.add_argument("--solvers", default="ie,trap,bdf2")
    b.add_argument("--h-grid", type=_floats, default=[4e-3, 2e-3, 1e-3, 5e-4])
    b.add_argument("--runs", type=int, default=5)
    b.add_argument("--tf", type=float, default=None)
    b.add_argument("--refine", type=int, default=64, help="reference step = min h / refine")
    b.add_argument("--output", default=None, help="CSV path (default: stdout)")
    b.add_argument("--seed", type=int, default=None, help="reserved")
    b.add_argument("--parallel-bench", action="store_true")
    return ap


def _case(args):
    path = Path(args.case) if args.case else bundled_case_path("kundur_two_area")
    if not path.exists():
        raise InputError(f"case file not found: {path}")
    return load_case(path)


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_powerflow(args) -> int:
    case = _case(args)
    sol = nr_powerflow(case, tol=args.tol, max_iter=args.max_iter)
    print(sol.table())
    return 0


def cmd_run(args) -> int:
    case = _case(args)
    sim = case.simulation
    kind = StepperKind.parse(args.solver or sim.get("solver", "trap"))
    tf = args.tf if args.tf is not None else case.tf
    if (args.rtol is None) != (args.atol is None):
        raise InputError("--rtol and --atol must be given together")
    if args.rtol is not None and args.h is not None:
        raise InputError("--h conflicts with --rtol/--atol")
    if args.rtol is not None:
        ctrl = StepController.adaptive(args.rtol, args.atol)
    else:
        ctrl = StepController.fixed(args.h if args.h is not None else sim.get("h", 1e-3))
    p = init_dynamics(case).problem
    events = [e for e in p.events if e.time <= tf]
    if len(events) < len(p.events):
        log.info("%d events after tf=%g are not reached", len(p.events) - len(events), tf)
    if args.formulation == "traditional":
        p = to_traditional(p)
    newton = NewtonConfig(tol=args.newton_tol, gamma=args.gamma)
    traj = integrate(p, (p.t0, tf), kind, ctrl, newton, events)
    _emit(format_trajectory_csv(traj), args.output)
    log.info("%d steps accepted, %d rejected, %d Newton iterations", traj.stats["accepted"],
             traj.stats["rejected"], traj.stats["newton_iters"])
    return 0


def cmd_bench(args) -> int:
    case = _case(args)
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    for s in solvers:
        StepperKind.parse(s)
    if not args.h_grid or any(h <= 0 for h in args.h_grid):
        raise InputError("--h-grid needs positive step sizes")
    if args.runs < 1:
        raise InputError("--runs must be at least 1")
    recs = bench_work_precision(case, solvers, args.h_grid, ReferenceConfig(refine=args.refine),
                                runs=args.runs, tf=args.tf, parallel=args.parallel_bench)
    _emit(format_records_csv(recs), args.output)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handlers = {"powerflow": cmd_powerflow, "run": cmd_run, "bench": cmd_bench}
    try:
        return handlers[args.command](args)
    except (NonConvergence, SingularJacobian, IntegrationError, NewtonError,
            FloatingPointError) as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InputError, CaseError, NotRepresentableError, ModelError, IslandError,
            SwitchingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

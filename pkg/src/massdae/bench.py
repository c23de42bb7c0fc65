"""Work-precision benchmarking.

Every (solver, control) pair is integrated several times over the case's
span.  The harness records the mean wall time of the integration call and the
final-step error against one shared reference solution.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .case import SystemCase
from .dae import DaeProblem
from .powerflow import init_dynamics
from .solvers import (IntegrationError, NewtonConfig, NewtonError, StepController, StepperKind,
                      integrate)

log = logging.getLogger(__name__)

# a control is either a fixed step h or an adaptive (rtol, atol) pair
Control = Union[float, tuple[float, float]]

CSV_COLUMNS = ("solver", "control", "error", "mean_time_s", "steps_accepted", "steps_rejected",
               "newton_iters", "error_2norm", "runs", "note")


@dataclass(frozen=True)
class ReferenceConfig:
    kind: StepperKind = StepperKind.TRAP
    refine: int = 64
    newton_tol: float = 1e-12
    h: float | None = None  # explicit reference step; default is min grid h / refine


@dataclass(frozen=True)
class WorkPrecisionRecord:
    solver: str
    control: str
    error: float
    mean_time_s: float
    steps_accepted: int
    steps_rejected: int
    newton_iters: int
    error_2norm: float = math.nan
    runs: int = 5
    note: str = ""

    def __post_init__(self):
        if not (math.isnan(self.error) or self.error >= 0):
            raise ValueError("error must be non-negative or NaN")

    @property
    def failed(self) -> bool:
        return math.isnan(self.error)


def control_label(c: Control) -> str:
    if isinstance(c, tuple):
        return f"rtol={c[0]!r};atol={c[1]!r}"
    return f"h={float(c)!r}"


def _controller(c: Control) -> StepController:
    if isinstance(c, tuple):
        return StepController.adaptive(c[0], c[1])
    return StepController.fixed(float(c))


def _sort_key(c: Control) -> tuple:
    # coarse controls first
    return (0, -c[0], -c[1]) if isinstance(c, tuple) else (1, -float(c))


def reference_solution(p: DaeProblem, tf: float, grid: Sequence[Control],
                       cfg: ReferenceConfig = ReferenceConfig()) -> np.ndarray:
    """Final state of the reference run."""
    if cfg.h is not None:
        h = cfg.h
    else:
        hs = [float(c) for c in grid if not isinstance(c, tuple)]
        if not hs:
            raise ValueError("reference step must be given when the grid has no fixed steps")
        h = min(hs) / cfg.refine
    tr = integrate(p, (p.t0, tf), cfg.kind, StepController.fixed(h),
                   NewtonConfig(tol=cfg.newton_tol, max_iter=25), record="final")
    return tr.final


def _trial(p: DaeProblem, tf: float, solver: str, control: Control, ref: np.ndarray, runs: int,
           newton: NewtonConfig) -> WorkPrecisionRecord:
    kind = StepperKind.parse(solver)
    ctrl = _controller(control)
    times = []
    tr = None
    try:
        for _ in range(runs):
            t0 = time.perf_counter()
            tr = integrate(p, (p.t0, tf), kind, ctrl, newton, record="final")
            times.append(time.perf_counter() - t0)
    except (IntegrationError, NewtonError, FloatingPointError) as exc:
        log.warning("%s %s failed: %s", solver, control_label(control), exc)
        return WorkPrecisionRecord(kind.value, control_label(control), math.nan, math.nan, 0, 0, 0,
                                   math.nan, runs, f"failed: {exc}".replace("\n", " "))
    d = tr.final - ref
    return WorkPrecisionRecord(
        solver=kind.value, control=control_label(control),
        error=float(np.max(np.abs(d))), mean_time_s=float(np.mean(times)),
        steps_accepted=tr.stats["accepted"], steps_rejected=tr.stats["rejected"],
        newton_iters=tr.stats["newton_iters"], error_2norm=float(np.linalg.norm(d)), runs=runs,
    )


def _trial_from_case(case, tf, solver, control, ref, runs, newton):
    p = init_dynamics(case).problem
    return _trial(p, tf, solver, control, ref, runs, newton)


def bench_work_precision(case: SystemCase, solvers: Sequence[str], grid: Sequence[Control],
                         reference: ReferenceConfig = ReferenceConfig(), *, runs: int = 5,
                         tf: float | None = None, newton: NewtonConfig = NewtonConfig(),
                         parallel: bool = False) -> list[WorkPrecisionRecord]:
    """Run the solver x control grid; returns records sorted by solver then coarse-to-fine."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if not solvers or not grid:
        raise ValueError("need at least one solver and one control value")
    tf = case.tf if tf is None else float(tf)
    # events past a shortened horizon are never reached
    case = case.replace(events=tuple(e for e in case.events if e.time <= tf))
    p = init_dynamics(case).problem
    ref = reference_solution(p, tf, grid, reference)
    pairs = [(StepperKind.parse(s).value, c) for s in solvers for c in grid]
    if parallel:
        with ProcessPoolExecutor(max_workers=min(len(pairs), os.cpu_count() or 1)) as ex:
            futs = [ex.submit(_trial_from_case, case, tf, s, c, ref, runs, newton) for s, c in pairs]
            records = [f.result() for f in futs]
    else:
        records = [_trial(p, tf, s, c, ref, runs, newton) for s, c in pairs]
    order = {k.value: i for i, k in enumerate(StepperKind)}
    keyed = sorted(zip(pairs, records), key=lambda pr: (order[pr[0][0]], _sort_key(pr[0][1])))
    return [r for _, r in keyed]


def format_records_csv(records: Sequence[WorkPrecisionRecord], *, timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = CSV_COLUMNS if timing else tuple(c for c in CSV_COLUMNS if c != "mean_time_s")
    w.writerow(cols)
    for r in records:
        row = {
            "solver": r.solver, "control": r.control, "error": repr(r.error),
            "mean_time_s": repr(r.mean_time_s), "steps_accepted": r.steps_accepted,
            "steps_rejected": r.steps_rejected, "newton_iters": r.newton_iters,
            "error_2norm": repr(r.error_2norm), "runs": r.runs, "note": r.note,
        }
        w.writerow([row[c] for c in cols])
    return buf.getvalue()


def write_records_csv(records: Sequence[WorkPrecisionRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(format_records_csv(records))
    return path

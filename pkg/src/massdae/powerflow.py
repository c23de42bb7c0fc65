"""Newton-Raphson AC power flow and back-initialization of the dynamic models."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve
import warnings

from .blocks import Const
from .case import SystemCase
from .dae import ConsistencyReport, DaeProblem, ModelError, assemble_problem, check_consistency
from .machines import (Genrou, exciter_contribution, genrou_initialize,
                       governor_contribution)
from .network import PQ, PV, SLACK, Network, build_ybus

log = logging.getLogger(__name__)


class NonConvergence(RuntimeError):
    def __init__(self, msg: str, bus: str | None = None, mismatch: float = float("nan")):
        super().__init__(msg)
        self.bus = bus
        self.mismatch = mismatch


class SingularJacobian(RuntimeError):
    pass


@dataclass
class PowerFlowSolution:
    bus_ids: tuple[str, ...]
    V: np.ndarray
    theta: np.ndarray
    gen_p: dict[str, float]
    gen_q: dict[str, float]
    iterations: int
    mismatch: float
    history: list[float] = field(default_factory=list)

    @property
    def phasors(self) -> np.ndarray:
        return self.V * np.exp(1j * self.theta)

    def table(self) -> str:
        lines = [f"{'bus':>8} {'V [pu]':>12} {'theta [rad]':>14}"]
        for b, v, a in zip(self.bus_ids, self.V, self.theta):
            lines.append(f"{b:>8} {v:12.6f} {a:14.6f}")
        lines.append("")
        lines.append(f"{'gen':>8} {'P [pu]':>12} {'Q [pu]':>14}")
        for g in self.gen_p:
            lines.append(f"{g:>8} {self.gen_p[g]:12.6f} {self.gen_q[g]:14.6f}")
        lines.append(f"converged in {self.iterations} iterations, mismatch {self.mismatch:.3e}")
        return "\n".join(lines)


def _dS_dV(Y, V):
    Ibus = Y @ V
    Vnorm = V / np.abs(V)
    dV = sp.diags(V)
    dI = sp.diags(Ibus)
    dVn = sp.diags(Vnorm)
    dS_dVm = dV @ (Y @ dVn).conj() + dI.conj() @ dVn
    dS_dVa = 1j * dV @ (dI - Y @ dV).conj()
    return dS_dVm, dS_dVa


def nr_powerflow(case: SystemCase, tol: float = 1e-8, max_iter: int = 20) -> PowerFlowSolution:
    """Polar Newton-Raphson on P/Q mismatches; PV buses hold |V|, PQ buses hold P and Q."""
    buses = case.buses
    idx = {b.id: i for i, b in enumerate(buses)}
    nb = len(buses)
    Y = build_ybus(buses, case.lines)

    sched = np.zeros(nb, dtype=complex)
    for ld in case.loads:
        sched[idx[ld.bus]] -= complex(ld.p, ld.q)
    for g in case.generators:
        sched[idx[g.bus]] += g.p

    types = [b.type for b in buses]
    pv = [i for i, t in enumerate(types) if t == PV]
    pq = [i for i, t in enumerate(types) if t == PQ]
    slack = [i for i, t in enumerate(types) if t == SLACK]
    pvpq = np.array(pv + pq, dtype=int)
    pq = np.array(pq, dtype=int)

    Vm = np.array([b.v0 for b in buses], dtype=float)
    Va = np.array([b.theta0 for b in buses], dtype=float)
    V = Vm * np.exp(1j * Va)

    def mismatch(V):
        S = V * np.conj(Y @ V) - sched
        return np.concatenate([S.real[pvpq], S.imag[pq]])

    F = mismatch(V)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    history = [norm]
    it = 0
    npv = len(pvpq)
    while norm > tol:
        if it >= max_iter:
            k = int(np.argmax(np.abs(F)))
            b = pvpq[k] if k < npv else pq[k - npv]
            raise NonConvergence(f"power flow did not converge in {max_iter} iterations; "
                                 f"worst mismatch {norm:.3e} at bus {buses[b].id}",
                                 buses[b].id, norm)
        dVm, dVa = _dS_dV(Y, V)
        J = sp.vstack([
            sp.hstack([dVa[pvpq][:, pvpq].real, dVm[pvpq][:, pq].real]),
            sp.hstack([dVa[pq][:, pvpq].imag, dVm[pq][:, pq].imag]),
        ]).tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                dx = spsolve(J, -F)
            except (MatrixRankWarning, RuntimeError) as exc:
                raise SingularJacobian(f"power flow Jacobian is singular: {exc}") from None
        dx = np.atleast_1d(dx)
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("power flow Jacobian is singular")
        Va[pvpq] += dx[:npv]
        Vm[pq] += dx[npv:]
        V = Vm * np.exp(1j * Va)
        it += 1
        F = mismatch(V)
        norm = float(np.max(np.abs(F))) if F.size else 0.0
        history.append(norm)
        log.debug("power flow iteration %d: mismatch %.3e", it, norm)

    Sbus = V * np.conj(Y @ V)
    load = np.zeros(nb, dtype=complex)
    for ld in case.loads:
        load[idx[ld.bus]] += complex(ld.p, ld.q)
    gen_s = Sbus + load
    gen_p, gen_q = {}, {}
    at_bus: dict[int, list] = {}
    for g in case.generators:
        at_bus.setdefault(idx[g.bus], []).append(g)
    for k, gs in at_bus.items():
        if types[k] == PQ:
            for g in gs:
                gen_p[g.id] = g.p
                gen_q[g.id] = 0.0
            continue
        # reactive output shared equally; slack active power shared equally
        for g in gs:
            gen_p[g.id] = gen_s[k].real / len(gs) if types[k] == SLACK else g.p
            gen_q[g.id] = gen_s[k].imag / len(gs)
    if slack and not any(idx[g.bus] == slack[0] for g in case.generators):
        log.info("slack bus %s has no generator", buses[slack[0]].id)
    return PowerFlowSolution(
        bus_ids=tuple(b.id for b in buses), V=np.abs(V), theta=np.angle(V),
        gen_p=gen_p, gen_q=gen_q, iterations=it, mismatch=norm, history=history,
    )


@dataclass
class DynamicInit:
    problem: DaeProblem
    report: ConsistencyReport
    network: Network

    @property
    def x0(self) -> np.ndarray:
        return self.problem.x0

    @property
    def y0(self) -> np.ndarray:
        return self.problem.y0

    @property
    def u0(self) -> np.ndarray:
        return self.problem.u0.copy()


def init_dynamics(case: SystemCase, pf: PowerFlowSolution | None = None, *,
                  load_model: str = "impedance", tol: float = 1e-6) -> DynamicInit:
    """Back-initialize every dynamic element from a power flow and assemble the DAE.

    Loads become constant admittances at the power-flow voltages unless
    ``load_model="power"``.
    """
    if pf is None:
        pf = nr_powerflow(case)
    V = pf.phasors
    idx = {b: i for i, b in enumerate(pf.bus_ids)}
    if load_model == "impedance":
        net = Network(case.buses, case.lines, shunt_loads=case.loads, v_init=V)
    elif load_model == "power":
        net = Network(case.buses, case.lines, pq_loads=case.loads, v_init=V)
    else:
        raise ValueError(f"unknown load model {load_model!r}")

    excs = {e.gen: e for e in case.exciters}
    govs = {g.gen: g for g in case.governors}
    models = []
    controllers = []
    for g in case.generators:
        k = idx[g.bus]
        S = complex(pf.gen_p[g.id], pf.gen_q[g.id])
        try:
            state, vf0, tm0 = genrou_initialize(g.params, V[k], S, case.base_mva)
        except ModelError as exc:
            raise ModelError(f"generator {g.id}: {exc}") from None
        vf = tm = None
        if g.id in excs:
            e = excs[g.id]
            mdls, vf = exciter_contribution(e.id, e.params, g.id, g.bus, vf0, abs(V[k]))
            controllers += mdls
        if g.id in govs:
            gv = govs[g.id]
            mdls, tm = governor_contribution(gv.id, gv.params, g.id, tm0)
            controllers += mdls
        models.append(Genrou(g.id, g.params, state,
                             vf=vf if vf is not None else Const(vf0),
                             tm=tm if tm is not None else Const(tm0),
                             sbase=case.base_mva))
    if not models and not controllers:
        problem = assemble_problem([], net, events=case.events)
    else:
        problem = assemble_problem(models + controllers, net, events=case.events)
    report = check_consistency(problem, problem.x0, problem.y0, problem.u0, problem.t0, tol)
    if not report.passed:
        raise ModelError(f"dynamic initialization is inconsistent: {report}")
    return DynamicInit(problem, report, net)

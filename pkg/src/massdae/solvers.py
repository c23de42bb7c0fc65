"""Implicit integration of mass-matrix DAEs.

Every stepper solves, at each step, the stacked nonlinear system

    phat = M_x (a0 x_t + sum_k a_k x_{t-k}) - h (b0 fhat_t + b1 fhat_{t-h}) = 0
    q    = -gamma g_t = 0

by Newton's method, with iteration matrix

    A = [[a0 M_x - h b0 fhat_x, -h b0 fhat_y],
         [-gamma g_x,            -gamma g_y   ]]

Trapezoid: a = (1, -1), b = (1/2, 1/2).  Implicit Euler: a = (1, -1),
b = (1, 0).  BDF2 (step ratio w = h_n / h_{n-1}): a = ((1+2w)/(1+w), -(1+w),
w^2/(1+w)), b = (1, 0).
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dae import DaeProblem, Event, Trajectory
from .network import Network, apply_event

log = logging.getLogger(__name__)

# systems up to this size are factorized densely
DENSE_LIMIT = 400


class NewtonError(RuntimeError):
    pass


class MaxIterExceeded(NewtonError):
    def __init__(self, iterations: int, norm: float):
        super().__init__(f"Newton did not converge in {iterations} iterations (|r| = {norm:.3e})")
        self.iterations = iterations
        self.norm = norm


class SingularMatrix(NewtonError):
    def __init__(self, pivot: int | None = None, detail: str = ""):
        msg = "singular iteration matrix"
        if pivot is not None:
            msg += f" (pivot row {pivot})"
        super().__init__(msg + (f": {detail}" if detail else ""))
        self.pivot = pivot


class HistoryUnavailable(RuntimeError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, msg: str, time: float):
        super().__init__(f"t={time:.6g}: {msg}")
        self.time = time


class StepSizeUnderflow(IntegrationError):
    pass


class StepperKind(enum.Enum):
    IE = "ie"
    TRAP = "trap"
    BDF2 = "bdf2"

    @property
    def order(self) -> int:
        return 1 if self is StepperKind.IE else 2

    @classmethod
    def parse(cls, s: "str | StepperKind") -> "StepperKind":
        if isinstance(s, cls):
            return s
        aliases = {"ie": cls.IE, "implicit_euler": cls.IE, "bdf1": cls.IE,
                   "trap": cls.TRAP, "trapezoid": cls.TRAP, "itm": cls.TRAP,
                   "bdf2": cls.BDF2}
        try:
            return aliases[str(s).lower()]
        except KeyError:
            raise ValueError(f"unknown stepper {s!r}") from None


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-8
    max_iter: int = 15
    gamma: float | str = "h"
    # reuse one factorization across iterations and steps (off = full Newton)
    reuse_factorization: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("Newton tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.gamma != "h" and not (isinstance(self.gamma, (int, float)) and self.gamma != 0):
            raise ValueError("gamma must be 'h' or a nonzero number")

    def gamma_for(self, h: float) -> float:
        return h if self.gamma == "h" else float(self.gamma)


@dataclass(frozen=True)
class StepController:
    mode: str = "fixed"
    h0: float = 1e-3
    hmin: float = 1e-10
    hmax: float = math.inf
    rtol: float = 1e-3
    atol: float = 1e-6
    safety: float = 0.9

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown step control mode {self.mode!r}")
        if self.mode == "fixed":
            if not self.h0 > 0:
                raise ValueError("step size must be positive")
        elif not (0 < self.hmin <= self.h0 <= self.hmax):
            raise ValueError("need 0 < hmin <= h0 <= hmax")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not 0 < self.safety <= 1:
            raise ValueError("safety factor must lie in (0, 1]")

    @classmethod
    def fixed(cls, h: float) -> "StepController":
        return cls("fixed", h0=h, hmin=h, hmax=h)

    @classmethod
    def adaptive(cls, rtol: float, atol: float, h0: float = 1e-3, hmin: float = 1e-10,
                 hmax: float = 0.1) -> "StepController":
        return cls("adaptive", h0=h0, hmin=hmin, hmax=hmax, rtol=rtol, atol=atol)


# -- linear algebra ---------------------------------------------------------

class _Factor:
    def __init__(self, A):
        if sp.issparse(A) and A.shape[0] > DENSE_LIMIT:
            try:
                self._lu = spla.splu(sp.csc_matrix(A))
            except RuntimeError as exc:
                raise SingularMatrix(detail=str(exc)) from None
            self.solve = self._lu.solve
            return
        M = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(M, check_finite=False)
        d = np.abs(np.diag(lu))
        scale = max(float(np.max(np.abs(M))) if M.size else 1.0, 1e-300)
        bad = np.flatnonzero(d <= scale * 1e-15)
        if bad.size:
            raise SingularMatrix(int(bad[0]))
        self._lu = (lu, piv)

    def solve(self, b):
        return sla.lu_solve(self._lu, b, check_finite=False)


def newton_solve(residual: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], "sp.spmatrix | np.ndarray"],
                 guess: np.ndarray, cfg: NewtonConfig = NewtonConfig(),
                 factor: list | None = None) -> tuple[np.ndarray, int]:
    """Full Newton on ``residual(z) = 0``; converged when ``max|r| <= cfg.tol``.

    ``factor`` is an optional one-element cache for a reusable factorization
    (only consulted when ``cfg.reuse_factorization``).  Returns the solution
    and the number of updates taken.
    """
    z = np.array(guess, dtype=float, copy=True)
    if not np.all(np.isfinite(z)):
        raise ValueError("Newton guess is not finite")
    reuse = cfg.reuse_factorization and factor is not None
    fresh, last = False, math.inf
    for it in range(cfg.max_iter + 1):
        r = residual(z)
        norm = float(np.max(np.abs(r))) if r.size else 0.0
        if norm <= cfg.tol:
            return z, it
        if not math.isfinite(norm):
            raise MaxIterExceeded(it, norm)
        if it == cfg.max_iter:
            raise MaxIterExceeded(it, norm)
        if reuse and factor[0] is not None and not fresh:
            lu = factor[0]
            # stale factorization: refresh if it stops contracting
            if it > 0 and norm > 0.5 * last:
                lu = factor[0] = _Factor(jacobian(z))
                fresh = True
        else:
            lu = _Factor(jacobian(z))
            if factor is not None:
                factor[0] = lu
        last = norm
        z -= lu.solve(r)
    raise MaxIterExceeded(cfg.max_iter, norm)  # pragma: no cover


# -- step equations ---------------------------------------------------------

@dataclass(frozen=True)
class StepCoefficients:
    a0: float
    a: tuple[float, ...]  # multipliers of x_{t-h}, x_{t-2h}, ...
    b0: float
    b1: float

    @classmethod
    def for_kind(cls, kind: StepperKind, ratio: float = 1.0) -> "StepCoefficients":
        if kind is StepperKind.TRAP:
            return cls(1.0, (-1.0,), 0.5, 0.5)
        if kind is StepperKind.IE:
            return cls(1.0, (-1.0,), 1.0, 0.0)
        w = ratio
        return cls((1 + 2 * w) / (1 + w), (-(1 + w), w * w / (1 + w)), 1.0, 0.0)


class StepSystem:
    """Residual and iteration matrix of one implicit step on problem ``p``."""

    def __init__(self, p: DaeProblem):
        self.p = p
        self.n = p.n
        self.N = p.size
        pat = p.pattern
        self.rows = pat.rows
        self.cols = pat.indices
        self.diag = pat.diag
        self.mass = p.mass_full
        self._is_diff = pat.rows < p.n
        self.last_z: np.ndarray | None = None
        self.last_r: np.ndarray | None = None

    def setup(self, u, t, h, gamma, coef: StepCoefficients, hist: Sequence[np.ndarray],
              fprev: np.ndarray | None):
        n = self.n
        self.u, self.t, self.h, self.gamma, self.coef = u, t, h, gamma, coef
        c = np.zeros(n)
        for ak, xk in zip(coef.a, hist):
            c += ak * xk[:n]
        self.mx_hist = self.mass[:n] * c
        self.f_hist = h * coef.b1 * fprev if (coef.b1 and fprev is not None) else 0.0
        self.scale = np.where(self._is_diff, -h * coef.b0, -gamma)

    def residual(self, z: np.ndarray) -> np.ndarray:
        n, cf = self.n, self.coef
        r = self.p.residual(z, self.u, self.t)
        self.last_z, self.last_r = z.copy(), r
        out = np.empty_like(r)
        out[:n] = self.mass[:n] * cf.a0 * z[:n] + self.mx_hist - self.h * cf.b0 * r[:n] - self.f_hist
        out[n:] = -self.gamma * r[n:]
        return out

    def matrix_data(self, z: np.ndarray) -> np.ndarray:
        data = self.p.jacobian_data(z, self.u, self.t) * self.scale
        data[self.diag[: self.n]] += self.coef.a0 * self.mass[: self.n]
        return data

    def sparse_matrix(self, z: np.ndarray) -> sp.csr_matrix:
        return self.p.pattern.matrix(self.matrix_data(z))

    def matrix(self, z: np.ndarray):
        data = self.matrix_data(z)
        if self.N > DENSE_LIMIT:
            return self.p.pattern.matrix(data)
        A = np.zeros((self.N, self.N))
        A[self.rows, self.cols] = data
        return A

    def fhat_at(self, z: np.ndarray) -> np.ndarray:
        if self.last_z is not None and np.array_equal(self.last_z, z):
            return self.last_r[: self.n].copy()
        return self.p.residual(z, self.u, self.t)[: self.n]


def _pack(p: DaeProblem, x, y) -> np.ndarray:
    return p.stack(x, y)


def itm_residual(p: DaeProblem, x_t, y_t, x_prev, fhat_prev, u, t: float, h: float,
                 gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoid step residuals ``(phat, q)`` at trial point ``(x_t, y_t)``."""
    ss = StepSystem(p)
    xp = np.concatenate([np.asarray(x_prev, dtype=float), np.zeros(p.m)])
    ss.setup(np.asarray(u, dtype=float), t, h, gamma, StepCoefficients.for_kind(StepperKind.TRAP),
             [xp], np.asarray(fhat_prev, dtype=float))
    r = ss.residual(_pack(p, x_t, y_t))
    return r[: p.n], r[p.n:]


def itm_jacobian(p: DaeProblem, x_t, y_t, u, t: float, h: float, gamma: float) -> sp.csr_matrix:
    """Trapezoid iteration matrix ``[[M_x - h/2 fhat_x, -h/2 fhat_y], [-g g_x, -g g_y]]``."""
    ss = StepSystem(p)
    ss.setup(np.asarray(u, dtype=float), t, h, gamma, StepCoefficients.for_kind(StepperKind.TRAP),
             [np.zeros(p.size)], None)
    return ss.sparse_matrix(_pack(p, x_t, y_t))


def _step(ss: StepSystem, kind: StepperKind, z_prev: np.ndarray, hist: Sequence[np.ndarray],
          fprev: np.ndarray | None, u, t: float, h: float, cfg: NewtonConfig,
          ratio: float = 1.0, factor: list | None = None,
          guess: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    coef = StepCoefficients.for_kind(kind, ratio)
    ss.setup(u, t, h, cfg.gamma_for(h), coef, hist, fprev)
    return newton_solve(ss.residual, ss.matrix, z_prev if guess is None else guess, cfg, factor)


def ie_step(p: DaeProblem, history: Sequence[np.ndarray], h: float, t: float | None = None,
            cfg: NewtonConfig = NewtonConfig(), u=None) -> tuple[np.ndarray, np.ndarray]:
    """One implicit Euler step from ``history[-1]`` (a full ``[x; y]`` vector)."""
    if len(history) < 1:
        raise HistoryUnavailable("implicit Euler needs one previous point")
    z_prev = np.asarray(history[-1], dtype=float)
    t = (p.t0 if t is None else t)
    u = p.u0 if u is None else np.asarray(u, dtype=float)
    z, _ = _step(StepSystem(p), StepperKind.IE, z_prev, [z_prev], None, u, t + h, h, cfg)
    return z[: p.n], z[p.n:]


def bdf2_step(p: DaeProblem, history: Sequence[np.ndarray], h: float, t: float | None = None,
              cfg: NewtonConfig = NewtonConfig(), u=None) -> tuple[np.ndarray, np.ndarray]:
    """One BDF2 step; ``history`` holds the two previous, equally spaced points."""
    if len(history) < 2:
        raise HistoryUnavailable("BDF2 needs two previous points")
    z1 = np.asarray(history[-1], dtype=float)
    z2 = np.asarray(history[-2], dtype=float)
    t = (p.t0 if t is None else t)
    u = p.u0 if u is None else np.asarray(u, dtype=float)
    z, _ = _step(StepSystem(p), StepperKind.BDF2, z1, [z1, z2], None, u, t + h, h, cfg)
    return z[: p.n], z[p.n:]


def trapezoid_step(p: DaeProblem, history: Sequence[np.ndarray], h: float, t: float | None = None,
                   cfg: NewtonConfig = NewtonConfig(), u=None) -> tuple[np.ndarray, np.ndarray]:
    z_prev = np.asarray(history[-1], dtype=float)
    t = (p.t0 if t is None else t)
    u = p.u0 if u is None else np.asarray(u, dtype=float)
    fprev = p.residual(z_prev, u, t)[: p.n]
    z, _ = _step(StepSystem(p), StepperKind.TRAP, z_prev, [z_prev], fprev, u, t + h, h, cfg)
    return z[: p.n], z[p.n:]


# -- algebraic re-solve -----------------------------------------------------

def algebraic_rows(p: DaeProblem) -> np.ndarray:
    """Rows without dynamics: all of ``g`` plus zero-mass differential rows."""
    return np.concatenate([p.mass.algebraic_rows, np.arange(p.n, p.size)])


def solve_algebraic(p: DaeProblem, z: np.ndarray, u, t: float,
                    cfg: NewtonConfig = NewtonConfig()) -> tuple[np.ndarray, int]:
    """Re-solve the algebraic subsystem with the dynamic states held fixed."""
    rows = algebraic_rows(p)
    z = np.array(z, dtype=float, copy=True)
    if rows.size == 0:
        return z, 0
    u = np.asarray(u, dtype=float)

    def res(v):
        w = z.copy()
        w[rows] = v
        return p.residual(w, u, t)[rows]

    def jac(v):
        w = z.copy()
        w[rows] = v
        return p.jacobian(w, u, t)[rows][:, rows]

    v, it = newton_solve(res, jac, z[rows], cfg)
    z[rows] = v
    return z, it


# -- error control ----------------------------------------------------------

def step_factor(err: float, order: int, safety: float = 0.9) -> float:
    if err == 0:
        return 5.0
    return min(5.0, max(0.2, safety * err ** (-1.0 / (order + 1))))


def error_norm(z_full: np.ndarray, z_fine: np.ndarray, rtol: float, atol: float) -> float:
    w = atol + rtol * np.maximum(np.abs(z_full), np.abs(z_fine))
    return float(np.max(np.abs(z_fine - z_full) / w)) if z_full.size else 0.0


def estimate_error_and_adapt(z_full: np.ndarray, z_fine: np.ndarray, h: float, order: int,
                             ctrl: StepController) -> tuple[bool, float, float]:
    """Step-doubling acceptance test; returns ``(accept, h_next, err)``."""
    err = error_norm(z_full, z_fine, ctrl.rtol, ctrl.atol)
    h_next = h * step_factor(err, order, ctrl.safety)
    h_next = min(max(h_next, ctrl.hmin), ctrl.hmax)
    return err <= 1.0, h_next, err


# -- driver -----------------------------------------------------------------

@dataclass
class _Stats:
    accepted: int = 0
    rejected: int = 0
    newton_iters: int = 0
    events: int = 0

    def as_dict(self) -> dict:
        return dict(accepted=self.accepted, rejected=self.rejected,
                    newton_iters=self.newton_iters, events=self.events)


@dataclass
class _History:
    """Accepted points since the last restart (most recent last)."""
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def reset(self, t, z):
        self.times = [t]
        self.states = [z]

    def push(self, t, z):
        self.times = (self.times + [t])[-2:]
        self.states = (self.states + [z])[-2:]


def validate_events(events: Sequence[Event], t0: float, tf: float) -> list[Event]:
    evs = sorted(events, key=lambda e: e.time)
    for e in evs:
        if not t0 <= e.time <= tf:
            raise ValueError(f"event {e.label} at t={e.time:g} lies outside [{t0:g}, {tf:g}]")
    return evs


def apply_discrete(p: DaeProblem, ev: Event, u: np.ndarray) -> np.ndarray:
    if ev.action in ("line_trip", "line_reconnect"):
        nets = [m for m in p.models if isinstance(m, Network)]
        if not nets:
            raise ValueError(f"event {ev.label}: problem has no network")
        u_new, _, _ = apply_event(ev, u, nets[0])
        return u_new
    if ev.action == "set_discrete":
        u_new = u.copy()
        u_new[p.discrete_index(ev.target)] = float(ev.payload)
        return u_new
    raise ValueError(f"unknown event action {ev.action!r}")


def integrate(p: DaeProblem, span: tuple[float, float], kind: StepperKind | str = StepperKind.TRAP,
              ctrl: StepController = StepController(), newton: NewtonConfig = NewtonConfig(),
              events: Sequence[Event] | None = None, *, z0: np.ndarray | None = None,
              u0: np.ndarray | None = None, record: str = "all",
              on_step: Callable[[float, np.ndarray], None] | None = None) -> Trajectory:
    """Integrate ``p`` over ``span``.

    Steps land exactly on every event time and on ``tf``.  At an event the
    discrete state changes, the algebraic subsystem is re-solved with the
    dynamic states frozen, ``fhat`` is re-evaluated and BDF2 restarts with an
    implicit Euler step.  ``record="final"`` keeps only the first and last
    rows (for long reference runs).
    """
    kind = StepperKind.parse(kind)
    t0, tf = float(span[0]), float(span[1])
    if not tf > t0:
        raise ValueError("empty integration span")
    evs = validate_events(p.events if events is None else events, t0, tf)
    z = np.array(p.z0 if z0 is None else z0, dtype=float, copy=True)
    u = np.array(p.u0 if u0 is None else u0, dtype=float, copy=True)
    n = p.n
    ss = StepSystem(p)
    stats = _Stats()
    factor = [None] if newton.reuse_factorization else None

    times, rows, markers = [t0], [z.copy()], []
    t = t0

    def keep(tn, zn):
        if record == "all":
            times.append(tn)
            rows.append(zn.copy())
        if on_step is not None:
            on_step(tn, zn)

    # events at t0 act before the first step
    pending = list(evs)
    while pending and pending[0].time <= t0:
        ev = pending.pop(0)
        u = apply_discrete(p, ev, u)
        z, it = solve_algebraic(p, z, u, t0, newton)
        stats.newton_iters += it
        stats.events += 1
        markers.append((t0, ev.label))
        rows[0] = z.copy()
    breaks = sorted({e.time for e in pending} | {tf})

    hist = _History()
    hist.reset(t, z)
    fprev = p.residual(z, u, t)[:n]

    def one_step(z_cur, fprev_cur, hist_cur, t_cur, h):
        """Advance by ``h``; returns (z_new, fhat_new, iterations)."""
        guess = None
        if len(hist_cur.states) >= 2:
            # linear extrapolation through the last two points since the restart
            w = h / (hist_cur.times[-1] - hist_cur.times[-2])
            guess = z_cur + w * (z_cur - hist_cur.states[-2])
        if kind is StepperKind.BDF2 and len(hist_cur.states) >= 2:
            ratio = h / (hist_cur.times[-1] - hist_cur.times[-2])
            zs = [hist_cur.states[-1], hist_cur.states[-2]]
            zn, it = _step(ss, kind, z_cur, zs, None, u, t_cur + h, h, newton, ratio, factor,
                           guess)
        elif kind is StepperKind.TRAP:
            zn, it = _step(ss, kind, z_cur, [z_cur], fprev_cur, u, t_cur + h, h, newton, 1.0,
                           factor, guess)
        else:
            zn, it = _step(ss, StepperKind.IE, z_cur, [z_cur], None, u, t_cur + h, h, newton, 1.0,
                           factor, guess)
        return zn, ss.fhat_at(zn), it

    h_adapt = ctrl.h0
    for tb in breaks:
        if ctrl.mode == "fixed":
            span_len = tb - t
            if span_len > 0:
                q = span_len / ctrl.h0
                if abs(q - round(q)) < 1e-6 and round(q) >= 1:
                    # whole number of steps: use h itself so times are exact multiples
                    nsteps, hs = int(round(q)), ctrl.h0
                else:
                    nsteps = max(1, int(math.ceil(q)))
                    hs = span_len / nsteps
                ta = t
                for k in range(1, nsteps + 1):
                    tn = tb if k == nsteps else ta + k * hs
                    h = tn - t
                    try:
                        z, fprev, it = one_step(z, fprev, hist, t, h)
                    except NewtonError as exc:
                        raise IntegrationError(str(exc), t + h) from exc
                    stats.newton_iters += it
                    stats.accepted += 1
                    t = tn
                    hist.push(t, z)
                    keep(t, z)
        else:
            while tb - t > 1e-12 * max(1.0, abs(tb)):
                h = min(h_adapt, tb - t)
                if tb - t - h < ctrl.hmin:
                    h = tb - t
                try:
                    z_full, _, it1 = one_step(z, fprev, hist, t, h)
                    hh = _History(list(hist.times), list(hist.states))
                    z_half, f_half, it2 = one_step(z, fprev, hh, t, 0.5 * h)
                    hh.push(t + 0.5 * h, z_half)
                    z_fine, f_fine, it3 = one_step(z_half, f_half, hh, t + 0.5 * h, 0.5 * h)
                except NewtonError as exc:
                    stats.rejected += 1
                    h_adapt = 0.25 * h
                    if h_adapt < ctrl.hmin:
                        raise StepSizeUnderflow(f"step size below hmin after Newton failure: {exc}",
                                                t) from exc
                    continue
                stats.newton_iters += it1 + it2 + it3
                accept, h_next, err = estimate_error_and_adapt(z_full, z_fine, h, kind.order, ctrl)
                if not accept and h > ctrl.hmin * (1 + 1e-12):
                    stats.rejected += 1
                    h_adapt = h_next
                    continue
                stats.accepted += 1
                t = tb if tb - (t + h) <= 1e-12 * max(1.0, abs(tb)) else t + h
                z, fprev = z_fine, f_fine
                hist.push(t - 0.5 * h, z_half)
                hist.push(t, z)
                keep(t, z)
                h_adapt = h_next

        while pending and pending[0].time <= tb:
            ev = pending.pop(0)
            u = apply_discrete(p, ev, u)
            try:
                z, it = solve_algebraic(p, z, u, t, newton)
            except NewtonError as exc:
                raise IntegrationError(f"algebraic re-solve after {ev.label}: {exc}", t) from exc
            stats.newton_iters += it
            stats.events += 1
            markers.append((t, ev.label))
            fprev = p.residual(z, u, t)[:n]
            hist.reset(t, z)
            if record == "all" and len(rows) > 1 and times[-1] == t:
                rows[-1] = z.copy()

    if record != "all":
        times.append(t)
        rows.append(z.copy())
    traj = Trajectory(p.layout.names, np.array(times), np.array(rows), markers, stats.as_dict())
    traj.stats["u_final"] = u
    return traj

"""Round-rotor synchronous generator with sub-transient flux dynamics.

Machine quantities are per unit on the machine base (``mva``); current
injections into the network are rescaled to the system base.  Differential
rows and their mass entries::

    delta:  1       * delta' = wb (w - 1)
    omega:  2H      * w'     = tm - te - D (w - 1)
    e1q:    T'd0    * e'q'   = -XadIfd + vf
    e1d:    T'q0    * e'd'   = -XaqI1q
    e2d:    T''d0   * e''d'  = -Id (x'd - xl) - e''d + e'q
    e2q:    T''q0   * e''q'  =  Iq (x'q - xl) - e''q + e'd

Stator currents ``Id``, ``Iq`` are algebraic.  Setting ``T''d0 = T''q0 = 0``
leaves a one d- and one q-axis flux-decay machine.

``e2d`` plays the role of the d-axis damper flux and ``e2q`` the negated
q-axis damper flux; the symbols are kept as they appear in the flux equations.
"""
from __future__ import annotations

import math
import operator
from dataclasses import dataclass

from .blocks import Affine, Const, Lag, LagBlock, LeadLag, LeadLagBlock, Signal
from .dae import ALGEBRAIC, DIFFERENTIAL, Model, ModelError, Variable
from .network import vi_name, vr_name

OMEGA_B = 2 * math.pi * 60.0


@dataclass(frozen=True)
class GenrouParams:
    bus: str
    xd: float
    xq: float
    xd1: float
    xq1: float
    x2: float
    xl: float
    ra: float
    Td01: float
    Tq01: float
    Td02: float
    Tq02: float
    H: float
    D: float = 0.0
    mva: float = 100.0
    omega_b: float = OMEGA_B

    def __post_init__(self):
        p = self
        if not (p.xd >= p.xd1 > p.x2 > p.xl >= 0):
            raise ModelError(f"generator at bus {p.bus}: need xd >= x'd > x'' > xl >= 0")
        if not (p.xq >= p.xq1 > p.x2):
            raise ModelError(f"generator at bus {p.bus}: need xq >= x'q > x''")
        for nm in ("Td01", "Tq01", "Td02", "Tq02"):
            if getattr(p, nm) < 0:
                raise ModelError(f"generator at bus {p.bus}: {nm} must be nonnegative")
        if (p.Td02 == 0) != (p.Tq02 == 0):
            raise ModelError(f"generator at bus {p.bus}: sub-transient time constants "
                             "must be zeroed together")
        if p.H <= 0 or p.mva <= 0 or p.ra < 0:
            raise ModelError(f"generator at bus {p.bus}: H, mva must be positive and ra >= 0")

    @property
    def gd1(self) -> float:
        return (self.x2 - self.xl) / (self.xd1 - self.xl)

    @property
    def gq1(self) -> float:
        return (self.x2 - self.xl) / (self.xq1 - self.xl)

    @property
    def gd2(self) -> float:
        return (self.xd1 - self.x2) / (self.xd1 - self.xl) ** 2

    @property
    def gq2(self) -> float:
        return (self.xq1 - self.x2) / (self.xq1 - self.xl) ** 2

    @property
    def reduced(self) -> bool:
        return self.Td02 == 0 and self.Tq02 == 0


@dataclass(frozen=True)
class GenrouState:
    delta: float
    omega: float
    e1q: float
    e1d: float
    e2d: float
    e2q: float
    Id: float
    Iq: float


@dataclass(frozen=True)
class ExciterParams:
    KA: float
    TA: float

    def __post_init__(self):
        if self.TA < 0 or self.KA <= 0:
            raise ModelError("exciter: TA must be nonnegative and KA positive")


@dataclass(frozen=True)
class GovParams:
    R: float
    T1: float
    T2: float
    T3: float

    def __post_init__(self):
        if self.R <= 0:
            raise ModelError("governor: droop R must be positive")
        if min(self.T1, self.T2, self.T3) < 0:
            raise ModelError("governor: time constants must be nonnegative")


_DIFF = ("delta", "omega", "e1q", "e1d", "e2d", "e2q")


class Genrou(Model):
    def __init__(self, name: str, p: GenrouParams, state: GenrouState | None = None,
                 vf: Signal | None = None, tm: Signal | None = None, sbase: float = 100.0):
        self.name = name
        self.p = p
        self.state = state or GenrouState(0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0)
        self.vf = vf if vf is not None else Const(1.0)
        self.tm = tm if tm is not None else Const(0.0)
        self.k = p.mva / sbase
        self._g = (p.gd1, p.gq1, p.gd2, p.gq2)

    def variables(self):
        p, s = self.p, self.state
        mass = (1.0, 2.0 * p.H, p.Td01, p.Tq01, p.Td02, p.Tq02)
        out = [Variable(nm, DIFFERENTIAL, mu, getattr(s, nm)) for nm, mu in zip(_DIFF, mass)]
        out += [Variable("Id", ALGEBRAIC, 0.0, s.Id), Variable("Iq", ALGEBRAIC, 0.0, s.Iq)]
        return out

    def bind(self, var, disc):
        self.vf.bind(var)
        self.tm.bind(var)
        (d, w, e1q, e1d, e2d, e2q) = [var(self.full(nm)) for nm in _DIFF]
        Id, Iq = var(self.full("Id")), var(self.full("Iq"))
        vr, vi = var(vr_name(self.p.bus)), var(vi_name(self.p.bus))
        self.ix = (d, w, e1q, e1d, e2d, e2q, Id, Iq, vr, vi)
        self._get = operator.itemgetter(*self.ix)
        self.res_rows = [d, w, e1q, e1d, e2d, e2q, Id, Iq, vr, vi]
        stamps = [
            (d, w),
            (w, w), (w, e1q), (w, e2d), (w, e1d), (w, e2q), (w, Iq), (w, Id),
            (e1q, e1q), (e1q, e2d), (e1q, Id),
            (e1d, e1d), (e1d, e2q), (e1d, Iq),
            (e2d, Id), (e2d, e2d), (e2d, e1q),
            (e2q, Iq), (e2q, e2q), (e2q, e1d),
            (Id, d), (Id, vr), (Id, vi), (Id, Id), (Id, Iq), (Id, e1d), (Id, e2q),
            (Iq, d), (Iq, vr), (Iq, vi), (Iq, Iq), (Iq, Id), (Iq, e1q), (Iq, e2d),
            (vr, d), (vr, Id), (vr, Iq),
            (vi, d), (vi, Id), (vi, Iq),
        ]
        stamps += [(w, j) for j in self.tm.idx]
        stamps += [(e1q, j) for j in self.vf.idx]
        self.jac_rows = [r for r, _ in stamps]
        self.jac_cols = [c for _, c in stamps]

    def _common(self, z):
        d, w, e1q, e1d, e2d, e2q, Id, Iq, vr, vi = self._get(z)
        s, c = math.sin(d), math.cos(d)
        vd = vr * s - vi * c
        vq = vr * c + vi * s
        gd1, gq1 = self._g[0], self._g[1]
        psi2d = gd1 * e1q + (1.0 - gd1) * e2d
        psi2q = -(gq1 * e1d + (1.0 - gq1) * e2q)
        return d, w, e1q, e1d, e2d, e2q, Id, Iq, s, c, vd, vq, psi2d, psi2q

    def residual(self, z, u, t):
        p = self.p
        d, w, e1q, e1d, e2d, e2q, Id, Iq, s, c, vd, vq, psi2d, psi2q = self._common(z)
        gd2, gq2 = self._g[2], self._g[3]
        xad_ifd = e1q + (p.xd - p.xd1) * (Id + gd2 * (e1q - e2d - (p.xd1 - p.xl) * Id))
        xaq_i1q = e1d - (p.xq - p.xq1) * (Iq - gq2 * (e1d - e2q + (p.xq1 - p.xl) * Iq))
        te = psi2d * Iq - psi2q * Id
        k = self.k
        return [
            p.omega_b * (w - 1.0),
            self.tm.value(z, t) - te - p.D * (w - 1.0),
            -xad_ifd + self.vf.value(z, t),
            -xaq_i1q,
            -Id * (p.xd1 - p.xl) - e2d + e1q,
            Iq * (p.xq1 - p.xl) - e2q + e1d,
            vd + p.ra * Id - p.x2 * Iq + psi2q,
            vq + p.ra * Iq + p.x2 * Id - psi2d,
            k * (Id * s + Iq * c),
            k * (-Id * c + Iq * s),
        ]

    def jac_values(self, z, u, t):
        p = self.p
        d, w, e1q, e1d, e2d, e2q, Id, Iq, s, c, vd, vq, psi2d, psi2q = self._common(z)
        gd1, gq1, gd2, gq2 = self._g
        kd, kq = p.xd - p.xd1, p.xq - p.xq1
        k = self.k
        vals = [
            p.omega_b,
            -p.D, -gd1 * Iq, -(1.0 - gd1) * Iq, -gq1 * Id, -(1.0 - gq1) * Id, -psi2d, psi2q,
            -(1.0 + kd * gd2), kd * gd2, -kd * (1.0 - gd2 * (p.xd1 - p.xl)),
            -(1.0 + kq * gq2), kq * gq2, kq * (1.0 - gq2 * (p.xq1 - p.xl)),
            -(p.xd1 - p.xl), -1.0, 1.0,
            p.xq1 - p.xl, -1.0, 1.0,
            vq, s, -c, p.ra, -p.x2, -gq1, -(1.0 - gq1),
            -vd, c, s, p.ra, p.x2, -gd1, -(1.0 - gd1),
            k * (Id * c - Iq * s), k * s, k * c,
            k * (Id * s + Iq * c), -k * c, k * s,
        ]
        vals += self.tm.grad(z, t)
        vals += self.vf.grad(z, t)
        return vals

    def electrical_torque(self, z) -> float:
        *_, Id, Iq, s, c, vd, vq, psi2d, psi2q = self._common(z)
        return psi2d * Iq - psi2q * Id


def genrou_contribution(name: str, p: GenrouParams, state: GenrouState | None = None,
                        vf: Signal | None = None, tm: Signal | None = None,
                        sbase: float = 100.0) -> Genrou:
    return Genrou(name, p, state, vf, tm, sbase)


def genrou_initialize(p: GenrouParams, V: complex, S: complex,
                      sbase: float = 100.0) -> tuple[GenrouState, float, float]:
    """Steady state for terminal voltage ``V`` and injection ``S`` (system base).

    Returns the machine state, the field voltage and the mechanical torque
    that hold it there.
    """
    V = complex(V)
    Sm = complex(S) * sbase / p.mva
    if abs(V) == 0:
        raise ModelError(f"generator at bus {p.bus}: zero terminal voltage")
    I = (Sm / V).conjugate()
    E = V + complex(p.ra, p.xq) * I
    if abs(E) < 1e-12:
        raise ModelError(f"generator at bus {p.bus}: non-physical operating point (|E| = 0)")
    delta = math.atan2(E.imag, E.real)
    rot = complex(math.sin(delta), math.cos(delta))  # e^{-j(delta - pi/2)}
    Idq = I * rot
    Vdq = V * rot
    Id, Iq = Idq.real, Idq.imag
    vq = Vdq.imag
    e1d = (p.xq - p.xq1) * Iq
    e2q = (p.xq - p.xl) * Iq
    e1q = vq + p.ra * Iq + p.xd1 * Id
    e2d = e1q - (p.xd1 - p.xl) * Id
    vf = e1q + (p.xd - p.xd1) * Id
    psi2d = p.gd1 * e1q + (1 - p.gd1) * e2d
    psi2q = -(p.gq1 * e1d + (1 - p.gq1) * e2q)
    tm = psi2d * Iq - psi2q * Id
    return GenrouState(delta, 1.0, e1q, e1d, e2d, e2q, Id, Iq), vf, tm


class VoltageError(Signal):
    """``vref - |V|`` at a bus."""

    def __init__(self, bus: str, vref: float):
        self.refs = (vr_name(bus), vi_name(bus))
        self.vref = float(vref)

    def value(self, z, t):
        return self.vref - math.hypot(z[self.idx[0]], z[self.idx[1]])

    def grad(self, z, t):
        vr, vi = z[self.idx[0]], z[self.idx[1]]
        vm = math.hypot(vr, vi)
        return [-vr / vm, -vi / vm]


def exciter_contribution(name: str, p: ExciterParams, gen: str, bus: str,
                         vf0: float, vt0: float) -> tuple[list[Model], Signal]:
    """Lag exciter ``TA vf' = KA (vref - |V|) - vf`` at equilibrium ``vf0``.

    Returns the models and the signal feeding the machine's field voltage.
    """
    vref = vt0 + vf0 / p.KA
    lag = Lag(name, LagBlock(p.KA, p.TA), VoltageError(bus, vref), y0=vf0)
    return [lag], Affine(lag.full("y"))


def governor_contribution(name: str, p: GovParams, gen: str, tm0: float) -> tuple[list[Model], Signal]:
    """Droop into a lag (T1) into a lead-lag (lead T2, lag T3) driving ``tm``."""
    u = Affine(f"{gen}.omega", gain=-1.0 / p.R, offset=tm0 + 1.0 / p.R)
    lag = Lag(f"{name}.lag", LagBlock(1.0, p.T1), u, y0=tm0)
    ll = LeadLag(f"{name}.ll", LeadLagBlock(p.T2, p.T3), Affine(lag.full("y")), x0=tm0, y0=tm0)
    return [lag, ll], Affine(ll.full("y"))

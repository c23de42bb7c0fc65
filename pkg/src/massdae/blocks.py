"""Transfer-function blocks in mass-matrix form.

Lag::

    T y' = K u - y

Lead-lag (serial form, ``T2p`` is ``1/T2`` or 0 when ``T2 == 0``)::

    T2 x' = u - x
     0    = T1 * T2p * (u - x) + x - y

Zero time constants are legal and turn the corresponding row algebraic.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

from .dae import ALGEBRAIC, DIFFERENTIAL, Model, ModelError, Variable


class Signal:
    """Scalar input to a block, possibly depending on other variables."""

    refs: tuple[str, ...] = ()

    def bind(self, var: Callable[[str], int]) -> None:
        self.idx = [var(r) for r in self.refs]

    def value(self, z: list, t: float) -> float:
        raise NotImplementedError

    def grad(self, z: list, t: float) -> list[float]:
        """Partial derivatives with respect to ``refs``, in order."""
        return []


class Const(Signal):
    def __init__(self, value: float):
        self.v = float(value)
        self.idx = []

    def value(self, z, t):
        return self.v


class TimeFunction(Signal):
    """Exogenous input ``func(t)``."""

    def __init__(self, func: Callable[[float], float]):
        self.func = func
        self.idx = []

    def value(self, z, t):
        return float(self.func(t))


class Affine(Signal):
    """``offset + gain * z[name]``."""

    def __init__(self, name: str, gain: float = 1.0, offset: float = 0.0):
        self.refs = (name,)
        self.gain = float(gain)
        self.offset = float(offset)

    def value(self, z, t):
        return self.offset + self.gain * z[self.idx[0]]

    def grad(self, z, t):
        return [self.gain]


@dataclass(frozen=True)
class LagBlock:
    K: float
    T: float

    def __post_init__(self):
        if not self.T >= 0:
            raise ModelError(f"lag time constant must be nonnegative, got {self.T}")


@dataclass(frozen=True)
class LeadLagBlock:
    T1: float
    T2: float

    def __post_init__(self):
        if not (self.T1 >= 0 and self.T2 >= 0):
            raise ModelError(f"lead-lag time constants must be nonnegative, got {self.T1}, {self.T2}")

    @property
    def T2p(self) -> float:
        return leadlag_aux(self.T2)


def leadlag_aux(T2: float) -> float:
    return 1.0 / T2 if T2 != 0 else 0.0


def block_initialize(b: LagBlock | LeadLagBlock, u0: float) -> dict[str, float]:
    """Steady-state values that zero the block residuals for input ``u0``."""
    if not math.isfinite(u0):
        raise ValueError("block input must be finite")
    if isinstance(b, LagBlock):
        return {"y": b.K * u0}
    return {"x": u0, "y": u0}


class Lag(Model):
    def __init__(self, name: str, block: LagBlock, u: Signal, y0: float | None = None):
        self.name = name
        self.block = block
        self.u = u
        self.y0 = y0

    def variables(self):
        return [Variable("y", DIFFERENTIAL, self.block.T, 0.0 if self.y0 is None else self.y0)]

    def bind(self, var, disc):
        self.u.bind(var)
        self.iy = var(self.full("y"))
        self.res_rows = [self.iy]
        self.jac_rows = [self.iy] * (1 + len(self.u.idx))
        self.jac_cols = [self.iy] + list(self.u.idx)

    def residual(self, z, u, t):
        return [self.block.K * self.u.value(z, t) - z[self.iy]]

    def jac_values(self, z, u, t):
        K = self.block.K
        return [-1.0] + [K * d for d in self.u.grad(z, t)]


class LeadLag(Model):
    """Lead-lag block; state ``x`` carries mass ``T2``, output ``y`` is algebraic."""

    def __init__(self, name: str, block: LeadLagBlock, u: Signal,
                 x0: float | None = None, y0: float | None = None):
        self.name = name
        self.block = block
        self.u = u
        self.x0 = x0
        self.y0 = y0
        if block.T2 == 0 and block.T1 > 0:
            warnings.warn(f"lead-lag {name}: T2=0 with T1>0 reduces to a pass-through; T1 ignored",
                          stacklevel=2)
        self.k = block.T1 * block.T2p

    def variables(self):
        return [
            Variable("x", DIFFERENTIAL, self.block.T2, 0.0 if self.x0 is None else self.x0),
            Variable("y", ALGEBRAIC, 0.0, 0.0 if self.y0 is None else self.y0),
        ]

    def bind(self, var, disc):
        self.u.bind(var)
        self.ix = var(self.full("x"))
        self.iy = var(self.full("y"))
        nu = len(self.u.idx)
        self.res_rows = [self.ix, self.iy]
        self.jac_rows = [self.ix, self.iy, self.iy] + [self.ix] * nu + [self.iy] * nu
        self.jac_cols = [self.ix, self.ix, self.iy] + list(self.u.idx) * 2

    def residual(self, z, u, t):
        uu = self.u.value(z, t)
        x = z[self.ix]
        return [uu - x, self.k * (uu - x) + x - z[self.iy]]

    def jac_values(self, z, u, t):
        du = self.u.grad(z, t)
        return [-1.0, 1.0 - self.k, -1.0] + du + [self.k * d for d in du]


def lag_contribution(b: LagBlock, u: Signal, name: str = "lag", y0: float | None = None) -> Lag:
    return Lag(name, b, u, y0)


def leadlag_contribution(b: LeadLagBlock, u: Signal, name: str = "leadlag",
                         x0: float | None = None, y0: float | None = None) -> LeadLag:
    return LeadLag(name, b, u, x0, y0)

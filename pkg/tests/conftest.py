import numpy as np
import pytest

from massdae.case import bundled_case
from massdae.dae import ALGEBRAIC, DIFFERENTIAL, Model, Variable
from massdae.powerflow import init_dynamics


class Decay(Model):
    """``mass * x' = -a x`` with an optional algebraic ``y = x**2``."""

    def __init__(self, name="d", a=1.0, mass=1.0, x0=1.0, with_y=False):
        self.name, self.a, self.mass, self.x0, self.with_y = name, a, mass, x0, with_y

    def variables(self):
        v = [Variable("x", DIFFERENTIAL, self.mass, self.x0)]
        if self.with_y:
            v.append(Variable("y", ALGEBRAIC, 0.0, self.x0 ** 2))
        return v

    def bind(self, var, disc):
        self.ix = var(self.full("x"))
        self.res_rows = [self.ix]
        self.jac_rows = [self.ix]
        self.jac_cols = [self.ix]
        if self.with_y:
            self.iy = var(self.full("y"))
            self.res_rows.append(self.iy)
            self.jac_rows += [self.iy, self.iy]
            self.jac_cols += [self.ix, self.iy]

    def residual(self, z, u, t):
        x = z[self.ix]
        r = [-self.a * x]
        if self.with_y:
            r.append(x * x - z[self.iy])
        return r

    def jac_values(self, z, u, t):
        v = [-self.a]
        if self.with_y:
            v += [2 * z[self.ix], -1.0]
        return v


def fd_jacobian(p, z, u, t, rel=1e-6):
    """Central differences, step scaled by variable magnitude."""
    J = np.zeros((p.size, p.size))
    for j in range(p.size):
        h = rel * max(1.0, abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        J[:, j] = (p.residual(zp, u, t) - p.residual(zm, u, t)) / (2 * h)
    return J


@pytest.fixture(scope="session")
def kundur():
    return bundled_case("kundur_two_area")


@pytest.fixture(scope="session")
def two_machine():
    return bundled_case("two_machine")


@pytest.fixture(scope="session")
def kundur_init(kundur):
    return init_dynamics(kundur)


@pytest.fixture(scope="session")
def two_machine_init(two_machine):
    return init_dynamics(two_machine)

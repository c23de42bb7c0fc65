"""Algebraic network layer: admittance matrix and nodal current balance.

Bus voltages are rectangular, ``V = vr + j*vi``.  Each bus owns two algebraic
rows holding the real and imaginary parts of

    I_inj(V, devices) - (Y V)_k

Devices (machines) add their own injections into these rows.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .dae import ALGEBRAIC, Event, Model, ModelError, Variable

SLACK, PV, PQ = "slack", "PV", "PQ"
# networks up to this size evaluate Y @ V densely
DENSE_BUSES = 200


class IslandError(ModelError):
    """The in-service network is not a single connected component."""


class SwitchingError(ValueError):
    """A line event that does not apply to the current line status."""


@dataclass(frozen=True)
class BusRecord:
    id: str
    type: str = PQ
    v0: float = 1.0
    theta0: float = 0.0

    def __post_init__(self):
        if self.type not in (SLACK, PV, PQ):
            raise ModelError(f"bus {self.id}: unknown type {self.type!r}")
        if not self.v0 > 0:
            raise ModelError(f"bus {self.id}: initial voltage must be positive")


@dataclass(frozen=True)
class LineRecord:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    b: float = 0.0
    status: bool = True

    def __post_init__(self):
        if self.x == 0:
            raise ModelError(f"line {self.id}: reactance must be nonzero")
        if self.from_bus == self.to_bus:
            raise ModelError(f"line {self.id}: from and to bus are the same")

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class LoadRecord:
    id: str
    bus: str
    p: float
    q: float


def _bus_index(buses: Sequence[BusRecord]) -> dict[str, int]:
    return {b.id: i for i, b in enumerate(buses)}


def check_connected(nbus: int, pairs: Sequence[tuple[int, int]], what: str = "network") -> None:
    if nbus <= 1:
        return
    if pairs:
        r, c = np.array(pairs).T
    else:
        r = c = np.zeros(0, dtype=int)
    g = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(nbus, nbus))
    ncomp, _ = connected_components(g, directed=False)
    if ncomp > 1:
        raise IslandError(f"{what} splits into {ncomp} islands")


def build_ybus(
    buses: Sequence[BusRecord],
    lines: Sequence[LineRecord],
    loads: Sequence[LoadRecord] = (),
    *,
    status: Sequence[bool] | None = None,
    fold_loads: bool = False,
    vload: Sequence[float] | None = None,
) -> sp.csr_matrix:
    """Complex nodal admittance matrix with pi-model lines.

    ``status`` overrides the lines' own in/out flags.  With ``fold_loads`` the
    loads are added as constant admittances ``(P - jQ)/|V0|^2`` using the
    voltage magnitudes ``vload`` (bus ``v0`` if omitted).
    """
    idx = _bus_index(buses)
    nb = len(buses)
    st = [ln.status for ln in lines] if status is None else list(status)
    rows, cols, vals, pairs = [], [], [], []
    for ln, on in zip(lines, st):
        if not on:
            continue
        try:
            f, t = idx[ln.from_bus], idx[ln.to_bus]
        except KeyError as exc:
            raise ModelError(f"line {ln.id}: unknown bus {exc.args[0]}") from None
        ys = ln.y_series
        ysh = 0.5j * ln.b
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [ys + ysh, ys + ysh, -ys, -ys]
        pairs.append((f, t))
    check_connected(nb, pairs)
    if fold_loads:
        vm = [b.v0 for b in buses] if vload is None else list(vload)
        for ld in loads:
            k = idx[ld.bus]
            rows.append(k)
            cols.append(k)
            vals.append(complex(ld.p, -ld.q) / vm[k] ** 2)
    Y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(nb, nb))
    return Y.tocsr()


def network_residuals(Y: sp.spmatrix, V: np.ndarray, injections: np.ndarray | None = None,
                      loads_pq: np.ndarray | None = None) -> np.ndarray:
    """Stacked ``[Re; Im]`` of ``I_inj - Y V`` per bus (length ``2 * nbus``).

    ``loads_pq`` is an optional complex vector of constant-power demand per bus.
    """
    V = np.asarray(V, dtype=complex)
    mis = -(Y @ V)
    if injections is not None:
        mis = mis + injections
    if loads_pq is not None:
        nz = loads_pq != 0
        if np.any(np.abs(V[nz]) < 1e-6):
            raise FloatingPointError("bus voltage near zero with constant-power load")
        mis[nz] -= np.conj(loads_pq[nz] / V[nz])
    return np.concatenate([mis.real, mis.imag])


def vr_name(bus: str) -> str:
    return f"net.{bus}.vr"


def vi_name(bus: str) -> str:
    return f"net.{bus}.vi"


class Network(Model):
    """Bus voltages plus line statuses (as discrete state).

    Constant-impedance loads are folded into the admittance; loads listed in
    ``pq_loads`` stay constant power and enter the residual directly.
    """

    def __init__(self, buses: Sequence[BusRecord], lines: Sequence[LineRecord],
                 shunt_loads: Sequence[LoadRecord] = (), pq_loads: Sequence[LoadRecord] = (),
                 v_init: Sequence[complex] | None = None, vload: Sequence[float] | None = None,
                 name: str = "net"):
        self.name = name
        self.buses = tuple(buses)
        self.lines = tuple(lines)
        self.bidx = _bus_index(self.buses)
        nb = len(self.buses)
        self.v_init = (np.array([b.v0 * np.exp(1j * b.theta0) for b in self.buses])
                       if v_init is None else np.asarray(v_init, dtype=complex))
        vm = np.abs(self.v_init) if vload is None else np.asarray(vload, dtype=float)
        self.shunt = np.zeros(nb, dtype=complex)
        for ld in shunt_loads:
            self.shunt[self.bidx[ld.bus]] += complex(ld.p, -ld.q) / vm[self.bidx[ld.bus]] ** 2
        self.spq = np.zeros(nb, dtype=complex)
        for ld in pq_loads:
            self.spq[self.bidx[ld.bus]] += complex(ld.p, ld.q)
        self._pq = np.flatnonzero(self.spq)

        # structural pattern: all lines in service plus every diagonal
        fr = np.array([self.bidx[ln.from_bus] for ln in self.lines], dtype=np.int64)
        to = np.array([self.bidx[ln.to_bus] for ln in self.lines], dtype=np.int64)
        ii = np.concatenate([np.arange(nb), fr, to])
        jj = np.concatenate([np.arange(nb), to, fr])
        lin, inv = np.unique(ii * nb + jj, return_inverse=True)
        self.pi, self.pj = lin // nb, lin % nb
        self._npos = len(lin)
        self._pos_ft = inv[nb: nb + len(fr)]
        self._pos_tf = inv[nb + len(fr):]
        self._pos_diag = inv[:nb]
        self._pos_f = self._pos_diag[fr]
        self._pos_t = self._pos_diag[to]
        self._ys = np.array([ln.y_series for ln in self.lines], dtype=complex)
        self._ysh = np.array([0.5j * ln.b for ln in self.lines], dtype=complex)
        self._fr, self._to = fr, to
        self._cache: dict[bytes, tuple[np.ndarray, sp.csr_matrix]] = {}
        self._dense: dict[bytes, np.ndarray] = {}
        self._line_index = {ln.id: k for k, ln in enumerate(self.lines)}

    @property
    def nbus(self) -> int:
        return len(self.buses)

    def variables(self):
        out = []
        for b, v in zip(self.buses, self.v_init):
            out.append(Variable(f"{b.id}.vr", ALGEBRAIC, 0.0, float(v.real)))
            out.append(Variable(f"{b.id}.vi", ALGEBRAIC, 0.0, float(v.imag)))
        return out

    def discrete(self):
        return [(f"{ln.id}.status", 1.0 if ln.status else 0.0) for ln in self.lines]

    def bind(self, var, disc):
        self.ir = np.array([var(self.full(f"{b.id}.vr")) for b in self.buses], dtype=np.int64)
        self.ii = np.array([var(self.full(f"{b.id}.vi")) for b in self.buses], dtype=np.int64)
        self.ustat = np.array([disc(self.full(f"{ln.id}.status")) for ln in self.lines], dtype=np.int64)
        self.res_rows = np.concatenate([self.ir, self.ii])
        rr, ri = self.ir[self.pi], self.ii[self.pi]
        cr, ci = self.ir[self.pj], self.ii[self.pj]
        self.jac_rows = np.concatenate([rr, rr, ri, ri])
        self.jac_cols = np.concatenate([cr, ci, cr, ci])

    def line_status(self, u: np.ndarray) -> np.ndarray:
        return u[self.ustat] if len(self.lines) else np.zeros(0)

    def admittance(self, u: np.ndarray) -> tuple[np.ndarray, sp.csr_matrix]:
        """Admittance values in pattern order and as a CSR matrix, for line status ``u``."""
        st = self.line_status(u)
        key = st.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        on = st != 0
        check_connected(self.nbus, list(zip(self._fr[on].tolist(), self._to[on].tolist())),
                        f"network {self.name}")
        w = st * self._ys
        wsh = st * self._ysh
        pos = np.concatenate([self._pos_f, self._pos_t, self._pos_ft, self._pos_tf, self._pos_diag])
        val = np.concatenate([w + wsh, w + wsh, -w, -w, self.shunt])
        yv = (np.bincount(pos, weights=val.real, minlength=self._npos)
              + 1j * np.bincount(pos, weights=val.imag, minlength=self._npos))
        Y = sp.csr_matrix((yv, (self.pi, self.pj)), shape=(self.nbus, self.nbus))
        self._cache[key] = (yv, Y)
        if self.nbus <= DENSE_BUSES:
            self._dense[key] = Y.toarray()
        return yv, Y

    def ybus(self, u: np.ndarray) -> sp.csr_matrix:
        return self.admittance(u)[1]

    def voltages(self, z) -> np.ndarray:
        z = np.asarray(z)
        return z[self.ir] + 1j * z[self.ii]

    def residual(self, z, u, t):
        za = np.asarray(z)
        V = za[self.ir] + 1j * za[self.ii]
        _, Y = self.admittance(u)
        Y = self._dense.get(self.line_status(u).tobytes(), Y)
        return network_residuals(Y, V, loads_pq=self.spq if len(self._pq) else None)

    def jac_values(self, z, u, t):
        yv, _ = self.admittance(u)
        G, B = yv.real, yv.imag
        jrr, jri, jir, jii = -G, B, -B, -G
        if len(self._pq):
            jrr, jri, jir, jii = jrr.copy(), jri.copy(), jir.copy(), jii.copy()
            za = np.asarray(z)
            V = za[self.ir[self._pq]] + 1j * za[self.ii[self._pq]]
            # I = -conj(S)/conj(V): dI/dVr = c, dI/dVi = -j*c, c = conj(S)/conj(V)**2
            c = np.conj(self.spq[self._pq]) / np.conj(V) ** 2
            d = self._pos_diag[self._pq]
            jrr[d] += c.real
            jri[d] += c.imag
            jir[d] += c.imag
            jii[d] -= c.real
        return np.concatenate([jrr, jri, jir, jii])

    def line(self, line_id: str) -> int:
        try:
            return self._line_index[line_id]
        except KeyError:
            raise SwitchingError(f"unknown line {line_id!r}") from None


def apply_event(event: Event, u: np.ndarray, network: Network) -> tuple[np.ndarray, sp.csr_matrix, np.ndarray]:
    """Apply a line switching event to discrete state ``u``.

    Returns the new discrete state, the new admittance matrix and the global
    rows (network variables) whose equations changed.
    """
    k = network.line(event.target)
    slot = network.ustat[k]
    u_new = np.array(u, dtype=float, copy=True)
    if event.action == "line_trip":
        if u[slot] == 0:
            raise SwitchingError(f"line {event.target} is already out of service")
        u_new[slot] = 0.0
    elif event.action == "line_reconnect":
        if u[slot] != 0:
            raise SwitchingError(f"line {event.target} is already in service")
        u_new[slot] = 1.0
    else:
        raise SwitchingError(f"unsupported network action {event.action!r}")
    Y = network.ybus(u_new)
    f, t = network._fr[k], network._to[k]
    changed = np.array(sorted({network.ir[f], network.ii[f], network.ir[t], network.ii[t]}))
    return u_new, Y, changed


def with_status(lines: Sequence[LineRecord], line_id: str, status: bool) -> list[LineRecord]:
    return [replace(ln, status=status) if ln.id == line_id else ln for ln in lines]

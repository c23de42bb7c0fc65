"""Mass-matrix DAE problem representation.

A problem is the stacked system

    diag(M_x) x' = fhat(x, y, u, t)
             0   = g(x, y, u, t)

where ``M_x`` is a constant, nonnegative diagonal.  A zero on the diagonal
turns the corresponding "differential" row into an algebraic constraint while
the variable keeps its place in the ``x`` block.

Models contribute rows and Jacobian stamps through :class:`Model`;
:func:`assemble_problem` lays them out into a :class:`DaeProblem`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DIFFERENTIAL = "differential"
ALGEBRAIC = "algebraic"


class ModelError(ValueError):
    """Invalid model data or a structural problem found during assembly."""


class NonFiniteError(FloatingPointError):
    """A residual or Jacobian evaluation produced NaN or inf."""

    def __init__(self, what: str, equations: Sequence[str]):
        self.equations = list(equations)
        super().__init__(f"non-finite {what} in equation(s): {', '.join(self.equations[:5])}")


class NotRepresentableError(ValueError):
    """The problem cannot be written in the traditional (identity mass) form."""


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str
    mass: float = 0.0
    init: float = 0.0


class Model:
    """Base class for anything that owns variables and stamps equations.

    Subclasses declare their variables in :meth:`variables` and, once
    :meth:`bind` has resolved indices, report

    * ``res_rows``: global rows written by :meth:`residual` (in order),
    * ``jac_rows`` / ``jac_cols``: the fixed Jacobian stamp positions, in the
      order :meth:`jac_values` returns them.

    The row of an owned variable carries that variable's equation.  Rows of
    other models' variables may also be added to (current injections into
    the network, for example).  Residuals and Jacobian values receive ``z``
    as a plain list of floats; all contributions are summed.
    """

    name: str = ""

    def variables(self) -> list[Variable]:
        return []

    def discrete(self) -> list[tuple[str, float]]:
        return []

    def bind(self, var: Callable[[str], int], disc: Callable[[str], int]) -> None:
        raise NotImplementedError

    def residual(self, z: list, u: np.ndarray, t: float) -> Sequence[float]:
        raise NotImplementedError

    def jac_values(self, z: list, u: np.ndarray, t: float) -> Sequence[float]:
        raise NotImplementedError

    def full(self, local: str) -> str:
        return f"{self.name}.{local}"


@dataclass(frozen=True)
class VariableLayout:
    n: int
    m: int
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    owners: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ModelError("duplicate variable names in layout")
        if len(self.names) != self.n + self.m:
            raise ModelError("layout size mismatch")

    @property
    def size(self) -> int:
        return self.n + self.m

    def index(self, name: str) -> int:
        try:
            return self._lookup[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    @property
    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {nm: i for i, nm in enumerate(self.names)}
            object.__setattr__(self, "_cache", cache)
        return cache


@dataclass(frozen=True)
class MassDiagonal:
    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        if e.ndim != 1:
            raise ModelError("mass diagonal must be a vector")
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            raise ModelError("mass entries must be finite and nonnegative")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def rank(self) -> int:
        return mass_rank(self)

    @property
    def algebraic_rows(self) -> np.ndarray:
        """Indices of zero entries (states converted to algebraic form)."""
        return np.flatnonzero(self.entries == 0.0)


def mass_rank(mass: MassDiagonal | Sequence[float]) -> int:
    e = mass.entries if isinstance(mass, MassDiagonal) else np.asarray(mass, dtype=float)
    return int(np.count_nonzero(e > 0.0))


@dataclass(frozen=True)
class JacobianPattern:
    """Fixed CSR structure plus the scatter map from model stamps into it."""

    size: int
    indices: np.ndarray
    indptr: np.ndarray
    rows: np.ndarray  # row of every stored entry
    scatter: np.ndarray  # stamp position -> stored entry
    diag: np.ndarray  # stored position of (i, i) for every row

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @classmethod
    def from_stamps(cls, size: int, rows: np.ndarray, cols: np.ndarray) -> "JacobianPattern":
        # every diagonal is stored so mass terms always have a slot
        diag = np.arange(size)
        all_rows = np.concatenate([rows, diag])
        all_cols = np.concatenate([cols, diag])
        lin = all_rows.astype(np.int64) * size + all_cols
        uniq, inv = np.unique(lin, return_inverse=True)
        r = (uniq // size).astype(np.int64)
        c = (uniq % size).astype(np.int64)
        indptr = np.zeros(size + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=size), out=indptr[1:])
        return cls(
            size=size,
            indices=c,
            indptr=indptr,
            rows=r,
            scatter=inv[: len(rows)],
            diag=inv[len(rows):],
        )

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))


@dataclass(frozen=True)
class Event:
    time: float
    action: str
    target: str
    payload: float | None = None

    @property
    def label(self) -> str:
        return f"{self.action}:{self.target}"


def _gather(models, method: str, z: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
    zl = z.tolist()
    vals: list[float] = []
    for mdl in models:
        part = getattr(mdl, method)(zl, u, t)
        vals.extend(part.tolist() if isinstance(part, np.ndarray) else part)
    return np.array(vals, dtype=float)


@dataclass(frozen=True, eq=False)
class DaeProblem:
    layout: VariableLayout
    mass: MassDiagonal
    models: tuple[Model, ...]
    pattern: JacobianPattern
    res_rows: np.ndarray
    z0: np.ndarray
    u0: np.ndarray
    t0: float = 0.0
    discrete_names: tuple[str, ...] = ()
    events: tuple[Event, ...] = ()
    # row scaling of the differential block; used by the traditional twin
    row_scale: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def m(self) -> int:
        return self.layout.m

    @property
    def size(self) -> int:
        return self.layout.size

    @property
    def x0(self) -> np.ndarray:
        return self.z0[: self.n].copy()

    @property
    def y0(self) -> np.ndarray:
        return self.z0[self.n:].copy()

    @property
    def mass_full(self) -> np.ndarray:
        """Mass diagonal padded with zeros for the algebraic block."""
        return np.concatenate([self.mass.entries, np.zeros(self.m)])

    def residual(self, z: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        """Stacked ``[fhat; g]`` at ``z = [x; y]``."""
        r = np.bincount(self.res_rows, weights=_gather(self.models, "residual", z, u, t),
                        minlength=self.size)
        if self.row_scale is not None:
            r[: self.n] *= self.row_scale
        if not np.all(np.isfinite(r)):
            bad = np.flatnonzero(~np.isfinite(r))
            raise NonFiniteError("residual", [self.layout.names[i] for i in bad])
        return r

    def jacobian_data(self, z: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        """Values of the full Jacobian in :attr:`pattern` storage order."""
        data = np.bincount(self.pattern.scatter, weights=_gather(self.models, "jac_values", z, u, t),
                           minlength=self.pattern.nnz)
        if self.row_scale is not None:
            rows = self.pattern.rows
            sel = rows < self.n
            data[sel] *= self.row_scale[rows[sel]]
        if not np.all(np.isfinite(data)):
            bad = np.unique(self.pattern.rows[~np.isfinite(data)])
            raise NonFiniteError("Jacobian entry", [self.layout.names[i] for i in bad])
        return data

    def jacobian(self, z: np.ndarray, u: np.ndarray, t: float) -> sp.csr_matrix:
        return self.pattern.matrix(self.jacobian_data(z, u, t))

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return z[: self.n], z[self.n:]

    def stack(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(x) != self.n or len(y) != self.m:
            raise ValueError(f"expected x of length {self.n} and y of length {self.m}")
        return np.concatenate([x, y])

    def discrete_index(self, name: str) -> int:
        return self.discrete_names.index(name)

    def model(self, name: str) -> Model:
        for mdl in self.models:
            if mdl.name == name:
                return mdl
        raise KeyError(name)


def assemble_problem(
    models: Iterable[Model],
    network: Model | None = None,
    *,
    t0: float = 0.0,
    events: Iterable[Event] = (),
) -> DaeProblem:
    """Lay out variables and stamps of ``models`` (and ``network``) into a problem.

    Differential rows come first, grouped by model in input order, then the
    algebraic rows in the same model order.  The network, when given, goes
    first.
    """
    mdls: list[Model] = ([network] if network is not None else []) + list(models)
    if not mdls:
        raise ModelError("no models: nothing to assemble")
    seen_models = set()
    for mdl in mdls:
        if mdl.name in seen_models:
            raise ModelError(f"duplicate model name {mdl.name!r}")
        seen_models.add(mdl.name)

    diff: list[tuple[str, Variable, str]] = []
    alg: list[tuple[str, Variable, str]] = []
    discrete: list[tuple[str, float]] = []
    for mdl in mdls:
        for v in mdl.variables():
            if v.kind == DIFFERENTIAL:
                if v.mass < 0 or not np.isfinite(v.mass):
                    raise ModelError(f"negative mass entry for {mdl.full(v.name)}")
                diff.append((mdl.full(v.name), v, mdl.name))
            elif v.kind == ALGEBRAIC:
                alg.append((mdl.full(v.name), v, mdl.name))
            else:
                raise ModelError(f"unknown variable kind {v.kind!r}")
        for nm, val in mdl.discrete():
            discrete.append((mdl.full(nm), val))

    allv = diff + alg
    names = tuple(nm for nm, _, _ in allv)
    if len(set(names)) != len(names):
        dup = sorted({nm for nm in names if names.count(nm) > 1})
        raise ModelError(f"duplicate variable name(s): {', '.join(dup)}")
    if not allv:
        raise ModelError("no equations: models declare no variables")

    layout = VariableLayout(
        n=len(diff),
        m=len(alg),
        names=names,
        kinds=tuple(v.kind for _, v, _ in allv),
        owners=tuple(o for _, _, o in allv),
    )
    mass = MassDiagonal(np.array([v.mass for _, v, _ in diff], dtype=float))
    dnames = tuple(nm for nm, _ in discrete)

    def var(name: str) -> int:
        try:
            return layout.index(name)
        except KeyError:
            raise ModelError(f"dangling reference to variable {name!r}") from None

    def disc(name: str) -> int:
        try:
            return dnames.index(name)
        except ValueError:
            raise ModelError(f"dangling reference to discrete state {name!r}") from None

    for mdl in mdls:
        mdl.bind(var, disc)

    size = layout.size
    res_rows = np.concatenate([np.asarray(m.res_rows, dtype=np.int64) for m in mdls])
    jr = np.concatenate([np.asarray(m.jac_rows, dtype=np.int64) for m in mdls])
    jc = np.concatenate([np.asarray(m.jac_cols, dtype=np.int64) for m in mdls])
    for arr, what in ((res_rows, "residual row"), (jr, "Jacobian row"), (jc, "Jacobian column")):
        if arr.size and (arr.min() < 0 or arr.max() >= size):
            raise ModelError(f"{what} out of range")
    pattern = JacobianPattern.from_stamps(size, jr, jc)

    z0 = np.array([v.init for _, v, _ in allv], dtype=float)
    u0 = np.array([val for _, val in discrete], dtype=float)
    evs = tuple(sorted(events, key=lambda e: e.time))
    return DaeProblem(
        layout=layout,
        mass=mass,
        models=tuple(mdls),
        pattern=pattern,
        res_rows=res_rows,
        z0=z0,
        u0=u0,
        t0=t0,
        discrete_names=dnames,
        events=evs,
    )


def eval_residuals(p: DaeProblem, x, y, u, t: float) -> tuple[np.ndarray, np.ndarray]:
    r = p.residual(p.stack(x, y), np.asarray(u, dtype=float), t)
    return r[: p.n], r[p.n:]


def eval_jacobians(p: DaeProblem, x, y, u, t: float):
    """Analytic Jacobian blocks ``(fhat_x, fhat_y, g_x, g_y)`` as CSR matrices."""
    J = p.jacobian(p.stack(x, y), np.asarray(u, dtype=float), t)
    n = p.n
    return J[:n, :n], J[:n, n:], J[n:, :n], J[n:, n:]


def to_traditional(p: DaeProblem) -> DaeProblem:
    """Twin problem with identity mass and rows ``fhat_i / mu_ii``."""
    e = p.mass.entries
    if np.any(e == 0.0):
        zero = [p.layout.names[i] for i in np.flatnonzero(e == 0.0)]
        raise NotRepresentableError(
            f"not representable in traditional form: zero mass on {', '.join(zero[:5])}"
        )
    scale = 1.0 / e
    if p.row_scale is not None:
        scale = scale * p.row_scale
    return dataclasses.replace(p, mass=MassDiagonal(np.ones(p.n)), row_scale=scale)


@dataclass
class ConsistencyReport:
    fhat_norm: float
    g_norm: float
    worst: list[str]
    tol: float
    passed: bool

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"consistency {state}: |fhat|={self.fhat_norm:.3e} |g|={self.g_norm:.3e} "
                f"(tol {self.tol:g}) worst: {', '.join(self.worst)}")


def check_consistency(p: DaeProblem, x, y, u, t: float, tol: float = 1e-6) -> ConsistencyReport:
    r = p.residual(p.stack(x, y), np.asarray(u, dtype=float), t)
    f, g = r[: p.n], r[p.n:]
    fn = float(np.max(np.abs(f))) if f.size else 0.0
    gn = float(np.max(np.abs(g))) if g.size else 0.0
    order = np.argsort(-np.abs(r), kind="stable")
    worst = [p.layout.names[i] for i in order[:3] if abs(r[i]) > tol]
    return ConsistencyReport(fn, gn, worst, tol, fn <= tol and gn <= tol)


@dataclass
class Trajectory:
    names: tuple[str, ...]
    times: np.ndarray
    values: np.ndarray
    events: list[tuple[float, str]] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.times), len(self.names))
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

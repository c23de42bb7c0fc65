import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import Decay
from massdae.blocks import Const, Lag, LagBlock, TimeFunction
from massdae.dae import Event, assemble_problem, check_consistency, to_traditional
from massdae.solvers import (HistoryUnavailable, IntegrationError, MaxIterExceeded, NewtonConfig,
                             SingularMatrix, StepController, StepperKind, StepSizeUnderflow,
                             bdf2_step, estimate_error_and_adapt, ie_step, integrate,
                             itm_jacobian, itm_residual, newton_solve, solve_algebraic,
                             step_factor, trapezoid_step)


def lag(T=2.0, K=1.0, u=1.0, y0=0.0):
    return assemble_problem([Lag("lag", LagBlock(K, T), Const(u), y0=y0)])


# -- Newton -----------------------------------------------------------------

def test_newton_scalar_root():
    z, it = newton_solve(lambda z: z ** 2 - 4, lambda z: np.array([[2 * z[0]]]), np.array([3.0]))
    assert z[0] == pytest.approx(2.0, abs=1e-8) and it > 0


def test_newton_linear_one_update():
    z, it = newton_solve(lambda z: z.copy(), lambda z: sp.eye(1, format="csr"), np.array([5.0]))
    assert z[0] == 0.0 and it == 1


def test_newton_max_iter_carries_norm():
    with pytest.raises(MaxIterExceeded) as ei:
        newton_solve(lambda z: z ** 2 + 1, lambda z: np.array([[2 * z[0]]]), np.array([3.0]),
                     NewtonConfig(max_iter=4))
    assert ei.value.norm > 0 and ei.value.iterations == 4


def test_newton_singular_matrix():
    with pytest.raises(SingularMatrix):
        newton_solve(lambda z: z - 1, lambda z: np.zeros((2, 2)), np.zeros(2))


def test_newton_sparse_path():
    n = 500  # above the dense threshold
    A = sp.diags([np.full(n, 4.0), np.full(n - 1, -1.0), np.full(n - 1, -1.0)], [0, 1, -1],
                 format="csr")
    b = np.ones(n)
    z, it = newton_solve(lambda z: A @ z - b, lambda z: A, np.zeros(n), NewtonConfig(tol=1e-12))
    assert np.max(np.abs(A @ z - b)) <= 1e-12 and it == 1


def test_newton_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(tol=0)
    with pytest.raises(ValueError):
        NewtonConfig(max_iter=0)
    with pytest.raises(ValueError):
        NewtonConfig(gamma=0.0)


def test_controller_validation():
    with pytest.raises(ValueError):
        StepController("adaptive", h0=1e-3, hmin=1e-2, hmax=1.0)
    with pytest.raises(ValueError):
        StepController.adaptive(0.0, 1e-6)
    with pytest.raises(ValueError):
        StepController.fixed(-1.0)


def test_stepper_aliases():
    assert StepperKind.parse("trapezoid") is StepperKind.TRAP
    assert StepperKind.parse("implicit_euler") is StepperKind.IE
    with pytest.raises(ValueError):
        StepperKind.parse("rk4")


# -- trapezoid step equations ----------------------------------------------

def test_itm_residual_hand_value():
    p = lag()
    ph, q = itm_residual(p, [0.0], [], [0.0], [1.0], p.u0, 0.1, 0.1, 0.1)
    assert ph.tolist() == pytest.approx([-0.1], abs=1e-15) and q.size == 0


def test_itm_residual_vanishes_at_hand_solution():
    p = lag()
    ph, _ = itm_residual(p, [0.1 / 2.05], [], [0.0], [1.0], p.u0, 0.1, 0.1, 0.1)
    assert abs(ph[0]) <= 1e-16


def test_itm_jacobian_hand_value():
    p = lag()
    assert itm_jacobian(p, [0.0], [], p.u0, 0.1, 0.1, 0.1).toarray().tolist() == [[2.05]]


def test_itm_solve_converges_quickly():
    p = lag()
    x, _ = trapezoid_step(p, [p.z0], 0.1)
    assert x[0] == pytest.approx(0.1 / 2.05, abs=1e-12)
    # linear problem: one update plus the verifying evaluation
    _, it = newton_solve(lambda z: itm_residual(p, z, [], [0.0], [1.0], p.u0, 0.1, 0.1, 0.1)[0],
                         lambda z: itm_jacobian(p, z, [], p.u0, 0.1, 0.1, 0.1), np.zeros(1))
    assert it <= 3


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(-2, 2))
def test_q_zero_when_g_zero(gamma, x):
    p = assemble_problem([Decay("d", with_y=True)])
    _, q = itm_residual(p, [x], [x * x], [x], [-x], p.u0, 0.0, 0.01, gamma)
    assert q.tolist() == [0.0]


def test_unit_mass_matches_traditional_matrix():
    p = assemble_problem([Decay("a", a=2.0, with_y=True), Decay("b", a=0.5, with_y=True)])
    h, gamma = 0.05, 0.7
    z = np.array([0.3, -0.4, 0.1, 0.2])
    A = itm_jacobian(p, z[:2], z[2:], p.u0, 0.0, h, gamma).toarray()
    J = p.jacobian(z, p.u0, 0.0).toarray()
    ref = np.vstack([np.hstack([np.eye(2) - 0.5 * h * J[:2, :2], -0.5 * h * J[:2, 2:]]),
                     -gamma * J[2:]])
    assert np.array_equal(A, ref)


def test_zero_step_upper_left_is_mass():
    p = assemble_problem([Decay("a", mass=3.0), Decay("b", mass=0.25)])
    A = itm_jacobian(p, [0.1, 0.2], [], p.u0, 0.0, 0.0, 1.0).toarray()
    assert np.array_equal(A, np.diag([3.0, 0.25]))


# -- one-step closed forms --------------------------------------------------

def test_ie_trap_bdf2_closed_forms():
    p = assemble_problem([Decay("d")])
    x, _ = ie_step(p, [np.array([1.0])], 0.1, cfg=NewtonConfig(tol=1e-14))
    assert x[0] == pytest.approx(1 / 1.1, abs=1e-12)
    x, _ = trapezoid_step(p, [np.array([1.0])], 0.1, cfg=NewtonConfig(tol=1e-14))
    assert x[0] == pytest.approx(0.95 / 1.05, abs=1e-12)
    x1 = math.exp(-0.1)
    x, _ = bdf2_step(p, [np.array([1.0]), np.array([x1])], 0.1, t=0.1, cfg=NewtonConfig(tol=1e-14))
    assert x[0] == pytest.approx((4 * x1 - 1) / 3.2, abs=1e-12)
    assert x[0] == pytest.approx(0.8185468, abs=1e-7)


def test_bdf2_needs_two_points():
    p = assemble_problem([Decay("d")])
    with pytest.raises(HistoryUnavailable):
        bdf2_step(p, [np.array([1.0])], 0.1)


# -- step-size control ------------------------------------------------------

def test_step_factor_examples():
    ctrl = StepController.adaptive(1e-3, 1e-6, hmax=10.0)
    assert step_factor(1.0, 1) == pytest.approx(0.9) == step_factor(1.0, 2)
    assert step_factor(1e-12, 2) == 5.0
    assert step_factor(16.0, 2) == pytest.approx(0.9 * 16 ** (-1 / 3))
    assert step_factor(16.0, 2) == pytest.approx(0.357, abs=1e-3)
    acc, hn, err = estimate_error_and_adapt(np.array([0.0]), np.array([16e-6]), 0.1, 2,
                                            StepController.adaptive(1e-9, 1e-6, hmax=10.0))
    assert not acc and err == pytest.approx(16.0, rel=1e-6)
    assert hn == pytest.approx(0.1 * 0.9 * 16 ** (-1 / 3), rel=1e-6)
    acc, hn, _ = estimate_error_and_adapt(np.array([1.0]), np.array([1.0]), 0.1, 2, ctrl)
    assert acc and hn == pytest.approx(0.5)


@given(st.floats(1e-8, 1e4))
def test_step_factor_bounded(err):
    assert 0.2 <= step_factor(err, 2) <= 5.0


def test_adaptive_lag_meets_tolerance():
    p = lag()
    tr = integrate(p, (0.0, 5.0), "trap", StepController.adaptive(1e-6, 1e-8, h0=0.1),
                   NewtonConfig(tol=1e-12))
    assert tr.times[-1] == 5.0
    assert abs(tr.final[0] - (1 - math.exp(-2.5))) <= 1e-5
    assert tr.stats["accepted"] < 5000


def test_step_size_underflow():
    class Blowup(Decay):
        def residual(self, z, u, t):
            return [z[self.ix] ** 3]

        def jac_values(self, z, u, t):
            return [3 * z[self.ix] ** 2]

    p = assemble_problem([Blowup("b", x0=1.0)])
    with pytest.raises(StepSizeUnderflow):
        integrate(p, (0.0, 10.0), "ie", StepController.adaptive(1e-3, 1e-6, h0=5.0, hmin=1.0,
                                                                  hmax=5.0),
                  NewtonConfig(max_iter=2))


# -- integrate --------------------------------------------------------------

@pytest.mark.parametrize("kind", ["ie", "trap", "bdf2"])
def test_lag_step_response(kind):
    tr = integrate(lag(), (0.0, 5.0), kind, StepController.fixed(1e-3))
    assert abs(tr.final[0] - (1 - math.exp(-2.5))) <= 1e-3


def test_event_beyond_span_rejected():
    p = lag()
    with pytest.raises(ValueError, match="outside"):
        integrate(p, (0.0, 1.0), "trap", StepController.fixed(0.1),
                  events=[Event(2.0, "set_discrete", "x", 1.0)])


def test_steps_land_on_event_times(kundur_init):
    p = kundur_init.problem
    tr = integrate(p, (0.0, 0.2), "trap", StepController.fixed(0.03))
    for t in (0.1, 0.15, 0.2):
        assert np.any(tr.times == t)
    assert [lbl for _, lbl in tr.events] == ["line_trip:L7-8b", "line_reconnect:L7-8b"]
    assert tr.stats["u_final"].tolist() == p.u0.tolist()


def test_post_event_state_is_consistent(kundur_init):
    p = kundur_init.problem
    tr = integrate(p, (0.0, 0.12), "trap", StepController.fixed(1e-2), NewtonConfig(tol=1e-10),
                   events=p.events[:1])
    k = int(np.flatnonzero(tr.times == 0.1)[0])
    u = tr.stats["u_final"]
    z = tr.values[k]
    rep = check_consistency(p, z[: p.n], z[p.n:], u, 0.1, 1e-8)
    assert rep.g_norm <= 1e-8


def test_algebraic_resolve_freezes_dynamic_states(kundur_init):
    p = kundur_init.problem
    z = p.z0.copy()
    z[p.n:] *= 1.01
    z2, _ = solve_algebraic(p, z, p.u0, 0.0, NewtonConfig(tol=1e-12))
    dyn = np.flatnonzero(p.mass.entries > 0)
    assert np.array_equal(z2[dyn], z[dyn])
    assert np.max(np.abs(p.residual(z2, p.u0, 0.0)[p.n:])) <= 1e-12


def test_determinism(two_machine_init):
    p = two_machine_init.problem
    z0 = p.z0.copy()
    z0[p.layout.index("G1.omega")] += 1e-3
    runs = [integrate(p, (0.0, 0.2), "bdf2", StepController.fixed(5e-3), z0=z0).values
            for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


@pytest.mark.parametrize("kind", ["ie", "trap", "bdf2"])
def test_gamma_invariance_small(two_machine_init, kind):
    p = two_machine_init.problem
    z0 = p.z0.copy()
    z0[p.layout.index("G1.omega")] += 1e-3
    a = integrate(p, (0.0, 0.3), kind, StepController.fixed(5e-3), NewtonConfig(tol=1e-11), z0=z0)
    b = integrate(p, (0.0, 0.3), kind, StepController.fixed(5e-3),
                  NewtonConfig(tol=1e-11, gamma=1.0), z0=z0)
    assert np.max(np.abs(a.values - b.values)) <= 1e-7


def test_mass_vs_traditional_small():
    p = assemble_problem([Decay("a", a=1.0, mass=0.3, with_y=True),
                          Lag("lag", LagBlock(2.0, 4.0), TimeFunction(math.sin))])
    cfg = NewtonConfig(tol=1e-13)
    a = integrate(p, (0.0, 2.0), "trap", StepController.fixed(1e-2), cfg)
    b = integrate(to_traditional(p), (0.0, 2.0), "trap", StepController.fixed(1e-2), cfg)
    assert np.max(np.abs(a.values - b.values)) <= 1e-10


def test_reuse_factorization_agrees(two_machine_init):
    p = two_machine_init.problem
    z0 = p.z0.copy()
    z0[p.layout.index("G1.omega")] += 1e-3
    a = integrate(p, (0.0, 0.2), "trap", StepController.fixed(5e-3), NewtonConfig(tol=1e-11), z0=z0)
    b = integrate(p, (0.0, 0.2), "trap", StepController.fixed(5e-3),
                  NewtonConfig(tol=1e-11, reuse_factorization=True, max_iter=50), z0=z0)
    assert np.max(np.abs(a.values - b.values)) <= 1e-8


def test_newton_failure_surfaces_with_time():
    class Stiff(Decay):
        def residual(self, z, u, t):
            return [-math.exp(z[self.ix])]

        def jac_values(self, z, u, t):
            return [-math.exp(z[self.ix])]

    p = assemble_problem([Stiff("s", x0=5.0)])
    with pytest.raises(IntegrationError) as ei:
        integrate(p, (0.0, 1.0), "ie", StepController.fixed(1.0), NewtonConfig(max_iter=1))
    assert ei.value.time == 1.0

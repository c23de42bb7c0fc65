import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_jacobian
from massdae.dae import Event, assemble_problem
from massdae.network import (PQ, SLACK, BusRecord, IslandError, LineRecord, LoadRecord, Network,
                             SwitchingError, apply_event, build_ybus, network_residuals)
from massdae.powerflow import nr_powerflow
from massdae.case import SystemCase

B2 = (BusRecord("1", SLACK), BusRecord("2", PQ))


def test_single_branch_stamping():
    Y = build_ybus(B2, [LineRecord("L", "1", "2", 0.0, 0.1)]).toarray()
    ys = 1 / 0.1j
    assert Y[0, 0] == ys and Y[1, 1] == ys
    assert Y[0, 1] == -ys and Y[1, 0] == -ys


def test_half_charging_per_end():
    a = build_ybus(B2, [LineRecord("L", "1", "2", 0.0, 0.1)]).toarray()
    b = build_ybus(B2, [LineRecord("L", "1", "2", 0.0, 0.1, b=0.2)]).toarray()
    np.testing.assert_allclose(np.diag(b - a), [0.1j, 0.1j], atol=1e-15)


def test_row_sums_are_shunt_totals():
    lines = [LineRecord("a", "1", "2", 0.01, 0.1, b=0.04), LineRecord("b", "2", "3", 0.02, 0.2, b=0.1)]
    buses = B2 + (BusRecord("3", PQ),)
    Y = build_ybus(buses, lines).toarray()
    np.testing.assert_allclose(Y.sum(axis=1), [0.02j, 0.07j, 0.05j], atol=1e-14)
    assert np.array_equal(Y != 0, (Y != 0).T)


def test_tripping_only_line_islands():
    with pytest.raises(IslandError):
        build_ybus(B2, [LineRecord("L", "1", "2", 0.0, 0.1)], status=[False])


def test_line_record_validation():
    from massdae.dae import ModelError
    with pytest.raises(ModelError):
        LineRecord("L", "1", "2", 0.0, 0.0)
    with pytest.raises(ModelError):
        LineRecord("L", "1", "1", 0.0, 0.1)


def test_flat_network_without_injections_is_balanced():
    Y = build_ybus(B2, [LineRecord("L", "1", "2", 0.01, 0.1)])
    assert not np.any(network_residuals(Y, np.ones(2)))


def test_constant_power_load_near_zero_voltage_flagged():
    Y = build_ybus(B2, [LineRecord("L", "1", "2", 0.01, 0.1)])
    with pytest.raises(FloatingPointError):
        network_residuals(Y, np.array([1.0, 1e-9]), loads_pq=np.array([0, 0.5 + 0.1j]))


def two_bus_case():
    return SystemCase(
        name="two_bus", base_mva=100.0, freq=60.0,
        buses=(BusRecord("1", SLACK, 1.0, 0.0), BusRecord("2", PQ)),
        lines=(LineRecord("L", "1", "2", 0.0, 0.1),),
        loads=(LoadRecord("LD", "2", 0.1, 0.0),),
    )


@pytest.mark.parametrize("loads", ["fold", "pq"])
def test_two_bus_residual_at_powerflow_solution(loads):
    case = two_bus_case()
    pf = nr_powerflow(case)
    kw = {"shunt_loads": case.loads} if loads == "fold" else {"pq_loads": case.loads}
    net = Network(case.buses, case.lines, v_init=pf.phasors, **kw)
    p = assemble_problem([], net)
    r = p.residual(p.z0, p.u0, 0.0)
    # the slack bus carries the unbalanced injection of the missing source
    slack = [p.layout.index("net.1.vr"), p.layout.index("net.1.vi")]
    r[slack] = 0.0
    assert np.max(np.abs(r)) < 1e-8


def test_kundur_network_at_initialization(kundur_init):
    p = kundur_init.problem
    r = p.residual(p.z0, p.u0, 0.0)
    assert np.max(np.abs(r[p.n:])) <= 1e-8


def _chain(nb=6):
    buses = [BusRecord(str(i), SLACK if i == 0 else PQ) for i in range(nb)]
    lines = [LineRecord(f"L{i}", str(i), str(i + 1), 0.01, 0.1, b=0.02) for i in range(nb - 1)]
    return buses, lines


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5), st.floats(-0.05, 0.05).filter(lambda v: abs(v) > 1e-4))
def test_residual_locality(bus, dv):
    buses, lines = _chain()
    Y = build_ybus(buses, lines)
    V = np.exp(1j * np.linspace(0, -0.2, 6))
    base = network_residuals(Y, V)
    V2 = V.copy()
    V2[bus] += dv
    changed = np.flatnonzero(network_residuals(Y, V2) != base) % 6
    allowed = {bus - 1, bus, bus + 1}
    assert set(changed.tolist()) <= allowed


def test_trip_then_reconnect_restores_admittance():
    buses, lines = _chain()
    lines.append(LineRecord("P", "2", "3", 0.01, 0.1, b=0.02))
    net = Network(buses, lines)
    p = assemble_problem([], net)
    Y0 = net.ybus(p.u0).toarray()
    u1, Y1, rows = apply_event(Event(0.1, "line_trip", "P"), p.u0, net)
    assert not np.array_equal(Y1.toarray(), Y0)
    d = np.diag(Y0 - Y1.toarray())
    assert d[2] != 0 and d[3] != 0 and d[0] == 0
    assert sorted(rows.tolist()) == sorted([net.ir[2], net.ii[2], net.ir[3], net.ii[3]])
    u2, Y2, _ = apply_event(Event(0.15, "line_reconnect", "P"), u1, net)
    # fresh network so no cache is involved
    fresh = Network(buses, lines)
    assemble_problem([], fresh)
    assert Y2.toarray().tobytes() == fresh.ybus(u2).toarray().tobytes() == Y0.tobytes()


def test_double_trip_and_double_reconnect_rejected():
    buses, lines = _chain()
    lines.append(LineRecord("P", "2", "3", 0.01, 0.1))
    net = Network(buses, lines)
    p = assemble_problem([], net)
    u1, _, _ = apply_event(Event(0.1, "line_trip", "P"), p.u0, net)
    with pytest.raises(SwitchingError):
        apply_event(Event(0.2, "line_trip", "P"), u1, net)
    with pytest.raises(SwitchingError):
        apply_event(Event(0.2, "line_reconnect", "P"), p.u0, net)


def test_trip_that_islands_is_rejected():
    buses, lines = _chain()
    net = Network(buses, lines)
    p = assemble_problem([], net)
    with pytest.raises(IslandError):
        apply_event(Event(0.1, "line_trip", "L2"), p.u0, net)


def test_network_jacobian_with_constant_power_loads():
    buses, lines = _chain()
    loads = [LoadRecord("a", "3", 0.4, 0.1), LoadRecord("b", "5", 0.2, -0.05)]
    net = Network(buses, lines, pq_loads=loads)
    p = assemble_problem([], net)
    rng = np.random.default_rng(3)
    z = p.z0 + 0.05 * rng.standard_normal(p.size)
    J = p.jacobian(z, p.u0, 0.0).toarray()
    np.testing.assert_allclose(J, fd_jacobian(p, z, p.u0, 0.0), rtol=1e-6, atol=1e-7)

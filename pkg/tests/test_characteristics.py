import numpy as np
import pytest

from transportlab.characteristics import (
    Box,
    TrajectoryError,
    backward_exit,
    backward_exit_batch,
    characteristic_oracle,
    characteristic_oracle_batch,
    integrate_trajectory,
    singularity_diagnostic,
)
from transportlab.fields import field_callable, field_expr, field_vector, field_zero

UNIT_BOX = Box(0.0, 1.0, 0.0, 1.0)
ZERO_E = field_zero("vector-x")


def constant_force(e1, e2):
    return field_vector(f"{e1}", f"{e2}", label=f"E=({e1},{e2})")


# ---------------------------------------------------------------------------
# trajectory integration
# ---------------------------------------------------------------------------

def test_free_streaming_straight_line():
    traj = integrate_trajectory(ZERO_E, (0.0, (0.5, 0.5), (1.0, 0.0)),
                                s_target=0.2, dt=0.01)
    s, X, V = traj.final_state
    assert s == pytest.approx(0.2)
    assert X == pytest.approx([0.7, 0.5], abs=1e-14)
    assert V == pytest.approx([1.0, 0.0], abs=1e-14)


def test_constant_force_parabola():
    # dV/ds = (0,-1) from rest: V = (0,-s), X = x0 + (0, -s^2/2); closed form
    E = constant_force(0.0, -1.0)
    s = 0.4
    traj = integrate_trajectory(E, (0.0, (0.5, 0.8), (0.0, 0.0)),
                                s_target=s, dt=0.02)
    _, X, V = traj.final_state
    assert V == pytest.approx([0.0, -s], abs=1e-13)
    assert X == pytest.approx([0.5, 0.8 - s ** 2 / 2], abs=1e-13)


def test_identity_anchor_single_sample():
    traj = integrate_trajectory(ZERO_E, (0.3, (0.5, 0.5), (1.0, 2.0)),
                                s_target=0.3, dt=0.01)
    assert traj.samples.shape == (1, 5)
    assert traj.samples[0, 0] == 0.3


def test_step_cap_enforced():
    with pytest.raises(TrajectoryError):
        integrate_trajectory(ZERO_E, (0.0, (0.5, 0.5), (1.0, 0.0)),
                             s_target=10.0, dt=1e-9, max_steps=1000)


def test_group_property():
    E = field_vector("0.2*sin(pi*x)", "-0.2*cos(pi*y)")
    anchor = (0.0, (0.4, 0.6), (0.5, -0.3))
    one_hop = integrate_trajectory(E, anchor, s_target=0.8, dt=1e-3)
    mid = integrate_trajectory(E, anchor, s_target=0.3, dt=1e-3)
    _, Xm, Vm = mid.final_state
    two_hop = integrate_trajectory(E, (0.3, Xm, Vm), s_target=0.8, dt=1e-3)
    _, Xa, Va = one_hop.final_state
    _, Xb, Vb = two_hop.final_state
    assert Xa == pytest.approx(Xb, abs=1e-10)
    assert Va == pytest.approx(Vb, abs=1e-10)


def test_energy_conservation_rate_for_gradient_force():
    # E = -grad b with b = 0.3 cos(pi x) + 0.2 sin(pi y)
    b = lambda x, y: 0.3 * np.cos(np.pi * x) + 0.2 * np.sin(np.pi * y)
    E = field_vector("0.3*pi*sin(pi*x)", "-0.2*pi*cos(pi*y)")
    anchor = (0.0, (0.5, 0.5), (0.4, -0.2))

    def drift(dt):
        traj = integrate_trajectory(E, anchor, s_target=2.0, dt=dt)
        s = traj.samples
        energy = 0.5 * (s[:, 3] ** 2 + s[:, 4] ** 2) + b(s[:, 1], s[:, 2])
        return np.max(np.abs(energy - energy[0]))

    d1, d2 = drift(0.02), drift(0.01)
    assert d1 < 1e-8
    assert d1 / d2 > 8.0  # 4th-order: expect about 16


# ---------------------------------------------------------------------------
# backward exit
# ---------------------------------------------------------------------------

def test_backward_exit_straight_line():
    rec = backward_exit(ZERO_E, UNIT_BOX, (10.0, (0.5, 0.5), (1.0, 0.0)),
                        dt=1e-3)
    assert not rec.never
    assert rec.t_minus == pytest.approx(0.5, abs=1e-10)
    assert rec.x_minus == pytest.approx([0.0, 0.5], abs=1e-10)
    assert rec.v_minus == pytest.approx([1.0, 0.0], abs=1e-12)
    assert rec.n_dot_v == pytest.approx(-1.0, abs=1e-12)


def test_backward_exit_stationary_never():
    rec = backward_exit(ZERO_E, UNIT_BOX, (5.0, (0.5, 0.5), (0.0, 0.0)),
                        dt=1e-2)
    assert rec.never
    assert rec.t_minus == np.inf


def test_backward_exit_parabola_matches_quadratic_root():
    # upward force, upward anchor velocity: backward parabola
    # y(sigma) = 0.1 - sigma + sigma^2/2 hits 0 at sigma = 1 - sqrt(0.8)
    E = constant_force(0.0, 1.0)
    rec = backward_exit(E, UNIT_BOX, (10.0, (0.5, 0.1), (0.0, 1.0)), dt=1e-3)
    sigma_star = 1.0 - np.sqrt(0.8)
    assert rec.t_minus == pytest.approx(sigma_star, abs=1e-10)
    assert rec.x_minus[1] == pytest.approx(0.0, abs=1e-10)
    assert rec.v_minus[1] == pytest.approx(1.0 - sigma_star, abs=1e-10)
    assert rec.n_dot_v == pytest.approx(-(1.0 - sigma_star), abs=1e-10)


def test_backward_exit_horizon_branch():
    # with anchor time 0.2 the backward sweep stops at time zero, inside
    rec = backward_exit(ZERO_E, UNIT_BOX, (0.2, (0.5, 0.5), (1.0, 0.0)),
                        dt=1e-3)
    assert rec.never
    # same anchor with a long horizon exits
    rec2 = backward_exit(ZERO_E, UNIT_BOX, (0.2, (0.5, 0.5), (1.0, 0.0)),
                         dt=1e-3, horizon=np.inf)
    assert not rec2.never
    assert rec2.t_minus == pytest.approx(0.5, abs=1e-10)


def test_backward_exit_batch_random_anchors_match_closed_form():
    rng = np.random.default_rng(42)
    n = 400
    X = rng.uniform(0.05, 0.95, size=(n, 2))
    V = rng.uniform(-3, 3, size=(n, 2))
    V[np.abs(V) < 0.1] = 0.5  # keep away from glancing
    res = backward_exit_batch(ZERO_E, UNIT_BOX, 50.0, X, V, dt=5e-3)
    # straight-line oracle: sigma_axis = (x - face_in_direction(-v)) / v
    with np.errstate(divide="ignore"):
        sx = np.where(V[:, 0] > 0, X[:, 0] / V[:, 0],
                      (X[:, 0] - 1.0) / V[:, 0])
        sy = np.where(V[:, 1] > 0, X[:, 1] / V[:, 1],
                      (X[:, 1] - 1.0) / V[:, 1])
    sigma = np.minimum(np.abs(sx), np.abs(sy))
    assert not np.any(res.never)
    assert np.max(np.abs(res.t_minus - sigma)) < 1e-8
    Xexp = X - sigma[:, None] * V
    assert np.max(np.abs(res.x_minus - Xexp)) < 1e-8


def test_time_reversal_property():
    E = field_vector("0.2 + 0.1*sin(2*pi*y)", "0.1*cos(2*pi*x)")
    anchor_t, x0, v0 = 3.0, (0.4, 0.7), (0.8, -0.5)
    rec = backward_exit(E, UNIT_BOX, (anchor_t, x0, v0), dt=1e-3)
    assert not rec.never
    traj = integrate_trajectory(E, (anchor_t - rec.t_minus, rec.x_minus,
                                    rec.v_minus), s_target=anchor_t, dt=1e-3)
    _, X, V = traj.final_state
    assert X == pytest.approx(np.asarray(x0), abs=1e-7)
    assert V == pytest.approx(np.asarray(v0), abs=1e-7)


# ---------------------------------------------------------------------------
# solution oracle
# ---------------------------------------------------------------------------

def test_oracle_pure_inflow_transport():
    h_one = field_expr("1 + 0*t", "txv")
    u = characteristic_oracle(ZERO_E, field_zero("xv"), field_zero("txv"),
                              field_zero("xv"), h_one,
                              (10.0, (0.5, 0.5), (1.0, 0.0)), UNIT_BOX, dt=1e-3)
    assert u == pytest.approx(1.0, abs=1e-12)
    # before the characteristic reaches the boundary the value is g = 0
    u0 = characteristic_oracle(ZERO_E, field_zero("xv"), field_zero("txv"),
                               field_zero("xv"), h_one,
                               (0.2, (0.5, 0.5), (1.0, 0.0)), UNIT_BOX, dt=1e-3)
    assert u0 == 0.0


def test_oracle_constant_absorption():
    c = 1.7
    q = field_expr(f"{c}", "xv")
    h_one = field_expr("1 + 0*t", "txv")
    anchor = (10.0, (0.5, 0.5), (1.0, 0.0))
    u = characteristic_oracle(ZERO_E, q, field_zero("txv"), field_zero("xv"),
                              h_one, anchor, UNIT_BOX, dt=1e-3)
    assert u == pytest.approx(np.exp(-c * 0.5), rel=1e-10)


def test_oracle_source_accumulation():
    S = field_expr("1 + 0*t", "txv")
    # exit at 0.5 -> u = min(t, t_minus) = 0.5
    u = characteristic_oracle(ZERO_E, field_zero("xv"), S, field_zero("xv"),
                              field_zero("txv"),
                              (10.0, (0.5, 0.5), (1.0, 0.0)), UNIT_BOX, dt=1e-3)
    assert u == pytest.approx(0.5, rel=1e-10)
    # never-exiting anchor accumulates over the full horizon t
    u2 = characteristic_oracle(ZERO_E, field_zero("xv"), S, field_zero("xv"),
                               field_zero("txv"),
                               (0.3, (0.5, 0.5), (1.0, 0.0)), UNIT_BOX, dt=1e-3)
    assert u2 == pytest.approx(0.3, rel=1e-10)


def test_oracle_all_zero_data():
    rng = np.random.default_rng(1)
    X = rng.uniform(0.1, 0.9, size=(20, 2))
    V = rng.uniform(-2, 2, size=(20, 2))
    u = characteristic_oracle_batch(ZERO_E, field_zero("xv"),
                                    field_zero("txv"), field_zero("xv"),
                                    field_zero("txv"), 1.0, X, V, UNIT_BOX,
                                    dt=1e-2)
    assert np.all(u == 0.0)


def test_oracle_initial_datum_branch():
    g = field_callable(lambda x, y, vx, vy: x + 2 * y, "xv")
    u = characteristic_oracle(ZERO_E, field_zero("xv"), field_zero("txv"),
                              g, field_zero("txv"),
                              (0.1, (0.5, 0.5), (1.0, 0.0)), UNIT_BOX, dt=1e-3)
    # backward position at time zero: (0.4, 0.5)
    assert u == pytest.approx(0.4 + 1.0, rel=1e-10)


# ---------------------------------------------------------------------------
# singularity diagnostic
# ---------------------------------------------------------------------------

def test_diagnostic_normal_exit():
    d = singularity_diagnostic(ZERO_E, UNIT_BOX,
                               (10.0, (0.5, 0.5), (2.0, 0.0)), dt=1e-3)
    assert d == pytest.approx(2.0, abs=1e-10)


def test_diagnostic_near_glancing_is_small():
    # almost-tangential motion: exits the x-low face with |n.v| = 0.01,
    # flagging a gradient-blowup scale of 1/0.01
    d = singularity_diagnostic(ZERO_E, UNIT_BOX,
                               (1.0, (0.5, 0.5), (0.01, 0.0)), dt=0.05,
                               horizon=np.inf)
    assert d == pytest.approx(0.01, rel=1e-6)


def test_diagnostic_rejects_never():
    with pytest.raises(ValueError):
        singularity_diagnostic(ZERO_E, UNIT_BOX,
                               (1.0, (0.5, 0.5), (0.0, 0.0)), dt=1e-2)


def test_diagnostic_positive_for_tangential_force_on_outgoing_anchors():
    # force tangential on every box face (n.E = 0), anchors on the outgoing
    # side: transversal backward exits have strictly positive diagnostic
    E = field_vector("0.2*sin(pi*x)", "0.1*sin(pi*y)")
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(10):
        y0 = rng.uniform(0.2, 0.8)
        v = (rng.uniform(0.5, 2.0), rng.uniform(-0.5, 0.5))
        rec = backward_exit(E, UNIT_BOX, (5.0, (1.0 - 1e-9, y0), v),
                            dt=2e-3, horizon=50.0)
        if rec.never or rec.t_minus > 5.0 + 1.0:
            continue  # outside the guaranteed-transversal regime
        assert abs(rec.n_dot_v) > 0.0
        assert rec.n_dot_v < 0.0
        checked += 1
    assert checked >= 5

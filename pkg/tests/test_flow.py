"""Fixed-step RK4 flow maps, variational Jacobians, and pullback densities."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cubeflow import core, fields, flow, transport


def _logistic_flow_exact(x, c):
    # closed-form time-one flow of f = c x(1-x)
    return x * np.exp(c) / (1.0 + x * (np.exp(c) - 1.0))


def test_zero_field_is_identity():
    res = flow.integrate_flow(fields.ZeroField(2), core.RngStream(0).uniform(20, 2),
                              cfg=flow.FlowConfig(jacobian_mode="full_matrix"))
    assert np.max(np.abs(res.terminal - core.RngStream(0).uniform(20, 2))) == 0.0
    assert np.max(np.abs(res.jacobian - np.eye(2))) == 0.0
    assert np.max(np.abs(res.logdet)) == 0.0


def test_logistic_flow_matches_closed_form():
    f = fields.logistic_field(1.0)
    x = core.RngStream(1).uniform(100, 1)
    res = flow.integrate_flow(f, x, cfg=flow.FlowConfig(n_steps=64))
    assert np.max(np.abs(res.terminal[:, 0] - _logistic_flow_exact(x[:, 0], 1.0))) < 1e-9


def test_logistic_logdet_matches_jacobian():
    f = fields.logistic_field(0.7)
    x = 0.05 + 0.9 * core.RngStream(2).uniform(50, 1)
    full = flow.integrate_flow(f, x, cfg=flow.FlowConfig(jacobian_mode="full_matrix"))
    trace = flow.integrate_flow(f, x, cfg=flow.FlowConfig(jacobian_mode="logdet_trace"))
    assert np.max(np.abs(full.logdet - trace.logdet)) < 1e-9


def test_inverse_flow_round_trip():
    f = fields.logistic_field(0.9)
    x = core.RngStream(3).uniform(50, 1)
    y = flow.integrate_flow(f, x, cfg=flow.FlowConfig(n_steps=64)).terminal
    back = flow.inverse_flow(f, y, cfg=flow.FlowConfig(n_steps=64))
    assert np.max(np.abs(back.terminal - x)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(0.2, 0.8))
def test_rk4_exact_on_linear_trajectories(a, x0):
    # fields constant in x are integrated exactly by RK4 for any step count
    f = fields.AnalyticField(1, lambda x, t, xp: np.full_like(x, a * t), None)
    res = flow.integrate_flow(f, np.array([[x0]]),
                              cfg=flow.FlowConfig(n_steps=8, clamp_tol=1e-8))
    assert abs(res.terminal[0, 0] - (x0 + 0.5 * a)) < 1e-12


def test_flow_config_validation():
    with pytest.raises(ValueError):
        flow.FlowConfig(n_steps=4)
    with pytest.raises(ValueError):
        flow.FlowConfig(clamp_tol=1.0)
    with pytest.raises(ValueError):
        flow.FlowConfig(jacobian_mode="banana")


def test_trajectory_escape_raises():
    runaway = fields.AnalyticField(1, lambda x, t, xp: np.ones_like(x) * 50.0, None)
    with pytest.raises(flow.TrajectoryEscaped):
        flow.integrate_flow(runaway, np.array([[0.5]]),
                            cfg=flow.FlowConfig(clamp_tol=1e-10))


def test_pullback_density_exact_coupling():
    p0 = core.make_density("affine1d")
    kr = transport.build_kr_map(p0, core.uniform_density(1))
    f = transport.straight_line_field(kr)
    pts = 0.01 + 0.98 * core.RngStream(4).uniform(50, 1)
    vals = flow.pullback_density(f, core.uniform_density(1), pts,
                                 flow.FlowConfig(jacobian_mode="logdet_trace"))
    assert np.max(np.abs(vals - p0(pts))) < 1e-7


def test_singular_value_audit_zero_field():
    rep = flow.singular_value_audit(fields.ZeroField(1), 0.0, 32)
    assert rep.passed
    assert rep.observed_max_sv == pytest.approx(1.0)
    assert rep.upper_bound == pytest.approx(1.0)


def test_lipschitz_constant_value():
    # d=1, r=1: max{e, (e^3 + 2 e^2)/2} = (e^3 + 2 e^2)/2
    expected = (np.exp(3.0) + 2 * np.exp(2.0)) / 2.0
    assert flow.lipschitz_constant(1, 1.0) == pytest.approx(expected)


def test_flow_lipschitz_audit_logistic_pair():
    rep = flow.flow_lipschitz_audit(fields.logistic_field(1.0),
                                    fields.logistic_field(1.1),
                                    r=1.0, n_probe=64)
    assert rep.passed
    assert rep.ratio <= rep.constant

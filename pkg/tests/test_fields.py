"""Velocity-field ansatz classes: networks, splines, cutoff, norm accounting."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cubeflow import core, fields
from cubeflow._bspline import basis_matrix, bspline_value


# ---------------------------------------------------------------- B-splines

@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.floats(0.01, 0.99))
def test_partition_of_unity(m, frac):
    # sum_j B^m(x - j) = 1 for any x; probe one point per draw
    x = frac + 1.7
    total = sum(bspline_value(m, np.array([x - j])) for j in range(-m, 5))
    assert abs(float(total[0]) - 1.0) < 1e-12


def test_hat_function_values():
    assert bspline_value(2, np.array([1.0]))[0] == pytest.approx(1.0)
    assert np.all(bspline_value(2, np.array([-0.1, 2.1, 5.0])) == 0.0)


def test_spline_smoothness_at_knots():
    # order-m splines have m-2 continuous derivatives at the knots
    for m in [3, 4, 5]:
        for knot in range(m + 1):
            for r in range(m - 1):
                left = bspline_value(m, np.array([knot - 1e-9]), r)[0]
                right = bspline_value(m, np.array([knot + 1e-9]), r)[0]
                assert abs(left - right) < 1e-6, (m, knot, r)


def test_basis_matrix_matches_columns():
    z = np.array([0.11, 0.47, 0.93])
    B = basis_matrix(3, 8, z, 0)
    from cubeflow._bspline import eval_bspline
    for idx, j in enumerate(range(-2, 8)):
        assert np.allclose(B[:, idx], eval_bspline(3, 8, j, z))


# ---------------------------------------------------------------- networks

def _rng():
    return core.RngStream(5)


def test_init_network_respects_architecture():
    net = fields.init_network((4, 12, 80, 3.0), d_in=3, d_out=2, rng=_rng())
    assert len(net.layers) == 4
    assert net.audit.nonzeros == 80
    assert net.audit.max_abs <= 3.0 + 1e-12
    assert net.audit.width <= 12


def test_init_network_infeasible_sparsity():
    with pytest.raises(fields.InfeasibleSparsity):
        fields.init_network((3, 8, 10 ** 9, 1.0), d_in=2, d_out=1, rng=_rng())


def test_network_json_round_trip_exact():
    net = fields.init_network((3, 10, 60, 2.0), d_in=2, d_out=1, rng=_rng())
    back = fields.network_from_json(fields.network_to_json(net))
    for (w, b), (w2, b2) in zip(net.layers, back.layers):
        assert np.array_equal(w, w2) and np.array_equal(b, b2)
    z = _rng().uniform(20, 2)
    assert np.array_equal(fields.eval_network(net, z),
                          fields.eval_network(back, z))


def test_network_jacobian_matches_fd():
    net = fields.init_network((3, 10, 60, 2.0), d_in=2, d_out=2, rng=_rng())
    z = 0.1 + 0.8 * _rng().uniform(30, 2)
    jac = fields.eval_network_jacobian(net, z)
    h = 1e-6
    for k in range(2):
        zp, zm = z.copy(), z.copy()
        zp[:, k] += h
        zm[:, k] -= h
        fd = (fields.eval_network(net, zp) - fields.eval_network(net, zm)) / (2 * h)
        assert np.max(np.abs(fd - jac[:, :, k])) < 1e-6


def test_network_input_dim_checked():
    net = fields.init_network((2, 6, 20, 2.0), d_in=3, d_out=1, rng=_rng())
    with pytest.raises(fields.DimensionMismatch):
        fields.eval_network(net, np.zeros((4, 2)))


# ---------------------------------------------------------------- spline fields

def test_spline_field_jacobian_matches_fd():
    rng = _rng()
    f = fields.SplineField(2, 3, 4, rng.normal((2, 6, 6, 6)))
    x = 0.05 + 0.9 * rng.uniform(40, 2)
    jac = f.jacobian(x, 0.3)
    fd = fields.fd_spatial_jacobian(f.value, x, 0.3, h=1e-6)
    assert np.max(np.abs(jac - fd)) < 1e-6


def test_spline_field_requires_m3():
    with pytest.raises(ValueError):
        fields.SplineField(1, 2, 4)


def test_spline_field_accepts_time_vector():
    rng = _rng()
    f = fields.SplineField(1, 3, 4, rng.normal((1, 6, 6)))
    x = rng.uniform(10, 1)
    tv = rng.uniform(10, 1)[:, 0]
    stacked = np.concatenate([f.value(x[i:i + 1], tv[i]) for i in range(10)])
    assert np.allclose(f.value(x, tv), stacked)


# ---------------------------------------------------------------- cutoff

def test_cutoff_vanishes_on_boundary():
    rng = _rng()
    inner = fields.SplineField(2, 3, 3, rng.normal((2, 5, 5, 5)))
    f = fields.apply_cutoff(inner)
    edge = rng.uniform(20, 2)
    edge[:10, 0] = 0.0
    edge[10:, 1] = 1.0
    v = f.value(edge, 0.5)
    assert np.all(v[:10, 0] == 0.0)
    assert np.all(v[10:, 1] == 0.0)


def test_cutoff_jacobian_product_rule():
    rng = _rng()
    inner = fields.SplineField(1, 3, 3, rng.normal((1, 5, 5)))
    f = fields.apply_cutoff(inner)
    x = 0.05 + 0.9 * rng.uniform(30, 1)
    fd = fields.fd_spatial_jacobian(f.value, x, 0.25, h=1e-6)
    assert np.max(np.abs(f.jacobian(x, 0.25) - fd)) < 1e-6


def test_fd_jacobian_second_order_at_boundary():
    # the clipped 3-point stencil stays O(h^2) on the faces themselves
    f = fields.AnalyticField(1, lambda x, t, xp: x ** 2, None)
    x = np.array([[0.0], [1.0], [0.5]])
    jac = fields.fd_spatial_jacobian(f.value, x, 0.0, h=1e-5)
    # exact for quadratics up to rounding noise (weights scale like 1/h)
    assert np.max(np.abs(jac[:, 0, 0] - 2 * x[:, 0])) < 1e-6


# ---------------------------------------------------------------- norms

def test_measure_field_norms_on_known_field():
    # f(x,t) = x(1-x): |f| <= 1/4, f' = 1-2x so C1 norm is 1, f'' = -2
    f = fields.AnalyticField(1, lambda x, t, xp: x * (1 - x),
                             lambda x, t, xp: (1 - 2 * x)[:, :, None])
    rep = fields.measure_field_norms(f, 512)
    assert rep.c1_norm == pytest.approx(1.0, abs=1e-2)
    assert rep.w2inf_norm == pytest.approx(2.0, abs=1e-2)


def test_measure_field_norms_probe_floor():
    with pytest.raises(ValueError):
        fields.measure_field_norms(fields.ZeroField(1), 16)


def test_project_norm_ball_rescales():
    rng = _rng()
    net = fields.init_network((3, 8, 40, 4.0), d_in=2, d_out=1, rng=rng)
    f = fields.NetworkField(net)
    rep = fields.measure_field_norms(f, 256)
    if rep.w2inf_norm > 0.1:
        shrunk = fields.project_norm_ball(net, 0.1, rep)
        rep2 = fields.measure_field_norms(fields.NetworkField(shrunk), 256)
        assert rep2.w2inf_norm <= 0.1 + 1e-9

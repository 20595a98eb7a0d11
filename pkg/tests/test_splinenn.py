"""Quasi-interpolation onto B-spline spaces and compilation to power-ReLU nets."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cubeflow import splinenn
from cubeflow._bspline import basis_matrix
from cubeflow.fields import eval_network


def _sin(x):
    return np.sin(2 * np.pi * np.asarray(x).reshape(-1))


# ---------------------------------------------------------------- extension

def test_build_extension_k0():
    gammas, alphas = splinenn.build_extension(0, 3)
    assert alphas.shape == (1,)
    assert alphas[0] == pytest.approx(1.0)


@pytest.mark.parametrize("k,m", [(1, 3), (2, 3), (3, 4)])
def test_extension_vandermonde_identities(k, m):
    gammas, alphas = splinenn.build_extension(k, m)
    assert np.all((-1.0 / m < gammas) & (gammas < 0.0))
    assert np.all(np.diff(gammas) != 0)
    for r in range(k + 1):
        assert abs(np.sum(alphas * gammas ** r) - 1.0) < 1e-10, r


def test_extension_reproduces_polynomials():
    gammas, alphas = splinenn.build_extension(2, 4)
    f = lambda x: np.asarray(x).reshape(-1) ** 2
    xs = np.linspace(-0.1, 0.0, 31)[:, None]
    vals = splinenn.eval_extended(f, xs, gammas, alphas)
    assert np.max(np.abs(vals - xs[:, 0] ** 2)) < 1e-12


def test_extension_right_side_symmetric():
    gammas, alphas = splinenn.build_extension(1, 3)
    f = lambda x: 1.0 + 3.0 * np.asarray(x).reshape(-1)
    xs = np.linspace(1.0, 1.05, 11)[:, None]
    vals = splinenn.eval_extended(f, xs, gammas, alphas)
    assert np.max(np.abs(vals - (1.0 + 3.0 * xs[:, 0]))) < 1e-12


# ---------------------------------------------------------------- interpolation

def test_constant_reproduced():
    qi = splinenn.quasi_interpolate(lambda x: np.ones(len(np.atleast_2d(x))),
                                    3, 8, 2, 1)
    xs = splinenn.offknot_probes(8, 100, 1)
    assert np.max(np.abs(qi.evaluate(xs) - 1.0)) < 1e-10


def test_hat_interpolation_of_affine():
    qi = splinenn.quasi_interpolate(lambda x: np.atleast_2d(x)[:, 0], 2, 8, 1, 1)
    xs = splinenn.offknot_probes(8, 100, 1)
    assert np.max(np.abs(qi.evaluate(xs) - xs[:, 0])) < 1e-10


@pytest.mark.parametrize("m,n", [(3, 8), (4, 6)])
def test_spline_space_reproduction(m, n):
    # applying the operator to a member of the space returns its coefficients
    rng = np.random.default_rng(0)
    c = rng.normal(size=n + m - 1)
    f = lambda x: basis_matrix(m, n, np.asarray(x).reshape(-1)) @ c
    qi = splinenn.quasi_interpolate(f, m, n, m - 1, 1)
    assert np.max(np.abs(qi.coeffs - c)) < 1e-9


def test_spline_space_reproduction_2d():
    rng = np.random.default_rng(1)
    n, m = 5, 3
    c = rng.normal(size=(n + m - 1, n + m - 1))
    def f(x):
        x = np.atleast_2d(x)
        return np.einsum("ni,ij,nj->n", basis_matrix(m, n, x[:, 0]), c,
                         basis_matrix(m, n, x[:, 1]))
    qi = splinenn.quasi_interpolate(f, m, n, 2, 2)
    assert np.max(np.abs(qi.coeffs - c)) < 1e-9


def test_functional_boundedness():
    # coefficient magnitudes stay bounded by a fixed multiple of sup|f|
    worst = 0.0
    for n in [8, 16, 32, 64, 128]:
        qi = splinenn.quasi_interpolate(_sin, 3, n, 2, 1)
        worst = max(worst, np.max(np.abs(qi.coeffs)))
    assert worst <= 10.0


def test_order_requirement():
    with pytest.raises(splinenn.UnsupportedOrder):
        splinenn.quasi_interpolate(_sin, 3, 8, 3, 1)


def test_knot_probe_rejected():
    qi = splinenn.quasi_interpolate(_sin, 3, 8, 2, 1)
    with pytest.raises(splinenn.KnotProbe):
        splinenn.quasi_interp_error(_sin, qi, 0, np.array([[0.25]]))


def test_rate_slopes_match_theory():
    for k in [2, 3]:
        s0, s1 = splinenn.kink_rate_slopes(k)
        assert abs(s0 + k) < 0.3, (k, s0)
        assert abs(s1 + (k - 1)) < 0.3, (k, s1)


def test_commutation_with_derivative_2d():
    # coefficients of the x2-derivative equal the x2-derivative of coefficients
    f = lambda x: np.sin(np.atleast_2d(x)[:, 0]) * np.atleast_2d(x)[:, 1] ** 2
    df = lambda x: np.sin(np.atleast_2d(x)[:, 0]) * 2 * np.atleast_2d(x)[:, 1]
    qi_f = splinenn.quasi_interpolate(f, 3, 6, 2, 2)
    qi_df = splinenn.quasi_interpolate(df, 3, 6, 2, 2)
    xs = splinenn.offknot_probes(6, 80, 2)
    gap = qi_f.evaluate(xs, derivs=(0, 1)) - qi_df.evaluate(xs)
    # both sides approximate d f / d x2; they agree to approximation order
    assert np.max(np.abs(gap)) < 1e-2


# ---------------------------------------------------------------- compilation

def test_square_via_shifted_powers():
    # eta_2-combinations reproduce z^2 exactly on a bounded interval
    qi = splinenn.quasi_interpolate(_sin, 3, 4, 2, 1)
    net = splinenn.compile_to_network(qi)
    assert net.net.activation_power == 2


@pytest.mark.parametrize("m,n", [(3, 8), (4, 8), (5, 6)])
def test_compile_fidelity_1d(m, n):
    f = lambda x: np.exp(np.asarray(x).reshape(-1))
    qi = splinenn.quasi_interpolate(f, m, n, m - 1, 1)
    cn = splinenn.compile_to_network(qi)
    xs = splinenn.offknot_probes(n, 200, 1)
    assert np.max(np.abs(eval_network(cn.net, xs).ravel()
                         - qi.evaluate(xs))) < 1e-8


def test_compile_fidelity_2d():
    f = lambda x: np.exp(np.atleast_2d(x)[:, 0]) * (1 + np.atleast_2d(x)[:, 1])
    qi = splinenn.quasi_interpolate(f, 3, 5, 2, 2)
    cn = splinenn.compile_to_network(qi)
    xs = splinenn.offknot_probes(5, 150, 2)
    assert np.max(np.abs(eval_network(cn.net, xs).ravel()
                         - qi.evaluate(xs))) < 1e-8


def test_compile_rejects_low_order():
    qi = splinenn.quasi_interpolate(lambda x: np.atleast_2d(x)[:, 0], 2, 8, 1, 1)
    with pytest.raises(splinenn.UnsupportedOrder):
        splinenn.compile_to_network(qi)


def test_size_audit_growth_shapes():
    f = lambda x: np.exp(np.asarray(x).reshape(-1))
    stats = []
    for n in [8, 16, 32]:
        qi = splinenn.quasi_interpolate(f, 3, n, 2, 1)
        cn = splinenn.compile_to_network(qi)
        aud = splinenn.audit_against_bounds(cn, cn.f_sup, cn.N_sub)
        assert aud.passed
        a = cn.net.audit
        stats.append((a.depth, a.width, a.nonzeros, a.max_abs))
    depths = [s[0] for s in stats]
    assert len(set(depths)) == 1                      # L constant
    for col in [1, 2, 3]:                             # W, S, B linear-ish in n
        vals = [s[col] for s in stats]
        ratios = [vals[i + 1] / vals[i] for i in range(2)]
        assert all(1.5 < r < 2.5 for r in ratios), (col, vals)

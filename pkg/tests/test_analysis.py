"""Hellinger distances, inequality audits, and convergence-rate bookkeeping."""

import numpy as np
import pytest

from cubeflow import analysis, core


def test_hellinger_known_pair():
    # p = 1, q = 0.5 + x: h^2 = integral (1 - sqrt(0.5 + x))^2 dx
    p = lambda x: np.ones(len(np.atleast_2d(x)))
    q = lambda x: 0.5 + np.atleast_2d(x)[:, 0]
    est = analysis.hellinger(p, q, core.default_grid(1), 1)
    xs = np.linspace(0, 1, 200001)
    exact = np.sqrt(np.trapezoid((1 - np.sqrt(0.5 + xs)) ** 2, xs))
    assert est.method == "quadrature"
    assert abs(est.value - exact) < 1e-6


def test_hellinger_identical_is_zero():
    p = core.make_density("cosine1d")
    est = analysis.hellinger(p, p, core.default_grid(1), 1)
    assert est.value == 0.0


def test_hellinger_mc_agrees_with_quadrature():
    p = lambda x: np.ones(len(np.atleast_2d(x)))
    q = lambda x: 0.5 + np.atleast_2d(x)[:, 0]
    quad = analysis.hellinger(p, q, core.default_grid(1), 1)
    mc = analysis.hellinger_mc(p, q, core.RngStream(0), 200000, 1)
    assert mc.method == "monte_carlo"
    assert mc.standard_error > 0
    assert abs(mc.value - quad.value) < 5 * mc.standard_error + 1e-3


def test_negative_density_rejected():
    p = lambda x: np.ones(len(np.atleast_2d(x)))
    q = lambda x: np.atleast_2d(x)[:, 0] - 0.5
    with pytest.raises(analysis.NegativeDensity):
        analysis.hellinger(p, q, core.default_grid(1), 1)
    with pytest.raises(analysis.NegativeDensity):
        analysis.hellinger_mc(p, q, core.RngStream(1), 100, 1)


def test_linf_density_gap():
    p = lambda x: np.atleast_2d(x)[:, 0]
    q = lambda x: np.atleast_2d(x)[:, 0] ** 2
    probes = np.linspace(0, 1, 101)[:, None]
    assert analysis.linf_density_gap(p, q, probes) == pytest.approx(0.25)


def test_ck_rate_exponent_window():
    # k=4, d=1: gamma in (0, 2); eta = 2(3-gamma)/(2(3-gamma)+2)
    val = analysis.ck_rate_exponent(4, 1, 1.0)
    assert val == pytest.approx(4.0 / 6.0)
    with pytest.raises(analysis.HypothesisViolated):
        analysis.ck_rate_exponent(4, 1, 2.0)
    with pytest.raises(analysis.HypothesisViolated):
        analysis.ck_rate_exponent(2, 2, 0.1)


def test_nn_rate_exponent_k2_d1():
    assert analysis.nn_rate_exponent(2, 1) == pytest.approx(0.5)


def test_halton_probes_deterministic():
    a = analysis.halton_probes(2, 50)
    b = analysis.halton_probes(2, 50)
    assert np.array_equal(a, b)
    assert a.shape == (50, 2) and np.all((a >= 0) & (a < 1))


def test_bound_suite_small_corpus():
    report = analysis.run_bound_suite(
        densities=[core.make_density("affine1d")], n_probe=32)
    assert report.passed
    names = {r.inequality for r in report.rows}
    assert {"singular_values", "flow_lipschitz", "singular_values_upper",
            "singular_values_lower", "pullback_lower", "pullback_upper",
            "linf_stability"} <= names
    for r in report.rows:
        assert r.passed and r.margin >= -1e-9
    # report serializations are stable and well formed
    import json
    parsed = json.loads(report.to_json())
    assert parsed["passed"] is True
    assert "inequality" in report.table()


def test_rate_experiment_serialization_round_trip():
    exp = analysis.RateExperiment(target="affine1d", n_grid=[8, 16],
                                  replicates=2, seed=0)
    exp.h2 = [[0.5, 0.4], [0.25, 0.2]]
    csv = exp.cells_csv()
    assert csv.splitlines()[0] == "n,replicate,h2"
    assert "8,0,0.5" in csv
    import json
    parsed = json.loads(exp.to_json())
    assert parsed["n_grid"] == [8, 16]

"""End-to-end acceptance suite.

One test per shipped guarantee, each with its stated tolerance and wall-clock
budget, so `pytest -v tests/test_acceptance.py` reads as a checklist:

1. triangular-map exactness on the corpus
2. straight-line flow realizes the map
3. exact-coupling pullback recovers the target density
4. theorem-backed inequality suite
5. training-gradient exactness against finite differences
6. quasi-interpolation convergence rates
7. spline-to-network compile fidelity and size growth
8. statistical convergence rate of the spline estimator
9. byte-determinism of the command line across thread counts
"""

import json
import math
import time

import numpy as np
import pytest

from cubeflow import analysis, cli, core, fields, flow, mle, splinenn, transport
from cubeflow.flow import FlowConfig


def _corpus():
    return core.corpus_densities(max_dim=2)


def _kr(p0):
    return transport.build_kr_map(p0, core.uniform_density(p0.dim))


def test_criterion_1_kr_exactness():
    t0 = time.perf_counter()
    for p0 in _corpus():
        T = _kr(p0)
        res = transport.kr_pushforward_residual(
            T, p0, core.uniform_density(p0.dim), core.default_grid(p0.dim))
        assert res <= 1e-5, (p0.name, res)
        pts = core.RngStream(0).uniform(200, p0.dim)
        inv = np.max(np.abs(T.inverse(T.forward(pts)) - pts))
        assert inv <= 1e-9, (p0.name, inv)
    assert time.perf_counter() - t0 <= 30.0


def test_criterion_2_straight_line_realization():
    t0 = time.perf_counter()
    cfg = FlowConfig(n_steps=64, jacobian_mode="none")
    for p0 in _corpus():
        T = _kr(p0)
        f = transport.straight_line_field(T)
        probes = analysis.halton_probes(p0.dim, 500)
        terminal = flow.integrate_flow(f, probes, cfg=cfg).terminal
        gap = np.max(np.abs(terminal - T.forward(probes)))
        assert gap <= 1e-6, (p0.name, gap)
    assert time.perf_counter() - t0 <= 60.0


def test_criterion_3_exact_coupling_pullback():
    t0 = time.perf_counter()
    cfg = FlowConfig(n_steps=64, jacobian_mode="logdet_trace")
    for p0 in [core.make_density("affine1d"), core.make_density("cross2d")]:
        ref = core.uniform_density(p0.dim)
        f = transport.straight_line_field(_kr(p0))
        probes = analysis.halton_probes(p0.dim, 200)
        vals = flow.pullback_density(f, ref, probes, cfg)
        sup = np.max(np.abs(vals - p0(probes)))
        assert sup <= 1e-5, (p0.name, sup)
        grid = core.QuadratureGrid(nodes_per_axis=16)
        pts, wts = core.tensor_nodes(grid, p0.dim)
        mass = float(wts @ flow.pullback_density(f, ref, pts, cfg))
        assert abs(mass - 1.0) <= 1e-5, (p0.name, mass)
    assert time.perf_counter() - t0 <= 60.0


def test_criterion_4_bound_suite():
    t0 = time.perf_counter()
    report = analysis.run_bound_suite()
    assert report.passed, report.table()
    # the flow-Lipschitz constant rows use C = max{e^{dr},(re^{3dr}+2de^{2dr})/(2sqrt(d) r)}
    assert flow.lipschitz_constant(1, 1.0) == pytest.approx(
        (math.e ** 3 + 2 * math.e ** 2) / 2.0)
    assert time.perf_counter() - t0 <= 120.0


def _directional_fd_check(model, d, rel_tol):
    rng = core.RngStream(42)
    data = mle.Dataset(points=core.RngStream(7).uniform(32, d), source="fd")
    rho = core.uniform_density(d)
    cfg = FlowConfig(n_steps=16, jacobian_mode="logdet_trace")
    g = mle.gradient(model, data, rho, cfg)
    theta = model.flatten(model.params)
    if model.kind == "network":
        mask = model.flatten([(mw * 1.0, mb * 1.0) for mw, mb in model.masks])
    else:
        mask = np.ones_like(theta)
    direction = rng.normal(theta.shape) * mask
    direction /= np.linalg.norm(direction)
    h = 1e-5
    up = mle.objective(model.with_params(model.unflatten(theta + h * direction)),
                       data, rho, cfg)
    dn = mle.objective(model.with_params(model.unflatten(theta - h * direction)),
                       data, rho, cfg)
    fd = (up - dn) / (2 * h)
    rel = abs(fd - g @ direction) / max(abs(g @ direction), 1e-12)
    assert rel <= rel_tol, rel


def test_criterion_5_gradient_exactness():
    t0 = time.perf_counter()
    for d in [1, 2]:
        rng = core.RngStream(d)
        spline = mle.SplineModel(d, m=3, n_res=3)
        spline = spline.with_params(0.3 * rng.normal(spline.params.shape))
        _directional_fd_check(spline, d, 1e-4)
        net = fields.init_network((3, 8, 60, 3.0), d_in=d + 1, d_out=d, rng=rng)
        _directional_fd_check(mle.NetworkModel(net), d, 1e-4)
    assert time.perf_counter() - t0 <= 60.0


def test_criterion_6_spline_rates():
    t0 = time.perf_counter()
    for k in [2, 3]:
        s0, s1 = splinenn.kink_rate_slopes(k, ns=(8, 16, 32, 64))
        assert abs(s0 - (-k)) <= 0.3, (k, s0)
        assert abs(s1 - (-(k - 1))) <= 0.3, (k, s1)
    assert time.perf_counter() - t0 <= 120.0


def test_criterion_7_compile_fidelity_and_growth():
    t0 = time.perf_counter()
    f = lambda x: np.exp(np.asarray(x).reshape(-1))
    stats = []
    for n in [8, 16, 32]:
        qi = splinenn.quasi_interpolate(f, 3, n, 2, d=1)
        cn = splinenn.compile_to_network(qi)
        xs = splinenn.offknot_probes(n, 200, 1)
        gap = np.max(np.abs(fields.eval_network(cn.net, xs).ravel()
                            - qi.evaluate(xs)))
        assert gap <= 1e-8, (n, gap)
        aud = splinenn.audit_against_bounds(cn, cn.f_sup, cn.N_sub)
        assert aud.passed
        a = cn.net.audit
        stats.append((a.depth, a.width, a.nonzeros, a.max_abs))
    assert len({s[0] for s in stats}) == 1          # L constant in n
    for col in [1, 2, 3]:                           # W, S, B linear in n
        vals = [s[col] for s in stats]
        for i in range(2):
            assert 1.5 < vals[i + 1] / vals[i] < 2.5, (col, vals)
    assert time.perf_counter() - t0 <= 60.0


def test_criterion_8_statistical_rate():
    t0 = time.perf_counter()
    exp = analysis.RateExperiment(target="affine1d",
                                  n_grid=[250, 500, 1000, 2000],
                                  replicates=5, seed=0)
    exp = analysis.rate_experiment(exp)
    means = exp.mean_h2
    assert all(a > b for a, b in zip(means, means[1:])), means
    assert abs(exp.slope - (-0.5)) <= 0.2, (exp.slope, exp.slope_band)
    assert time.perf_counter() - t0 <= 900.0


def _run_cli(tmp_path, command, cfg, seed, threads, sub):
    cfg_path = tmp_path / f"{sub}.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = cli.main([command, "--config", str(cfg_path), "--out",
                   str(tmp_path / sub), "--seed", str(seed),
                   "--threads", str(threads)])
    assert rc == 0, (command, rc)
    out = {}
    for p in sorted((tmp_path / sub).iterdir()):
        out[p.name] = p.read_bytes()
    return out


def _strip_timing(name, blob):
    if name == "trace.csv":
        return b"\n".join(line.rsplit(b",", 1)[0]
                          for line in blob.splitlines())
    return blob


def test_criterion_9_byte_determinism(tmp_path):
    cases = {
        "kr": {"density": {"name": "cross2d"}},
        "fit": {"density": {"name": "affine1d"}, "n_samples": 60,
                "field": {"kind": "spline", "m": 3, "n_res": 3},
                "train": {"iterations": 5, "step_size": 0.05,
                          "norm_ball_r": 4.0},
                "flow_steps": 16},
        "rate": {"target": "affine1d", "n_grid": [20, 40], "replicates": 3,
                 "iterations": 5, "resolution_scale": 1.0, "flow_steps": 16},
        "verify": {"n_probe": 16},
        "spline": {"m": 3, "k": 2, "n_grid": [8, 16], "function": "kink2",
                   "compile": True},
        "sample": {"density": {"name": "cosine1d"}, "n": 50},
        "eval": {"density": {"name": "affine1d"}, "grid_points": 11},
    }
    for command, cfg in cases.items():
        a = _run_cli(tmp_path, command, cfg, seed=0, threads=1,
                     sub=f"{command}_t1")
        b = _run_cli(tmp_path, command, cfg, seed=0, threads=4,
                     sub=f"{command}_t4")
        assert set(a) == set(b), command
        for name in a:
            assert _strip_timing(name, a[name]) == _strip_timing(name, b[name]), \
                (command, name)

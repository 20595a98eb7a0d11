"""Density distances, theorem-backed inequality audits, and rate experiments.

Hellinger convention: h(p,q) = ( integral (sqrt p - sqrt q)^2 )^{1/2}, with no
factor 1/2. Checks that rest on the auxiliary sup-norm lemma translate to its
local 1/2 convention explicitly where used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.stats import qmc

from .core import (AnalyticDensity, QuadratureGrid, RngStream, default_grid,
                   make_density, tensor_nodes)
from .fields import VelocityField, logistic_field, measure_field_norms, ZeroField
from .flow import (FlowConfig, flow_lipschitz_audit, integrate_flow,
                   lipschitz_constant, pullback_density, singular_value_audit)
from .mle import Dataset, SplineModel, TrainConfig, fit
from .transport import build_kr_map, straight_line_field


class NegativeDensity(Exception):
    pass


class HypothesisViolated(Exception):
    pass


@dataclass
class HellingerEstimate:
    value: float
    method: str                      # quadrature | monte_carlo
    standard_error: float = 0.0


def hellinger(p: Callable, q: Callable, grid: QuadratureGrid,
              dim: int) -> HellingerEstimate:
    """Quadrature Hellinger distance between two densities on the cube.

    p and q take (N,dim) arrays and return (N,) values."""
    pts, wts = tensor_nodes(grid, dim)
    pv = np.asarray(p(pts), dtype=float).reshape(-1)
    qv = np.asarray(q(pts), dtype=float).reshape(-1)
    if np.any(pv < 0) or np.any(qv < 0):
        raise NegativeDensity("density negative at a quadrature node")
    h2 = float(np.dot(wts, (np.sqrt(pv) - np.sqrt(qv)) ** 2))
    return HellingerEstimate(value=math.sqrt(max(h2, 0.0)), method="quadrature")


def hellinger_mc(p: Callable, q: Callable, rng: RngStream, n: int,
                 dim: int) -> HellingerEstimate:
    pts = rng.uniform(n, dim)
    pv = np.asarray(p(pts), dtype=float).reshape(-1)
    qv = np.asarray(q(pts), dtype=float).reshape(-1)
    if np.any(pv < 0) or np.any(qv < 0):
        raise NegativeDensity("density negative at a sample point")
    sq = (np.sqrt(pv) - np.sqrt(qv)) ** 2
    h2 = float(np.mean(sq))
    se_h2 = float(np.std(sq, ddof=1) / math.sqrt(n))
    h = math.sqrt(max(h2, 0.0))
    se = se_h2 / (2 * h) if h > 0 else se_h2
    return HellingerEstimate(value=h, method="monte_carlo", standard_error=se)


def linf_density_gap(p: Callable, q: Callable, probes: np.ndarray) -> float:
    """Empirical sup of |p - q| over a probe set (N,dim)."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    return float(np.max(np.abs(np.asarray(p(probes)) - np.asarray(q(probes)))))


def halton_probes(dim: int, count: int) -> np.ndarray:
    return qmc.Halton(d=dim, scramble=False).random(count)


def ck_rate_exponent(k: int, d: int, gamma: float) -> float:
    """eta = 2(k-1-gamma) / (2(k-1-gamma) + d + 1) under 0 < gamma < k - d/2 - 3/2."""
    limit = k - d / 2.0 - 1.5
    if limit <= 0 or not (0.0 < gamma < limit):
        raise HypothesisViolated(
            f"gamma must lie in (0, {limit}); got {gamma} for k={k}, d={d}")
    a = 2.0 * (k - 1 - gamma)
    return a / (a + d + 1)


def nn_rate_exponent(k: int, d: int) -> float:
    return 2.0 * (k - 1) / (d + 1 + 2 * (k - 1))


# ----------------------------------------------------------------------
# Bound suite
# ----------------------------------------------------------------------

@dataclass
class BoundRow:
    inequality: str
    subject: str
    lhs: float
    rhs: float
    margin: float
    passed: bool


@dataclass
class BoundSuiteReport:
    rows: List[BoundRow]
    passed: bool

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed,
                           "rows": [asdict(r) for r in self.rows]}, sort_keys=True,
                          indent=2)

    def table(self) -> str:
        lines = [f"{'inequality':<28} {'subject':<22} {'lhs':>12} {'rhs':>12} {'pass':>5}"]
        for r in self.rows:
            lines.append(f"{r.inequality:<28} {r.subject:<22} "
                         f"{r.lhs:12.5g} {r.rhs:12.5g} {str(r.passed):>5}")
        return "\n".join(lines)


def _stability_constant(sv_t: np.ndarray, sv_g: np.ndarray) -> float:
    """C~ = sup_x exp(sum |l_i - e_i| / l_d) * prod l_i / min{l_d, e_d},
    evaluated per probe from the two maps' singular values and maximized."""
    ld = sv_t[:, -1]
    ed = sv_g[:, -1]
    expo = np.exp(np.sum(np.abs(sv_t - sv_g), axis=1) / ld)
    val = expo * np.prod(sv_t, axis=1) / np.minimum(ld, ed)
    return float(np.max(val))


def run_bound_suite(densities: Optional[List[AnalyticDensity]] = None,
                    cfg: Optional[FlowConfig] = None,
                    n_probe: int = 128) -> BoundSuiteReport:
    """One pass/fail row per theorem-backed inequality on the corpus."""
    from .core import corpus_densities, uniform_density

    if cfg is None:
        # straight-line trajectories are integrated exactly at any step
        # count, so a moderate grid keeps the full suite fast
        cfg = FlowConfig(n_steps=32)
    if densities is None:
        densities = corpus_densities(max_dim=2)
    rows: List[BoundRow] = []
    full = FlowConfig(cfg.n_steps, cfg.clamp_tol, "full_matrix")

    # zero-field sanity row
    zf = ZeroField(1)
    sv0 = singular_value_audit(zf, 0.0, 32, full)
    rows.append(BoundRow("singular_values", "zero field", sv0.observed_max_sv,
                         sv0.upper_bound, sv0.upper_bound - sv0.observed_max_sv,
                         sv0.passed))

    # flow-map Lipschitz on the logistic pair (closed-form fields, d=1, r=1)
    f1, f2 = logistic_field(1.0), logistic_field(1.1)
    lip = flow_lipschitz_audit(f1, f2, r=1.0, n_probe=n_probe, cfg=cfg)
    rows.append(BoundRow("flow_lipschitz", "logistic c=1.0 vs 1.1",
                         lip.ratio, lip.constant, lip.constant - lip.ratio,
                         lip.passed))

    for p0 in densities:
        d = p0.dim
        ref = uniform_density(d)
        T = build_kr_map(p0, ref)
        fd = straight_line_field(T)
        name = p0.name

        norms = measure_field_norms(fd, 512)
        M = norms.c1_norm * 1.05            # small headroom over the empirical sup

        # one full-matrix integration feeds the sv, pullback and stability rows
        probes = halton_probes(d, n_probe)
        rt = integrate_flow(fd, probes, 0.0, 1.0, full)
        sv_t = np.linalg.svd(rt.jacobian, compute_uv=False)
        bound = 1.0 + d * M * math.exp(d * M)
        sv_hi, sv_lo = float(np.max(sv_t)), float(np.min(sv_t))
        rows.append(BoundRow("singular_values_upper", name, sv_hi,
                             bound, bound - sv_hi, sv_hi <= bound + 1e-9))
        rows.append(BoundRow("singular_values_lower", name, sv_lo,
                             1.0 / bound, sv_lo - 1.0 / bound,
                             sv_lo >= 1.0 / bound - 1e-9))

        # pullback lower/upper bounds from kappa, K and the sv theorem
        pb = ref(rt.terminal) * np.exp(rt.logdet)
        lower = ref.lower_bound * bound ** (-d)
        upper = ref.upper_bound * bound ** d
        rows.append(BoundRow("pullback_lower", name, float(np.min(pb)), lower,
                             float(np.min(pb)) - lower, float(np.min(pb)) >= lower - 1e-9))
        rows.append(BoundRow("pullback_upper", name, float(np.max(pb)), upper,
                             upper - float(np.max(pb)), float(np.max(pb)) <= upper + 1e-9))

        # L-infinity density stability between T^f and a perturbed flow map
        class _Scaled(VelocityField):
            def __init__(self, inner, s):
                self.inner, self.s, self.dim = inner, s, inner.dim

            def value(self, x, t):
                return self.s * self.inner.value(x, t)

            def jacobian(self, x, t):
                return self.s * self.inner.jacobian(x, t)

        g = _Scaled(fd, 0.95)
        rg = integrate_flow(g, probes, 0.0, 1.0, full)
        pb_t = pb
        pb_g = ref(rg.terminal) * np.exp(rg.logdet)
        lhs = float(np.max(np.abs(pb_t - pb_g)))
        map_gap = max(float(np.max(np.abs(rt.terminal - rg.terminal))),
                      float(np.max(np.abs(rt.jacobian - rg.jacobian))))
        t_c1 = max(1.0, float(np.max(np.abs(rt.jacobian))),
                   float(np.max(np.abs(rt.terminal))))
        sv_g = np.linalg.svd(rg.jacobian, compute_uv=False)
        c_tilde = _stability_constant(sv_t, sv_g)
        rho_lip = float(np.max(np.abs(ref.grad(halton_probes(d, 256))))) * math.sqrt(d)
        rho_sup = ref.upper_bound
        rhs = map_gap * (rho_lip * t_c1 ** d + c_tilde * d ** 2 * rho_sup)
        rows.append(BoundRow("linf_stability", name, lhs, rhs, rhs - lhs,
                             lhs <= rhs + 1e-9))

    return BoundSuiteReport(rows=rows, passed=all(r.passed for r in rows))


# ----------------------------------------------------------------------
# Rate experiments
# ----------------------------------------------------------------------

@dataclass
class RateExperiment:
    target: str
    n_grid: List[int]
    replicates: int
    seed: int
    spline_m: int = 3
    resolution_scale: float = 0.5        # n_res = ceil(scale * n^power)
    resolution_power: float = 0.5        # sieve size ~ n^{(d+1)/(d+1+2(k-1))}
    iterations: int = 100
    step_size: float = 0.05
    norm_ball_r: float = 256.0           # large enough that the ball never binds
    flow_steps: int = 16
    time_constant: bool = True           # autonomous fields: no gauge freedom
    optimizer: str = "lbfgs"
    h2: Optional[List[List[float]]] = None       # per n, per replicate
    mean_h2: Optional[List[float]] = None
    slope: Optional[float] = None
    slope_band: Optional[List[float]] = None     # bootstrap 5/95 percentiles

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def cells_csv(self) -> str:
        lines = ["n,replicate,h2"]
        for n, reps in zip(self.n_grid, self.h2):
            for r, v in enumerate(reps):
                lines.append(f"{n},{r},{float(v)!r}")
        return "\n".join(lines) + "\n"


def _fit_one_cell(p0, kr, n: int, rep: int, exp: RateExperiment):
    from .core import uniform_density

    d = p0.dim
    rng = RngStream(exp.seed, stream_id=100000 * n + rep)
    u = rng.uniform(n, d)
    samples = kr.inverse(u)             # inverse-KR pushforward of uniform draws
    data = Dataset(samples, source=f"{p0.name}/seed={exp.seed}/n={n}/rep={rep}")
    n_res = max(2, math.ceil(exp.resolution_scale * n ** exp.resolution_power))
    model = SplineModel(d, m=exp.spline_m, n_res=n_res,
                        time_constant=exp.time_constant)
    ref = uniform_density(d)
    tcfg = TrainConfig(step_size=exp.step_size, iterations=exp.iterations,
                       norm_ball_r=exp.norm_ball_r, seed=exp.seed,
                       optimizer=exp.optimizer,
                       flow=FlowConfig(n_steps=exp.flow_steps,
                                       jacobian_mode="logdet_trace"))
    fitted, _ = fit(model, data, ref, tcfg)
    grid = default_grid(d)
    fcfg = FlowConfig(n_steps=exp.flow_steps, jacobian_mode="logdet_trace")
    est = lambda x: pullback_density(fitted.numpy_field(), ref, x, fcfg)
    h = hellinger(p0, est, grid, d)
    return h.value ** 2


def rate_experiment(exp: RateExperiment) -> RateExperiment:
    """Fill a rate-experiment spec: sample, fit, measure h^2, fit the slope."""
    p0 = make_density(exp.target)
    from .core import uniform_density
    kr = build_kr_map(p0, uniform_density(p0.dim))
    h2 = []
    for n in exp.n_grid:
        cells = []
        for rep in range(exp.replicates):
            cells.append(_fit_one_cell(p0, kr, n, rep, exp))
        h2.append(cells)
    exp.h2 = h2
    means = np.array([np.mean(c) for c in h2])
    exp.mean_h2 = means.tolist()
    logn = np.log(np.asarray(exp.n_grid, dtype=float))
    A = np.vstack([logn, np.ones_like(logn)]).T
    coef, *_ = np.linalg.lstsq(A, np.log(means), rcond=None)
    exp.slope = float(coef[0])

    # replicate bootstrap for a confidence band on the slope
    rng = np.random.Generator(np.random.Philox(key=[exp.seed, 987654321]))
    slopes = []
    arr = [np.asarray(c) for c in h2]
    for _ in range(200):
        bmeans = np.array([np.mean(rng.choice(c, size=c.size, replace=True))
                           for c in arr])
        bc, *_ = np.linalg.lstsq(A, np.log(bmeans), rcond=None)
        slopes.append(bc[0])
    exp.slope_band = [float(np.percentile(slopes, 5)),
                      float(np.percentile(slopes, 95))]
    return exp

"""Fixed-step flow-map integration for admissible velocity fields.

Classical RK4 on dX/dt = f(X,t), with the Jacobian of the time-one map
propagated alongside by the variational equation dJ/dt = grad_x f(X,t) J
(full_matrix mode) or its trace reduced to d(log det)/dt = tr grad_x f
(logdet_trace mode). Both use the same RK4 stages as the state, so the
reported Jacobian is exact for the discretized flow.

Trajectories of admissible fields stay in the cube; tiny numerical
excursions are projected back, large ones raise TrajectoryEscaped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import qmc

from .core import AnalyticDensity
from .fields import VelocityField


class TrajectoryEscaped(Exception):
    """A trajectory left the cube by far more than the clamp tolerance."""


@dataclass(frozen=True)
class FlowConfig:
    n_steps: int = 64
    clamp_tol: float = 1e-10
    jacobian_mode: str = "full_matrix"   # full_matrix | logdet_trace | none
    save_trajectory: bool = False

    def __post_init__(self):
        if self.n_steps < 8:
            raise ValueError("n_steps must be >= 8")
        if self.clamp_tol > 1e-8:
            raise ValueError("clamp_tol must be <= 1e-8")
        if self.jacobian_mode not in ("full_matrix", "logdet_trace", "none"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")


@dataclass
class FlowResult:
    terminal: np.ndarray                       # (N, d)
    logdet: Optional[np.ndarray] = None        # (N,)
    jacobian: Optional[np.ndarray] = None      # (N, d, d)
    trajectory: Optional[List[Tuple[float, np.ndarray]]] = None
    max_clamp: float = 0.0


def _clip_eval(x):
    return np.clip(x, 0.0, 1.0)


def integrate_flow(f: VelocityField, x: np.ndarray, t0: float = 0.0,
                   t1: float = 1.0, cfg: FlowConfig = FlowConfig()) -> FlowResult:
    """RK4 flow of a batch of initial conditions from t0 to t1."""
    if not (0.0 <= t0 <= t1 <= 1.0):
        raise ValueError("need 0 <= t0 <= t1 <= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    n, d = x.shape
    h = (t1 - t0) / cfg.n_steps
    mode = cfg.jacobian_mode
    jac = np.broadcast_to(np.eye(d), (n, d, d)).copy() if mode == "full_matrix" else None
    logdet = np.zeros(n) if mode in ("full_matrix", "logdet_trace") else None
    traj = [(t0, x.copy())] if cfg.save_trajectory else None
    max_clamp = 0.0
    escape_limit = 100.0 * cfg.clamp_tol

    for step in range(cfg.n_steps):
        t = t0 + step * h
        k1 = f.value(_clip_eval(x), t)
        k2 = f.value(_clip_eval(x + 0.5 * h * k1), t + 0.5 * h)
        k3 = f.value(_clip_eval(x + 0.5 * h * k2), t + 0.5 * h)
        k4 = f.value(_clip_eval(x + h * k3), t + h)

        if mode == "full_matrix":
            a1 = f.jacobian(_clip_eval(x), t)
            a2 = f.jacobian(_clip_eval(x + 0.5 * h * k1), t + 0.5 * h)
            a3 = f.jacobian(_clip_eval(x + 0.5 * h * k2), t + 0.5 * h)
            a4 = f.jacobian(_clip_eval(x + h * k3), t + h)
            j1 = a1 @ jac
            j2 = a2 @ (jac + 0.5 * h * j1)
            j3 = a3 @ (jac + 0.5 * h * j2)
            j4 = a4 @ (jac + h * j3)
            jac = jac + (h / 6.0) * (j1 + 2 * j2 + 2 * j3 + j4)
        elif mode == "logdet_trace":
            tr = np.trace
            a1 = f.jacobian(_clip_eval(x), t)
            a2 = f.jacobian(_clip_eval(x + 0.5 * h * k1), t + 0.5 * h)
            a3 = f.jacobian(_clip_eval(x + 0.5 * h * k2), t + 0.5 * h)
            a4 = f.jacobian(_clip_eval(x + h * k3), t + h)
            l1 = tr(a1, axis1=1, axis2=2)
            l2 = tr(a2, axis1=1, axis2=2)
            l3 = tr(a3, axis1=1, axis2=2)
            l4 = tr(a4, axis1=1, axis2=2)
            logdet = logdet + (h / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4)

        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

        excursion = np.maximum(np.maximum(-x, x - 1.0), 0.0)
        worst = float(np.max(excursion)) if excursion.size else 0.0
        if worst > escape_limit:
            raise TrajectoryEscaped(
                f"coordinate left the cube by {worst:.3e} at t={t + h:.4f}")
        if worst > 0.0:
            max_clamp = max(max_clamp, worst)
            x = np.clip(x, 0.0, 1.0)
        if cfg.save_trajectory:
            traj.append((t + h, x.copy()))

    if mode == "full_matrix":
        sign, ld = np.linalg.slogdet(jac)
        if np.any(sign <= 0):
            raise TrajectoryEscaped("flow Jacobian lost positivity")
        logdet = ld
    return FlowResult(terminal=x, logdet=logdet, jacobian=jac,
                      trajectory=traj, max_clamp=max_clamp)


class _ReversedField(VelocityField):
    def __init__(self, f: VelocityField):
        self.f = f
        self.dim = f.dim

    def value(self, x, t):
        return -self.f.value(x, 1.0 - np.asarray(t, dtype=float))

    def jacobian(self, x, t):
        return -self.f.jacobian(x, 1.0 - np.asarray(t, dtype=float))


def inverse_flow(f: VelocityField, y: np.ndarray,
                 cfg: FlowConfig = FlowConfig()) -> FlowResult:
    """(T^f)^{-1}(y) by integrating the time-reversed field from y."""
    return integrate_flow(_ReversedField(f), y, 0.0, 1.0, cfg)


def pullback_density(f: VelocityField, rho: AnalyticDensity, x: np.ndarray,
                     cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """(T^f)^# rho (x) = rho(T^f(x)) * det grad T^f(x), vectorized over x."""
    use = cfg if cfg.jacobian_mode != "none" else \
        FlowConfig(cfg.n_steps, cfg.clamp_tol, "logdet_trace")
    res = integrate_flow(f, x, 0.0, 1.0, use)
    return rho(res.terminal) * np.exp(res.logdet)


def _halton_cube(dim: int, count: int) -> np.ndarray:
    sampler = qmc.Halton(d=dim, scramble=False)
    return sampler.random(count)


@dataclass
class SvAuditReport:
    observed_max_sv: float
    observed_min_sv: float
    upper_bound: float
    lower_bound: float
    passed: bool


def singular_value_audit(f: VelocityField, M: float, n_probe: int = 128,
                         cfg: FlowConfig = FlowConfig()) -> SvAuditReport:
    """Check sup sv_1 <= 1 + d M e^{dM} and inf sv_d >= its reciprocal."""
    d = f.dim
    x = _halton_cube(d, n_probe)
    res = integrate_flow(f, x, 0.0, 1.0,
                         FlowConfig(cfg.n_steps, cfg.clamp_tol, "full_matrix"))
    sv = np.linalg.svd(res.jacobian, compute_uv=False)
    bound = 1.0 + d * M * math.exp(d * M)
    hi, lo = float(np.max(sv)), float(np.min(sv))
    tol = 1e-9
    return SvAuditReport(hi, lo, bound, 1.0 / bound,
                         passed=(hi <= bound + tol) and (lo >= 1.0 / bound - tol))


def lipschitz_constant(d: int, r: float) -> float:
    """The flow-map Lipschitz constant max{e^{dr}, (r e^{3dr}+2d e^{2dr})/(2 sqrt(d) r)}."""
    return max(math.exp(d * r),
               (r * math.exp(3 * d * r) + 2 * d * math.exp(2 * d * r))
               / (2.0 * math.sqrt(d) * r))


@dataclass
class LipAuditReport:
    map_c1_gap: float
    field_c1_gap: float
    ratio: float
    constant: float
    passed: bool


def _field_c1_gap(f: VelocityField, g: VelocityField, n_probe: int) -> float:
    """Empirical C1(Omega) distance between two fields (values, space and
    time derivatives), maximized over a low-discrepancy probe set."""
    d = f.dim
    pts = _halton_cube(d + 1, n_probe)
    pts = 1e-6 + (1 - 2e-6) * pts
    x, t = pts[:, :d], pts[:, d]
    gap = float(np.max(np.abs(f.value(x, t) - g.value(x, t))))
    gap = max(gap, float(np.max(np.abs(f.jacobian(x, t) - g.jacobian(x, t)))))
    h = 1e-4
    tp, tm = np.minimum(t + h, 1.0), np.maximum(t - h, 0.0)
    dtf = (f.value(x, tp) - f.value(x, tm)) / (tp - tm)[:, None]
    dtg = (g.value(x, tp) - g.value(x, tm)) / (tp - tm)[:, None]
    return max(gap, float(np.max(np.abs(dtf - dtg))))


def flow_lipschitz_audit(f: VelocityField, g: VelocityField, r: float,
                         n_probe: int = 128,
                         cfg: FlowConfig = FlowConfig()) -> LipAuditReport:
    """Empirically test ||T^f - T^g||_C1 <= C ||f - g||_C1(Omega)."""
    d = f.dim
    x = _halton_cube(d, n_probe)
    full = FlowConfig(cfg.n_steps, cfg.clamp_tol, "full_matrix")
    rf = integrate_flow(f, x, 0.0, 1.0, full)
    rg = integrate_flow(g, x, 0.0, 1.0, full)
    lhs = max(float(np.max(np.abs(rf.terminal - rg.terminal))),
              float(np.max(np.abs(rf.jacobian - rg.jacobian))))
    rhs = _field_c1_gap(f, g, max(n_probe, 512))
    C = lipschitz_constant(d, r)
    if rhs == 0.0:
        ratio = 0.0
        passed = lhs <= 1e-12
    else:
        ratio = lhs / rhs
        passed = ratio <= C + 1e-9
    return LipAuditReport(lhs, rhs, ratio, C, passed)

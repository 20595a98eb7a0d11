"""Maximum-likelihood training of parameterized velocity fields.

The objective is J(f) = sum_i [ log rho(T^f(Z_i)) + log det grad T^f(Z_i) ],
with the flow discretized by the same fixed-step RK4 as the flow module.
Gradients are discrete adjoints: reverse-mode differentiation through every
RK4 stage of the state and log-determinant recursions, so they are exact for
the objective actually optimized and finite-difference checks are sharp.

Two trainable families are provided, both wrapped in the boundary cutoff so
admissibility is structural rather than learned: tensor-product spline fields
(linear in their coefficients) and power-ReLU networks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from math import ceil
from typing import List, Optional, Tuple

import numpy as np

import jax
import jax.numpy as jnp
from jax import config as _jax_config

_jax_config.update("jax_enable_x64", True)

from . import _bspline
from .core import AnalyticDensity, RngStream
from .fields import (CutoffField, NetworkSpec, NetworkField, SplineField,
                     VelocityField, activation, activation_deriv,
                     eval_layers_xp, init_network, measure_field_norms)
from .flow import FlowConfig, integrate_flow


class NonFiniteObjective(Exception):
    pass


class DivergedTraining(Exception):
    pass


@dataclass
class Dataset:
    points: np.ndarray          # (N, d)
    source: str = "unknown"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size and (self.points.min() < 0 or self.points.max() > 1):
            raise ValueError("data points must lie in the unit cube")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class TrainConfig:
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 200
    batch: Optional[int] = None            # None = full batch
    norm_ball_r: float = 5.0
    flow: FlowConfig = dc_field(default_factory=lambda: FlowConfig(jacobian_mode="logdet_trace"))
    seed: int = 0
    optimizer: str = "adam_like"
    step_decay: float = 1.0                # per-iteration multiplier on step_size

    def __post_init__(self):
        if self.step_size <= 0 or self.iterations < 1:
            raise ValueError("step_size must be > 0 and iterations >= 1")
        if not 0.0 < self.step_decay <= 1.0:
            raise ValueError("step_decay must lie in (0, 1]")


@dataclass
class TrainTrace:
    objective: List[float] = dc_field(default_factory=list)
    best_objective: List[float] = dc_field(default_factory=list)
    grad_norm: List[float] = dc_field(default_factory=list)
    c1_norm: List[float] = dc_field(default_factory=list)
    w2inf_norm: List[float] = dc_field(default_factory=list)
    ms: List[float] = dc_field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["iter,objective,grad_norm,c1_norm,w2inf_norm,ms"]
        for i in range(len(self.objective)):
            lines.append(f"{i},{self.objective[i]!r},{self.grad_norm[i]!r},"
                         f"{self.c1_norm[i]!r},{self.w2inf_norm[i]!r},{self.ms[i]:.1f}")
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# Trainable field models
# ----------------------------------------------------------------------

class SplineModel:
    """Cutoff-wrapped tensor-product spline field, linear in its coefficients."""

    kind = "spline"

    def __init__(self, dim: int, m: int = 3, n_res: int = 4,
                 coeffs: Optional[np.ndarray] = None, time_constant: bool = False):
        self.dim = dim
        self.m = m
        self.n_res = n_res
        self.time_constant = time_constant
        nidx = n_res + m - 1
        n_axes = dim if time_constant else dim + 1
        shape = (dim,) + (nidx,) * n_axes
        if coeffs is None:
            coeffs = np.zeros(shape)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != shape:
            raise ValueError(f"coeffs shape {coeffs.shape} != {shape}")
        self.params = coeffs

    def _full_coeffs(self, params):
        if not self.time_constant:
            return params
        # constant-in-time coefficients: broadcasting along the time axis is
        # exact because the shifted B-splines sum to one on [0, 1]
        nidx = self.n_res + self.m - 1
        return np.broadcast_to(np.asarray(params)[..., None],
                               np.asarray(params).shape + (nidx,)).copy()

    def numpy_field(self) -> VelocityField:
        return CutoffField(SplineField(self.dim, self.m, self.n_res,
                                       self._full_coeffs(self.params)))

    def with_params(self, params) -> "SplineModel":
        return SplineModel(self.dim, self.m, self.n_res, np.asarray(params),
                           time_constant=self.time_constant)

    def _time_basis(self, t):
        if self.time_constant:
            return []
        return [_bspline.basis_matrix(self.m, self.n_res, t, 0, jnp)]

    def value_jax(self, params, x, t):
        """Single-point field value (d,) built from jnp primitives."""
        bases = [_bspline.basis_matrix(self.m, self.n_res, x[a], 0, jnp)
                 for a in range(self.dim)] + self._time_basis(t)
        out = params
        for b in bases:
            out = jnp.tensordot(out, b, axes=([1], [0]))
        return out * (x * (1.0 - x))

    def div_jax(self, params, x, t):
        """Analytic divergence at one point; avoids nested AD in training."""
        bt = self._time_basis(t)
        b0 = [_bspline.basis_matrix(self.m, self.n_res, x[a], 0, jnp)
              for a in range(self.dim)]
        b1 = [_bspline.basis_matrix(self.m, self.n_res, x[a], 1, jnp)
              for a in range(self.dim)]

        def contract(bases):
            out = params
            for b in bases:
                out = jnp.tensordot(out, b, axes=([1], [0]))
            return out

        v = contract(b0 + bt)
        dv = jnp.stack([contract([b1[a] if a == c else b0[a]
                                  for a in range(self.dim)] + bt)[c]
                        for c in range(self.dim)])
        return jnp.sum(dv * x * (1.0 - x) + v * (1.0 - 2.0 * x))

    def flatten(self, params) -> np.ndarray:
        return np.asarray(params, dtype=float).ravel()

    def unflatten(self, vec):
        return np.asarray(vec, dtype=float).reshape(self.params.shape)

    def scale(self, params, s: float):
        return params * s


class NetworkModel:
    """Cutoff-wrapped squared-ReLU network field with a fixed sparsity mask."""

    kind = "network"

    def __init__(self, net: NetworkSpec):
        if net.activation_power != 2:
            raise ValueError("trainable network fields use activation power 2")
        self.net = net
        self.dim = net.d_out
        self.params = [(w.copy(), b.copy()) for w, b in net.layers]
        self.masks = net.masks

    def numpy_field(self) -> VelocityField:
        spec = NetworkSpec(self.net.d_in, self.net.d_out, 2,
                           [(np.asarray(w), np.asarray(b)) for w, b in self.params],
                           masks=self.masks)
        return CutoffField(NetworkField(spec))

    def with_params(self, params) -> "NetworkModel":
        spec = NetworkSpec(self.net.d_in, self.net.d_out, 2,
                           [(np.asarray(w), np.asarray(b)) for w, b in params],
                           masks=self.masks)
        return NetworkModel(spec)

    def value_jax(self, params, x, t):
        z = jnp.concatenate([x, jnp.reshape(t, (1,))])
        out = eval_layers_xp(params, z, 2, jnp)
        return out * (x * (1.0 - x))

    def div_jax(self, params, x, t):
        """Divergence by explicit layer-wise chain rule (no nested AD)."""
        d = self.dim
        z = jnp.concatenate([x, jnp.reshape(t, (1,))])
        h = z
        jac = jnp.eye(z.shape[0])[:, :d]          # d(h)/d(x), (width, d)
        last = len(params) - 1
        for l, (w, b) in enumerate(params):
            h = w @ h + b
            jac = w @ jac
            if l < last:
                jac = activation_deriv(h, 2, jnp)[:, None] * jac
                h = activation(h, 2, jnp)
        diag = jnp.diagonal(jac)                  # (d,) entries d f_c / d x_c
        return jnp.sum(diag * x * (1.0 - x) + h * (1.0 - 2.0 * x))

    def flatten(self, params) -> np.ndarray:
        return np.concatenate([np.concatenate([np.asarray(w).ravel(),
                                               np.asarray(b).ravel()])
                               for w, b in params])

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=float)
        out = []
        pos = 0
        for w, b in self.params:
            wn = vec[pos:pos + w.size].reshape(w.shape); pos += w.size
            bn = vec[pos:pos + b.size].reshape(b.shape); pos += b.size
            out.append((wn, bn))
        return out

    def apply_mask(self, params):
        if self.masks is None:
            return params
        return [(np.asarray(w) * mw, np.asarray(b) * mb)
                for (w, b), (mw, mb) in zip(params, self.masks)]

    def scale(self, params, s: float):
        out = list(params)
        w, b = out[-1]
        out[-1] = (w * s, b * s)
        return out


# ----------------------------------------------------------------------
# Objective and gradient
# ----------------------------------------------------------------------

def objective(f, data: Dataset, rho: AnalyticDensity,
              cfg: FlowConfig = FlowConfig(jacobian_mode="logdet_trace")) -> float:
    """J(f) on the numpy flow path (shared with pullback_density)."""
    if data.n == 0:
        return 0.0
    fld = f.numpy_field() if hasattr(f, "numpy_field") else f
    use = cfg if cfg.jacobian_mode != "none" else \
        FlowConfig(cfg.n_steps, cfg.clamp_tol, "logdet_trace")
    res = integrate_flow(fld, data.points, 0.0, 1.0, use)
    vals = rho(res.terminal)
    floor = max(rho.lower_bound, 1e-300)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteObjective("reference density not finite at terminal points")
    vals = np.maximum(vals, floor)
    return float(np.sum(np.log(vals) + res.logdet))


def per_point_loglik(f, data: Dataset, rho: AnalyticDensity,
                     cfg: FlowConfig = FlowConfig(jacobian_mode="logdet_trace")
                     ) -> np.ndarray:
    fld = f.numpy_field() if hasattr(f, "numpy_field") else f
    res = integrate_flow(fld, data.points, 0.0, 1.0, cfg)
    vals = np.maximum(rho(res.terminal), max(rho.lower_bound, 1e-300))
    return np.log(vals) + res.logdet


def _make_objective_jax(model, rho: AnalyticDensity, n_steps: int):
    """jit-compiled J(params; Z) matching the numpy RK4 discretization."""
    h = 1.0 / n_steps
    floor = max(rho.lower_bound, 1e-300)

    def vel(params, x, t):
        return model.value_jax(params, jnp.clip(x, 0.0, 1.0), t)

    def div(params, x, t):
        return model.div_jax(params, jnp.clip(x, 0.0, 1.0), t)

    def one_point(params, z):
        def step(carry, i):
            x, ld = carry
            t = i * h
            k1 = vel(params, x, t)
            l1 = div(params, x, t)
            x2 = x + 0.5 * h * k1
            k2 = vel(params, x2, t + 0.5 * h)
            l2 = div(params, x2, t + 0.5 * h)
            x3 = x + 0.5 * h * k2
            k3 = vel(params, x3, t + 0.5 * h)
            l3 = div(params, x3, t + 0.5 * h)
            x4 = x + h * k3
            k4 = vel(params, x4, t + h)
            l4 = div(params, x4, t + h)
            xn = jnp.clip(x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), 0.0, 1.0)
            ldn = ld + (h / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4)
            return (xn, ldn), 0.0

        (xT, ld), _ = jax.lax.scan(step, (z, 0.0), jnp.arange(n_steps))
        dens = rho.eval_xp(xT[None, :], jnp)[0]
        return jnp.log(jnp.maximum(dens, floor)) + ld

    def total(params, zs):
        return jnp.sum(jax.vmap(lambda z: one_point(params, z))(zs))

    return jax.jit(total), jax.jit(jax.grad(total))


_JAX_CACHE: dict = {}


def _jax_fns(model, rho, n_steps):
    if model.kind == "spline":
        key = ("spline", model.dim, model.m, model.n_res,
               model.time_constant, rho.name, n_steps)
    else:
        shapes = tuple((w.shape, b.shape) for w, b in model.params)
        key = ("network", shapes, rho.name, n_steps)
    if key not in _JAX_CACHE:
        _JAX_CACHE[key] = _make_objective_jax(model, rho, n_steps)
    return _JAX_CACHE[key]


def _to_jax_params(model, params):
    if model.kind == "spline":
        return jnp.asarray(params)
    return [(jnp.asarray(w), jnp.asarray(b)) for w, b in params]


def objective_adjoint(model, data: Dataset, rho: AnalyticDensity,
                      cfg: FlowConfig) -> float:
    fn, _ = _jax_fns(model, rho, cfg.n_steps)
    return float(fn(_to_jax_params(model, model.params), jnp.asarray(data.points)))


def gradient(model, data: Dataset, rho: AnalyticDensity,
             cfg: FlowConfig = FlowConfig(jacobian_mode="logdet_trace")
             ) -> np.ndarray:
    """Exact gradient of the discretized objective, flattened."""
    if data.n == 0:
        return np.zeros_like(model.flatten(model.params))
    _, gfn = _jax_fns(model, rho, cfg.n_steps)
    g = gfn(_to_jax_params(model, model.params), jnp.asarray(data.points))
    if model.kind == "spline":
        return np.asarray(g).ravel()
    return model.flatten([(np.asarray(w), np.asarray(b)) for w, b in g])


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------

def _project(model, r: float, probes: int = 256):
    """Ball projection by exact rescaling; returns (model, report)."""
    rep = measure_field_norms(model.numpy_field(), probes)
    if rep.w2inf_norm <= r:
        return model, rep
    scaled = model.with_params(model.scale(model.params, r / rep.w2inf_norm))
    rep2 = measure_field_norms(scaled.numpy_field(), probes)
    return scaled, rep2


def fit(model, data: Dataset, rho: AnalyticDensity, tcfg: TrainConfig
        ) -> Tuple[object, TrainTrace]:
    """Adam-style ascent on J with per-iteration ball projection.

    Returns the best-objective iterate (not the last one) and the trace."""
    fn, gfn = _jax_fns(model, rho, tcfg.flow.n_steps)
    zs = jnp.asarray(data.points)
    trace = TrainTrace()

    if tcfg.optimizer == "lbfgs":
        return _fit_lbfgs(model, data, rho, tcfg, fn, gfn, zs, trace)

    vec = model.flatten(model.params)
    m1 = np.zeros_like(vec)
    m2 = np.zeros_like(vec)
    best_obj = -np.inf
    best_model = model
    step = tcfg.step_size
    bad_streak = 0

    for it in range(tcfg.iterations):
        t_start = time.perf_counter()
        model, rep = _project(model, tcfg.norm_ball_r)
        jp = _to_jax_params(model, model.params)
        obj = float(fn(jp, zs))
        g = gfn(jp, zs)
        if model.kind == "spline":
            gvec = np.asarray(g).ravel()
        else:
            gvec = model.flatten([(np.asarray(w), np.asarray(b)) for w, b in g])

        if not np.isfinite(obj) or not np.all(np.isfinite(gvec)):
            bad_streak += 1
            if bad_streak >= 2:
                raise DivergedTraining("objective not finite twice in a row")
            step *= 0.5
            model = best_model
            continue
        bad_streak = 0

        if obj > best_obj:
            best_obj = obj
            best_model = model

        vec = model.flatten(model.params)
        m1 = tcfg.beta1 * m1 + (1 - tcfg.beta1) * gvec
        m2 = tcfg.beta2 * m2 + (1 - tcfg.beta2) * gvec**2
        bc1 = 1 - tcfg.beta1 ** (it + 1)
        bc2 = 1 - tcfg.beta2 ** (it + 1)
        if tcfg.optimizer == "gd_backtrack":
            # raw per-point gradient: high-frequency coefficients receive the
            # small likelihood gradients they deserve, so the smoothness-ball
            # projection rarely binds
            direction = gvec / max(data.n, 1)
        else:
            direction = (m1 / bc1) / (np.sqrt(m2 / bc2) + tcfg.eps)
        if tcfg.optimizer in ("adam_backtrack", "gd_backtrack"):
            # monotone variant: halve the step along the Adam direction until
            # the objective strictly improves; a stalled direction only
            # shrinks the base step for the next iteration
            s, accepted = step, None
            for _ in range(15):
                cparams = model.unflatten(vec + s * direction)
                if model.kind == "network":
                    cparams = model.apply_mask(cparams)
                cobj = float(fn(_to_jax_params(model, cparams), zs))
                if np.isfinite(cobj) and cobj > obj:
                    accepted = cparams
                    break
                s *= 0.5
            if accepted is None:
                step *= 0.5
                params = model.params
            else:
                step = min(tcfg.step_size, 2.0 * s)
                params = accepted
        else:
            vec = vec + step * direction
            params = model.unflatten(vec)
            if model.kind == "network":
                params = model.apply_mask(params)
        model = model.with_params(params)

        trace.objective.append(obj)
        trace.best_objective.append(best_obj)
        trace.grad_norm.append(float(np.linalg.norm(gvec)))
        trace.c1_norm.append(rep.c1_norm)
        trace.w2inf_norm.append(rep.w2inf_norm)
        trace.ms.append(1000.0 * (time.perf_counter() - t_start))
        step *= tcfg.step_decay

    best_model, _ = _project(best_model, tcfg.norm_ball_r)
    return best_model, trace


def _fit_lbfgs(model, data, rho, tcfg, fn, gfn, zs, trace):
    """Quasi-Newton ascent (gradient-only curvature estimates) to a stationary
    point, followed by a single ball projection. Deterministic given the seed
    because every quantity in the iteration is."""
    from scipy.optimize import minimize

    kind = model.kind

    def unflat(vec):
        params = model.unflatten(vec)
        if kind == "network":
            params = model.apply_mask(params)
        return params

    cache = {}

    def neg_obj_grad(vec):
        jp = _to_jax_params(model, unflat(vec))
        v = float(fn(jp, zs))
        g = gfn(jp, zs)
        if kind == "spline":
            gv = np.asarray(g).ravel()
        else:
            gv = model.flatten([(np.asarray(w), np.asarray(b)) for w, b in g])
        gv = -np.where(np.isfinite(gv), gv, 0.0)
        if not np.isfinite(v):
            v = -1e18
        cache["vec"], cache["obj"], cache["gnorm"] = (
            vec.copy(), v, float(np.linalg.norm(gv)))
        return -v, gv

    t_start = time.perf_counter()

    def record(vec):
        if not np.array_equal(cache.get("vec"), vec):
            neg_obj_grad(vec)
        m = model.with_params(unflat(vec))
        rep = measure_field_norms(m.numpy_field(), 256)
        trace.objective.append(cache["obj"])
        trace.best_objective.append(max(trace.objective))
        trace.grad_norm.append(cache["gnorm"])
        trace.c1_norm.append(rep.c1_norm)
        trace.w2inf_norm.append(rep.w2inf_norm)
        trace.ms.append(1000.0 * (time.perf_counter() - t_start))

    res = minimize(neg_obj_grad, model.flatten(model.params), jac=True,
                   method="L-BFGS-B", callback=record,
                   options={"maxiter": tcfg.iterations,
                            "ftol": 1e-12, "gtol": 1e-6})
    fitted = model.with_params(unflat(res.x))
    fitted, _ = _project(fitted, tcfg.norm_ball_r)
    if not trace.objective:
        record(res.x)
    return fitted, trace


def nn_scaling_plan(n: int, k: int, d: int) -> Tuple[int, int, int, int]:
    """Depth/width/sparsity/magnitude plan: L fixed, the rest scale like
    n^{(d+1)/(d+1+2(k-1))} with constant 4."""
    if n < 2 or k < 2:
        raise ValueError("need n >= 2 and k >= 2")
    expo = (d + 1) / (d + 1 + 2 * (k - 1))
    val = ceil(4 * n ** expo)
    return 4, val, val, val

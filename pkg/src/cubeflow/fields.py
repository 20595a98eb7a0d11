"""Velocity-field families on the space-time cylinder [0,1]^d x [0,1].

Provides layered power-ReLU networks (activation max(0,x)^m), tensor-product
B-spline fields, the boundary cutoff wrapper that multiplies component j by
x_j(1-x_j), and empirical norm accounting used for ball projections.

Network convention: a spec with L affine layers realizes

    A_L o act o A_{L-1} o ... o act o A_1

i.e. the first and last layers are affine and the activation sits between
layers. depth L counts affine layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from . import _bspline


class DimensionMismatch(Exception):
    pass


class InfeasibleSparsity(Exception):
    pass


# ----------------------------------------------------------------------
# Generic velocity-field interface
# ----------------------------------------------------------------------

class VelocityField:
    """Time-dependent vector field f(x,t) on [0,1]^d x [0,1].

    value(x, t): x is (N,d), t is scalar or (N,); returns (N,d).
    jacobian(x, t): spatial Jacobian, (N,d,d). Subclasses may override
    with analytic derivatives; the default is central finite differences
    with one-sided stencils near the cube boundary.
    """

    dim: int
    fd_step: float = 1e-5

    def value(self, x: np.ndarray, t) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray, t) -> np.ndarray:
        return fd_spatial_jacobian(self.value, x, t, self.fd_step)


def fd_spatial_jacobian(value_fn, x, t, h=1e-5):
    """Second-order finite differences clipped to [0,1].

    Uses the three-point nonuniform stencil through x-h, x, x+h with the
    outer points clipped to the cube, so the estimate stays O(h^2) even
    when a probe sits on a face (where the clipped stencil is one-sided)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    jac = np.empty((n, d, d))
    for k in range(d):
        c = x[:, k]
        s0 = np.clip(c - h, 0.0, 1.0 - 2.0 * h)
        s1 = s0 + h
        s2 = s0 + 2.0 * h
        f0, f1, f2 = (value_fn(_with_col(x, k, s), t) for s in (s0, s1, s2))
        w0 = (2 * c - s1 - s2) / ((s0 - s1) * (s0 - s2))
        w1 = (2 * c - s0 - s2) / ((s1 - s0) * (s1 - s2))
        w2 = (2 * c - s0 - s1) / ((s2 - s0) * (s2 - s1))
        jac[:, :, k] = f0 * w0[:, None] + f1 * w1[:, None] + f2 * w2[:, None]
    return jac


def _with_col(x, k, col):
    out = x.copy()
    out[:, k] = col
    return out


class AnalyticField(VelocityField):
    """Field given by a closed-form function fn(x, t, xp) -> (N,d)."""

    def __init__(self, dim: int, fn_xp: Callable, jac_xp: Optional[Callable] = None,
                 name: str = "analytic"):
        self.dim = dim
        self.fn_xp = fn_xp
        self.jac_xp = jac_xp
        self.name = name

    def value(self, x, t):
        return np.asarray(self.fn_xp(np.atleast_2d(np.asarray(x, dtype=float)), t, np))

    def jacobian(self, x, t):
        if self.jac_xp is None:
            return super().jacobian(x, t)
        return np.asarray(self.jac_xp(np.atleast_2d(np.asarray(x, dtype=float)), t, np))


class ZeroField(VelocityField):
    def __init__(self, dim: int):
        self.dim = dim

    def value(self, x, t):
        x = np.atleast_2d(x)
        return np.zeros_like(np.asarray(x, dtype=float))

    def jacobian(self, x, t):
        x = np.atleast_2d(x)
        return np.zeros((x.shape[0], self.dim, self.dim))


def logistic_field(c: float = 1.0) -> AnalyticField:
    """1-D field f(x,t) = c*x(1-x); its time-one flow has a closed form."""
    def fn(x, t, xp):
        return c * x * (1.0 - x)

    def jac(x, t, xp):
        return (c * (1.0 - 2.0 * x))[:, :, None]

    return AnalyticField(1, fn, jac, name=f"logistic(c={c})")


# ----------------------------------------------------------------------
# Power-ReLU networks
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkAudit:
    depth: int          # L: number of affine layers
    width: int          # W: max layer dimension
    nonzeros: int       # S
    max_abs: float      # B


@dataclass
class NetworkSpec:
    d_in: int
    d_out: int
    activation_power: int
    layers: List[Tuple[np.ndarray, np.ndarray]]
    masks: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None
    audit: NetworkAudit = None

    def __post_init__(self):
        if self.audit is None:
            self.audit = audit_network(self.layers)


def audit_network(layers) -> NetworkAudit:
    depth = len(layers)
    width = 0
    nnz = 0
    bmax = 0.0
    for w, b in layers:
        width = max(width, w.shape[0], w.shape[1])
        nnz += int(np.count_nonzero(w)) + int(np.count_nonzero(b))
        if w.size:
            bmax = max(bmax, float(np.max(np.abs(w))))
        if b.size:
            bmax = max(bmax, float(np.max(np.abs(b))))
    return NetworkAudit(depth, width, nnz, bmax)


def activation(a, m: int, xp=np):
    return xp.where(a > 0, a, 0.0) ** m


def activation_deriv(a, m: int, xp=np):
    if m == 1:
        return xp.where(a > 0, 1.0, 0.0)
    return m * xp.where(a > 0, a, 0.0) ** (m - 1)


def eval_layers_xp(layers, z, m: int, xp=np):
    """Forward pass usable with numpy or jax.numpy parameter/input arrays."""
    h = z
    last = len(layers) - 1
    for l, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if l < last:
            h = activation(h, m, xp)
    return h


def eval_network(net: NetworkSpec, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[-1] != net.d_in:
        raise DimensionMismatch(f"expected input dim {net.d_in}, got {z.shape[-1]}")
    return eval_layers_xp(net.layers, z, net.activation_power, np)


def eval_network_jacobian(net: NetworkSpec, z) -> np.ndarray:
    """Exact chain-rule Jacobian, shape (N, d_out, d_in)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[-1] != net.d_in:
        raise DimensionMismatch(f"expected input dim {net.d_in}, got {z.shape[-1]}")
    m = net.activation_power
    h = z
    jac = np.broadcast_to(np.eye(net.d_in), (z.shape[0], net.d_in, net.d_in)).copy()
    last = len(net.layers) - 1
    for l, (w, b) in enumerate(net.layers):
        a = h @ w.T + b
        jac = np.einsum("oi,nij->noj", w, jac)
        if l < last:
            jac = activation_deriv(a, m)[:, :, None] * jac
            h = activation(a, m)
        else:
            h = a
    return jac


def init_network(arch: Tuple[int, int, int, float], d_in: int, d_out: int,
                 rng) -> NetworkSpec:
    """He-style init on an (L, W, S_target, B_cap) architecture, magnitude-pruned
    to exactly S_target nonzeros and clipped to [-B_cap, B_cap]."""
    depth, width, s_target, b_cap = arch
    dims = [d_in] + [width] * (depth - 1) + [d_out]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        b = rng.normal((fan_out,)) * 0.01
        layers.append((w, b))
    flat = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])
    total = flat.size
    if s_target > total:
        raise InfeasibleSparsity(f"S_target={s_target} exceeds {total} parameter slots")
    if s_target < total:
        # keep the S_target largest magnitudes
        cutoff = np.sort(np.abs(flat))[total - s_target - 1] if s_target > 0 else np.inf
        keep = np.abs(flat) > cutoff
        # break ties deterministically to land exactly on S_target
        short = s_target - int(keep.sum())
        if short > 0:
            ties = np.flatnonzero(np.abs(flat) == cutoff)
            keep[ties[:short]] = True
        flat = np.where(keep, flat, 0.0)
    flat = np.clip(flat, -b_cap, b_cap)
    out = []
    pos = 0
    for w, b in layers:
        wn = flat[pos:pos + w.size].reshape(w.shape); pos += w.size
        bn = flat[pos:pos + b.size].reshape(b.shape); pos += b.size
        out.append((wn, bn))
    masks = [((w != 0.0), (b != 0.0)) for w, b in out]
    return NetworkSpec(d_in, d_out, 2, out, masks=masks)


# JSON serialization (exact round trip: python float repr preserves doubles)

def network_to_json(net: NetworkSpec) -> str:
    doc = {
        "version": 1,
        "d_in": net.d_in,
        "d_out": net.d_out,
        "activation_power": net.activation_power,
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()} for w, b in net.layers
        ],
        "masks": None if net.masks is None else [
            {"weight": mw.astype(int).tolist(), "bias": mb.astype(int).tolist()}
            for mw, mb in net.masks
        ],
        "audit": {"L": net.audit.depth, "W": net.audit.width,
                  "S": net.audit.nonzeros, "B": net.audit.max_abs},
    }
    return json.dumps(doc, sort_keys=True)


def network_from_json(text: str) -> NetworkSpec:
    doc = json.loads(text)
    layers = [(np.asarray(l["weight"], dtype=float), np.asarray(l["bias"], dtype=float))
              for l in doc["layers"]]
    masks = None
    if doc.get("masks") is not None:
        masks = [(np.asarray(m["weight"], dtype=bool), np.asarray(m["bias"], dtype=bool))
                 for m in doc["masks"]]
    return NetworkSpec(doc["d_in"], doc["d_out"], doc["activation_power"], layers,
                       masks=masks)


class NetworkField(VelocityField):
    """Velocity field realized by a network taking (x, t) as input."""

    def __init__(self, net: NetworkSpec):
        if net.d_in != net.d_out + 1:
            raise DimensionMismatch("network field needs d_in = d_out + 1")
        self.net = net
        self.dim = net.d_out

    def _z(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tcol = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))[:, None]
        return np.concatenate([x, tcol], axis=1)

    def value(self, x, t):
        return eval_network(self.net, self._z(x, t))

    def jacobian(self, x, t):
        full = eval_network_jacobian(self.net, self._z(x, t))
        return full[:, :, : self.dim]


# ----------------------------------------------------------------------
# Tensor-product spline fields
# ----------------------------------------------------------------------

class SplineField(VelocityField):
    """Per-component tensor-product B-spline surface over (x, t).

    coeffs has shape (d,) + (n+m-1,)*(d+1); axes are x_1..x_d then t.
    Evaluation is C^{m-2}, so m >= 3 gives a C^1 field.
    """

    def __init__(self, dim: int, m: int, n: int, coeffs: Optional[np.ndarray] = None):
        if m < 3:
            raise ValueError("spline velocity fields need m >= 3 for C^1 regularity")
        self.dim = dim
        self.m = m
        self.n = n
        nidx = n + m - 1
        shape = (dim,) + (nidx,) * (dim + 1)
        if coeffs is None:
            coeffs = np.zeros(shape)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != shape:
            raise DimensionMismatch(f"coeffs shape {coeffs.shape} != {shape}")
        self.coeffs = coeffs

    def _contract(self, bases, coeffs, xp=np):
        # bases: list of d+1 arrays (N, nidx); coeffs: (d,)+ (nidx,)*(d+1)
        out = coeffs
        for i, b in enumerate(bases):
            # contract the leading free coefficient axis with basis rows
            out = xp.einsum("nj,cj...->nc..." if i == 0 else "nj,ncj...->nc...",
                            b, out)
        return out  # (N, d)

    def value_xp(self, coeffs, x, t, xp=np):
        x = xp.atleast_2d(x)
        tcol = xp.broadcast_to(xp.asarray(t, dtype=float), (x.shape[0],))
        bases = [_bspline.basis_matrix(self.m, self.n, x[:, a], 0, xp)
                 for a in range(self.dim)]
        bases.append(_bspline.basis_matrix(self.m, self.n, tcol, 0, xp))
        return self._contract(bases, coeffs, xp)

    def value(self, x, t):
        return np.asarray(self.value_xp(self.coeffs, np.asarray(x, dtype=float), t, np))

    def jacobian_xp(self, coeffs, x, t, xp=np):
        x = xp.atleast_2d(x)
        tcol = xp.broadcast_to(xp.asarray(t, dtype=float), (x.shape[0],))
        b0 = [_bspline.basis_matrix(self.m, self.n, x[:, a], 0, xp)
              for a in range(self.dim)]
        bt = _bspline.basis_matrix(self.m, self.n, tcol, 0, xp)
        cols = []
        for k in range(self.dim):
            bases = []
            for a in range(self.dim):
                if a == k:
                    bases.append(_bspline.basis_matrix(self.m, self.n, x[:, a], 1, xp))
                else:
                    bases.append(b0[a])
            bases.append(bt)
            cols.append(self._contract(bases, coeffs, xp))
        return xp.stack(cols, axis=-1)  # (N, d, d)

    def jacobian(self, x, t):
        return np.asarray(self.jacobian_xp(self.coeffs, np.asarray(x, dtype=float), t, np))

    def with_coeffs(self, coeffs) -> "SplineField":
        return SplineField(self.dim, self.m, self.n, np.asarray(coeffs, dtype=float))


# ----------------------------------------------------------------------
# Boundary cutoff
# ----------------------------------------------------------------------

class CutoffField(VelocityField):
    """Component j of the output is inner_j(x,t) * x_j(1-x_j).

    The normal component therefore vanishes exactly on every cube face,
    which makes the field admissible regardless of the inner ansatz.
    """

    def __init__(self, inner: VelocityField):
        self.inner = inner
        self.dim = inner.dim

    def value(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.inner.value(x, t) * (x * (1.0 - x))

    def jacobian(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        f = self.inner.value(x, t)
        jf = self.inner.jacobian(x, t)
        chi = x * (1.0 - x)
        jac = jf * chi[:, :, None]
        idx = np.arange(self.dim)
        jac[:, idx, idx] += f * (1.0 - 2.0 * x)
        return jac


def apply_cutoff(inner: VelocityField) -> CutoffField:
    return CutoffField(inner)


def cutoff_value_xp(inner_value, x, xp=np):
    """chi-weighted inner values for traced (jax) evaluation paths."""
    return inner_value * (x * (1.0 - x))


# ----------------------------------------------------------------------
# Norm accounting
# ----------------------------------------------------------------------

@dataclass
class FieldNormReport:
    c1_norm: float
    w2inf_norm: float
    lip_of_gradient: float
    probe_count: int


def _spacetime_probes(dim: int, count: int) -> np.ndarray:
    sampler = qmc.Halton(d=dim + 1, scramble=False)
    pts = sampler.random(count)
    # keep probes off the exact boundary so one-sided FD stencils stay sane
    return 1e-6 + (1.0 - 2e-6) * pts


def measure_field_norms(f: VelocityField, probes: int = 1024) -> FieldNormReport:
    """Empirical sup norms over a deterministic low-discrepancy probe set.

    c1_norm: max of |f| and all first-derivative entries (space and time);
    w2inf_norm: c1_norm joined with second-central-difference maxima;
    lip_of_gradient: max Jacobian difference ratio over consecutive probe pairs.

    Fields are evaluated with a per-probe time vector, so this stays one
    vectorized call per stencil point.
    """
    if probes < 256:
        raise ValueError("need at least 256 probes")
    d = f.dim
    pts = _spacetime_probes(d, probes)
    x, t = pts[:, :d], pts[:, d]
    h = 1e-3

    fv = f.value(x, t)
    jac = f.jacobian(x, t)
    vmax = float(np.max(np.abs(fv)))
    jmax = float(np.max(np.abs(jac)))

    # time derivative (central, clipped at the ends of [0,1])
    tp, tm = np.minimum(t + h, 1.0), np.maximum(t - h, 0.0)
    dt = (f.value(x, tp) - f.value(x, tm)) / (tp - tm)[:, None]
    tmax = float(np.max(np.abs(dt)))

    # second central differences where the full stencil fits
    second = 0.0
    interior_t = (t + h <= 1.0) & (t - h >= 0.0)
    if np.any(interior_t):
        xi, ti = x[interior_t], t[interior_t]
        acc = (f.value(xi, ti + h) - 2 * f.value(xi, ti) + f.value(xi, ti - h)) / h**2
        second = max(second, float(np.max(np.abs(acc))))
    for k in range(d):
        ok = (x[:, k] + h <= 1.0) & (x[:, k] - h >= 0.0)
        if not np.any(ok):
            continue
        xk, tk = x[ok], t[ok]
        xp_, xm_ = xk.copy(), xk.copy()
        xp_[:, k] += h
        xm_[:, k] -= h
        sd = (f.value(xp_, tk) - 2 * f.value(xk, tk) + f.value(xm_, tk)) / h**2
        second = max(second, float(np.max(np.abs(sd))))

    # gradient Lipschitz ratio between consecutive probes
    dz = np.maximum(np.max(np.abs(x[1:] - x[:-1]), axis=1), np.abs(t[1:] - t[:-1]))
    dj = np.max(np.abs(jac[1:] - jac[:-1]), axis=(1, 2))
    mask = dz > 1e-9
    lip = float(np.max(dj[mask] / dz[mask])) if np.any(mask) else 0.0

    c1 = max(vmax, jmax, tmax)
    return FieldNormReport(c1_norm=c1, w2inf_norm=max(c1, second),
                           lip_of_gradient=lip, probe_count=probes)


def project_norm_ball(net: NetworkSpec, r: float, report: FieldNormReport) -> NetworkSpec:
    """Rescale the final affine layer so the realized function lands in the
    r-ball; exact function scaling since the last layer is linear."""
    if r <= 0:
        raise ValueError("r must be positive")
    if report.w2inf_norm <= r:
        return net
    s = r / report.w2inf_norm
    w, b = net.layers[-1]
    layers = list(net.layers[:-1]) + [(w * s, b * s)]
    return NetworkSpec(net.d_in, net.d_out, net.activation_power, layers,
                       masks=net.masks)

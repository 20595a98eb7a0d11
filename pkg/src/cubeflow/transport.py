"""Knothe-Rosenblatt triangular transport between analytic densities.

The i-th map component is T_i(x_1..x_i) = F_{ref,i}^{-1}(F_i(x_1..x_i)) where
F_i is the conditional CDF of the source density in coordinate i given the
previous coordinates, and F_{ref,i} is the CDF of the i-th reference marginal
(the reference must factorize). Conditional CDFs are precomputed on uniform
tensor grids by composite Gauss-Legendre integration and interpolated
cubically, so map evaluation never touches the analytic densities again --
which is what makes the tables serializable.

Also provides the straight-line interpolation G_t(x) = t*T(x) + (1-t)*x, its
coordinate-recursive inverse, and the velocity field whose flow trajectories
are exactly those straight lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline, RegularGridInterpolator
from scipy.stats import qmc

from .core import AnalyticDensity, QuadratureGrid, tensor_nodes
from .fields import VelocityField


class NonProductReference(Exception):
    pass


class DegenerateDensity(Exception):
    pass


class RootBracketFailure(Exception):
    pass


# ----------------------------------------------------------------------
# Grid interpolation wrapper (1-3 axes, cubic)
# ----------------------------------------------------------------------

class _GridInterp:
    def __init__(self, axes: List[np.ndarray], values: np.ndarray):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.values = np.asarray(values, dtype=float)
        nd = len(self.axes)
        if nd == 1:
            self._sp = CubicSpline(self.axes[0], self.values)
        elif nd == 2:
            self._sp = RectBivariateSpline(self.axes[0], self.axes[1],
                                           self.values, kx=3, ky=3, s=0)
        else:
            self._sp = RegularGridInterpolator(self.axes, self.values,
                                               method="cubic")
        self.ndim = nd

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        pts = np.clip(pts, 0.0, 1.0)
        if self.ndim == 1:
            return self._sp(pts[:, 0])
        if self.ndim == 2:
            return self._sp.ev(pts[:, 0], pts[:, 1])
        return self._sp(pts)


# ----------------------------------------------------------------------
# Table construction
# ----------------------------------------------------------------------

_GL8 = np.polynomial.legendre.leggauss(8)


def _marginal_pdf(p0: AnalyticDensity, pts: np.ndarray, i: int) -> np.ndarray:
    """p~_i(x_1..x_i) = integral of p0 over the trailing d-i coordinates.

    pts has shape (..., i); uses a tensor Gauss-Legendre rule on the tail.
    """
    d = p0.dim
    tail = d - i
    if tail == 0:
        return p0(pts)
    n_tail = 32 if tail == 1 else 16
    x1, w1 = np.polynomial.legendre.leggauss(n_tail)
    x1 = 0.5 * (x1 + 1.0)
    w1 = 0.5 * w1
    mesh = np.meshgrid(*([x1] * tail), indexing="ij")
    tnodes = np.stack([m.ravel() for m in mesh], axis=-1)   # (M, tail)
    tw = w1
    for _ in range(tail - 1):
        tw = np.multiply.outer(tw, w1)
    tw = tw.ravel()
    lead = pts.shape[:-1]
    big = np.empty(lead + (tnodes.shape[0], d))
    big[..., :i] = pts[..., None, :]
    big[..., i:] = tnodes
    vals = p0(big)
    return np.tensordot(vals, tw, axes=([-1], [0]))


@dataclass
class ConditionalCdfTable:
    """Grids of the conditional pdf and CDF for one coordinate.

    cdf has shape (res+1,)*i normalized so every grid line runs 0 -> 1 in the
    last axis; cond_pdf is the matching conditional density p~_i / p~_{i-1}.
    """

    i: int                     # 1-based coordinate index
    res: int
    cdf: np.ndarray
    cond_pdf: np.ndarray

    def __post_init__(self):
        axis = np.linspace(0.0, 1.0, self.res + 1)
        axes = [axis] * self.i
        self._cdf_interp = _GridInterp(axes, self.cdf)
        self._pdf_interp = _GridInterp(axes, self.cond_pdf)

    def cdf_at(self, pts) -> np.ndarray:
        return self._cdf_interp(pts)

    def pdf_at(self, pts) -> np.ndarray:
        return self._pdf_interp(pts)


def _build_conditional_table(p0: AnalyticDensity, i: int, res: int) -> ConditionalCdfTable:
    axis = np.linspace(0.0, 1.0, res + 1)
    h = 1.0 / res
    glx, glw = _GL8
    # cell quadrature nodes along the last coordinate: (res, 8)
    ynodes = axis[:-1, None] + 0.5 * h * (glx[None, :] + 1.0)

    lead_axes = [axis] * (i - 1)
    if i == 1:
        lead_shape = ()
        lead_pts = np.empty((0,))
    else:
        mesh = np.meshgrid(*lead_axes, indexing="ij")
        lead_shape = mesh[0].shape
        lead_pts = np.stack(mesh, axis=-1)          # lead_shape + (i-1,)

    # pdf at grid nodes (for the conditional density table)
    grid_mesh = np.meshgrid(*([axis] * i), indexing="ij")
    grid_pts = np.stack(grid_mesh, axis=-1)
    pdf = _marginal_pdf(p0, grid_pts, i)

    # cumulative integral along the last coordinate, composite 8-pt GL per cell
    cell_shape = lead_shape + (res, 8)
    cell_pts = np.empty(cell_shape + (i,))
    if i > 1:
        cell_pts[..., : i - 1] = lead_pts[..., None, None, :]
    cell_pts[..., i - 1] = np.broadcast_to(ynodes, cell_shape)
    vals = _marginal_pdf(p0, cell_pts, i)
    cells = 0.5 * h * np.tensordot(vals, glw, axes=([-1], [0]))   # lead + (res,)
    cum = np.concatenate(
        [np.zeros(lead_shape + (1,)), np.cumsum(cells, axis=-1)], axis=-1)
    total = cum[..., -1:]
    if np.min(pdf) < 1e-10 or np.min(total) <= 0.0:
        raise DegenerateDensity(
            f"conditional marginal {i} falls below 1e-10 on the grid")
    cdf = cum / total
    cond_pdf = pdf / total
    return ConditionalCdfTable(i=i, res=res, cdf=cdf, cond_pdf=cond_pdf)


@dataclass
class ReferenceMarginal:
    """1-D pdf/CDF tables for one reference marginal, with Newton inversion."""

    res: int
    pdf: np.ndarray
    cdf: np.ndarray

    def __post_init__(self):
        axis = np.linspace(0.0, 1.0, self.res + 1)
        self._pdf_interp = CubicSpline(axis, self.pdf)
        self._cdf_interp = CubicSpline(axis, self.cdf)

    def cdf_at(self, x):
        return self._cdf_interp(np.clip(x, 0.0, 1.0))

    def pdf_at(self, x):
        return self._pdf_interp(np.clip(x, 0.0, 1.0))

    def inverse(self, u):
        u = np.asarray(u, dtype=float)
        x = np.clip(u, 0.0, 1.0)
        lo = np.zeros_like(x)
        hi = np.ones_like(x)
        for _ in range(100):
            g = self.cdf_at(x) - u
            lo = np.where(g < 0, x, lo)
            hi = np.where(g > 0, x, hi)
            step = g / np.maximum(self.pdf_at(x), 1e-12)
            xn = x - step
            bad = (xn <= lo) | (xn >= hi)
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            if np.max(np.abs(g)) < 1e-14 and np.max(np.abs(xn - x)) < 1e-14:
                x = xn
                break
            x = xn
        return np.clip(x, 0.0, 1.0)


def _build_reference_marginal(marginal, res: int) -> ReferenceMarginal:
    axis = np.linspace(0.0, 1.0, res + 1)
    h = 1.0 / res
    glx, glw = _GL8
    ynodes = axis[:-1, None] + 0.5 * h * (glx[None, :] + 1.0)
    cells = 0.5 * h * (np.asarray(marginal(ynodes)) @ glw)
    cum = np.concatenate([[0.0], np.cumsum(cells)])
    total = cum[-1]
    if total <= 0:
        raise DegenerateDensity("reference marginal integrates to <= 0")
    pdf = np.asarray(marginal(axis), dtype=float) / total
    return ReferenceMarginal(res=res, pdf=pdf, cdf=cum / total)


# ----------------------------------------------------------------------
# The triangular map
# ----------------------------------------------------------------------

def default_grid_res(dim: int) -> int:
    return {1: 256, 2: 128, 3: 64}[dim]


class TriangularMap:
    """Monotone triangular map built from conditional CDF tables."""

    def __init__(self, dim: int, tables: List[ConditionalCdfTable],
                 ref: List[ReferenceMarginal]):
        self.dim = dim
        self.tables = tables
        self.ref = ref

    # -- forward -------------------------------------------------------
    def component(self, i: int, x_first_i: np.ndarray) -> np.ndarray:
        """T_i evaluated on (N, i) points (i is 1-based)."""
        x = np.atleast_2d(np.asarray(x_first_i, dtype=float))
        u = self.tables[i - 1].cdf_at(x[:, :i])
        return self.ref[i - 1].inverse(np.clip(u, 0.0, 1.0))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for i in range(1, self.dim + 1):
            out[:, i - 1] = self.component(i, x)
        return out

    def diag_derivative(self, i: int, x_first_i: np.ndarray) -> np.ndarray:
        """d T_i / d x_i at (N, i) points: cond_pdf_i(x) / rho_i(T_i(x))."""
        x = np.atleast_2d(np.asarray(x_first_i, dtype=float))
        num = self.tables[i - 1].pdf_at(x[:, :i])
        ti = self.component(i, x)
        den = self.ref[i - 1].pdf_at(ti)
        return num / np.maximum(den, 1e-14)

    def jacobian_diagonal(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack(
            [self.diag_derivative(i, x) for i in range(1, self.dim + 1)], axis=1)

    # -- inverse -------------------------------------------------------
    def cond_inverse(self, i: int, x_prev: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Solve T_i(x_prev, xi) = y for xi, given recovered previous coords."""
        y = np.asarray(y, dtype=float)
        target = self.ref[i - 1].cdf_at(y)          # F_i must equal this
        return self._solve_cdf(i, x_prev, target)

    def _solve_cdf(self, i, x_prev, target):
        tab = self.tables[i - 1]
        n = target.shape[0]
        xi = np.clip(target, 0.0, 1.0)
        lo = np.zeros(n)
        hi = np.ones(n)

        def F(v):
            if i == 1:
                return tab.cdf_at(v[:, None])
            return tab.cdf_at(np.concatenate([x_prev, v[:, None]], axis=1))

        def dF(v):
            if i == 1:
                return tab.pdf_at(v[:, None])
            return tab.pdf_at(np.concatenate([x_prev, v[:, None]], axis=1))

        for _ in range(100):
            g = F(xi) - target
            lo = np.where(g < 0, xi, lo)
            hi = np.where(g > 0, xi, hi)
            xn = xi - g / np.maximum(dF(xi), 1e-12)
            bad = (xn <= lo) | (xn >= hi)
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            if np.max(np.abs(g)) < 1e-14 and np.max(np.abs(xn - xi)) < 1e-14:
                xi = xn
                break
            xi = xn
        return np.clip(xi, 0.0, 1.0)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.empty_like(y)
        for i in range(1, self.dim + 1):
            out[:, i - 1] = self.cond_inverse(i, out[:, : i - 1], y[:, i - 1])
        return out

    # -- serialization ---------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "version": 1,
            "dim": self.dim,
            "tables": [
                {"i": t.i, "res": t.res,
                 "cdf": t.cdf.ravel().tolist(),
                 "cond_pdf": t.cond_pdf.ravel().tolist()}
                for t in self.tables
            ],
            "ref": [
                {"res": r.res, "pdf": r.pdf.tolist(), "cdf": r.cdf.tolist()}
                for r in self.ref
            ],
            "interpolation": "cubic",
            "layout": "row-major, axes x1..xi",
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TriangularMap":
        doc = json.loads(text)
        tables = []
        for t in doc["tables"]:
            shape = (t["res"] + 1,) * t["i"]
            tables.append(ConditionalCdfTable(
                i=t["i"], res=t["res"],
                cdf=np.asarray(t["cdf"], dtype=float).reshape(shape),
                cond_pdf=np.asarray(t["cond_pdf"], dtype=float).reshape(shape)))
        ref = [ReferenceMarginal(res=r["res"],
                                 pdf=np.asarray(r["pdf"], dtype=float),
                                 cdf=np.asarray(r["cdf"], dtype=float))
               for r in doc["ref"]]
        return cls(doc["dim"], tables, ref)


def build_kr_map(p0: AnalyticDensity, rho: AnalyticDensity,
                 grid_res: Optional[int] = None) -> TriangularMap:
    if not rho.is_product or rho.marginals is None:
        raise NonProductReference("reference density must factorize into marginals")
    if p0.dim != rho.dim:
        raise DegenerateDensity("source and reference dimensions differ")
    if p0.dim > 3:
        raise ValueError("KR tables are limited to d <= 3")
    res = grid_res if grid_res is not None else default_grid_res(p0.dim)
    tables = [_build_conditional_table(p0, i, res) for i in range(1, p0.dim + 1)]
    ref = [_build_reference_marginal(m, res) for m in rho.marginals]
    return TriangularMap(p0.dim, tables, ref)


def kr_pushforward_residual(T: TriangularMap, p0: AnalyticDensity,
                            rho: AnalyticDensity, grid: QuadratureGrid) -> float:
    """sup over grid nodes of |p0(x) - rho(T(x)) * prod_i dT_i/dx_i|."""
    pts, _ = tensor_nodes(grid, p0.dim)
    tx = T.forward(pts)
    det = np.prod(T.jacobian_diagonal(pts), axis=1)
    return float(np.max(np.abs(p0(pts) - rho(tx) * det)))


# ----------------------------------------------------------------------
# Straight-line interpolation and its velocity field
# ----------------------------------------------------------------------

@dataclass
class StraightLinePath:
    """G_t(x) = t*T(x) + (1-t)*x for a fixed t."""

    map: TriangularMap
    t: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.t * self.map.forward(x) + (1.0 - self.t) * x


def invert_straight_line(T: TriangularMap, y: np.ndarray, t) -> np.ndarray:
    """Solve G_t(x) = y coordinate by coordinate.

    y is (N,d); t a scalar or (N,) vector. Uses bisection-safeguarded Newton
    on the strictly increasing map xi -> t*T_i(x_prev, xi) + (1-t)*xi.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, d = y.shape
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    out = np.empty_like(y)
    tol = 1e-13
    for i in range(1, d + 1):
        x_prev = out[:, : i - 1]
        yi = y[:, i - 1]

        def g(v):
            pts = np.concatenate([x_prev, v[:, None]], axis=1)
            return t * T.component(i, pts) + (1.0 - t) * v - yi

        def dg(v):
            pts = np.concatenate([x_prev, v[:, None]], axis=1)
            return t * T.diag_derivative(i, pts) + (1.0 - t)

        g0 = g(np.zeros(n))
        g1 = g(np.ones(n))
        if np.any(g0 > 1e-9) or np.any(g1 < -1e-9):
            raise RootBracketFailure(
                f"coordinate {i}: G_t does not bracket the target on [0,1]")
        xi = np.clip(yi, 0.0, 1.0)
        lo = np.zeros(n)
        hi = np.ones(n)
        for _ in range(100):
            gv = g(xi)
            lo = np.where(gv < 0, xi, lo)
            hi = np.where(gv > 0, xi, hi)
            xn = xi - gv / np.maximum(dg(xi), 1e-12)
            bad = (xn <= lo) | (xn >= hi)
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            if np.max(np.abs(gv)) < tol and np.max(np.abs(xn - xi)) < tol:
                xi = xn
                break
            xi = xn
        out[:, i - 1] = np.clip(xi, 0.0, 1.0)
    return out


class StraightLineField(VelocityField):
    """f(y,s) = T(F(y,s)) - F(y,s), where F is the straight-line inverse.

    The flow of this field follows the straight lines X(x,t) = t*T(x)+(1-t)*x,
    so the time-one map equals T exactly. The spatial Jacobian falls back to
    the finite-difference default (differentiating through the root solve
    analytically buys nothing at the solver tolerances used downstream).
    """

    def __init__(self, T: TriangularMap):
        self.map = T
        self.dim = T.dim

    def value(self, y, s):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x = invert_straight_line(self.map, y, s)
        return self.map.forward(x) - x


def straight_line_field(T: TriangularMap) -> StraightLineField:
    return StraightLineField(T)


# ----------------------------------------------------------------------
# Admissibility probe
# ----------------------------------------------------------------------

@dataclass
class BoundaryReport:
    ratio_sup: float
    worst_axis: int
    probes_per_axis: int
    eps_band: float


def boundary_vanishing_check(f: VelocityField, eps_band: float = 0.05,
                             n_probe: int = 512) -> BoundaryReport:
    """sup of |f_j(x,s)| / (x_j(1-x_j)) over probes with x_j near a face.

    A finite, moderate sup certifies the linear-vanishing (no-flux) property
    empirically; a diverging ratio flags a non-admissible field.
    """
    if not 0.0 < eps_band < 0.5:
        raise ValueError("eps_band must lie in (0, 0.5)")
    d = f.dim
    sampler = qmc.Halton(d=d + 1, scramble=False)
    base = sampler.random(n_probe)
    worst = 0.0
    worst_axis = 0
    for j in range(d):
        pts = base.copy()
        u = pts[:, j]
        lowside = u < 0.5
        xj = np.where(lowside, 2.0 * u * eps_band, 1.0 - 2.0 * (u - 0.5) * eps_band)
        xj = np.clip(xj, 1e-9, 1.0 - 1e-9)
        x = pts[:, :d].copy()
        x[:, j] = xj
        s = pts[:, d]
        vals = f.value(x, s)
        ratio = np.abs(vals[:, j]) / (xj * (1.0 - xj))
        r = float(np.max(ratio))
        if r > worst:
            worst, worst_axis = r, j
    return BoundaryReport(ratio_sup=worst, worst_axis=worst_axis,
                          probes_per_axis=n_probe, eps_band=eps_band)

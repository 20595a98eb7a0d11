"""Cube geometry, analytic densities, quadrature, and reproducible sampling.

Everything downstream works on the unit cube [0,1]^d. This module owns the
shared numerical plumbing: tensor-product Gauss-Legendre quadrature, a small
registry of analytic test densities with declared bounds, and counter-based
random streams whose output is independent of scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteValue(Exception):
    """An integrand returned NaN or infinity at a quadrature node."""


@dataclass(frozen=True)
class QuadratureGrid:
    """Per-axis Gauss-Legendre rule mapped from [-1,1] to [0,1].

    Weights are normalized to sum to 1 so that a constant integrand
    integrates exactly to its value.
    """

    nodes_per_axis: int
    nodes: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.nodes is None:
            x, w = np.polynomial.legendre.leggauss(self.nodes_per_axis)
            object.__setattr__(self, "nodes", 0.5 * (x + 1.0))
            object.__setattr__(self, "weights", 0.5 * w)


def default_grid(dim: int) -> QuadratureGrid:
    """32 nodes/axis up to d=3, 12 for d in {4,5}; above that use Monte Carlo."""
    if dim <= 3:
        return QuadratureGrid(32)
    if dim <= 5:
        return QuadratureGrid(12)
    raise ValueError("tensor quadrature capped at d=5; use monte_carlo_integrate")


def tensor_nodes(grid: QuadratureGrid, dim: int):
    """Full tensor grid as an (n^dim, dim) array plus matching weights."""
    axes = [grid.nodes] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    w = grid.weights
    wt = w
    for _ in range(dim - 1):
        wt = np.multiply.outer(wt, w)
    return pts, wt.ravel()


def integrate(f: Callable[[np.ndarray], np.ndarray], grid: QuadratureGrid, dim: int) -> float:
    """Tensor-product Gauss-Legendre approximation of the integral of f over [0,1]^dim.

    f must accept an (N, dim) array of points and return an (N,) array.
    """
    pts, wts = tensor_nodes(grid, dim)
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValue("integrand is not finite on the quadrature grid")
    return float(np.dot(wts, vals))


def monte_carlo_integrate(f, rng: "RngStream", n: int, dim: int):
    """MC fallback for d > 5: returns (estimate, standard_error)."""
    pts = rng.uniform(n, dim)
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValue("integrand is not finite on Monte Carlo points")
    est = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n))
    return est, se


class RngStream:
    """Counter-based (Philox) random stream.

    Identical (seed, stream_id) pairs reproduce identical sequences regardless
    of how work is scheduled; distinct stream_ids give independent streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def uniform(self, n: int, dim: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        self.counter += n * dim
        return self._gen.random((n, dim))

    def normal(self, shape) -> np.ndarray:
        self.counter += int(np.prod(shape))
        return self._gen.standard_normal(shape)

    def spawn(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)


def sample_uniform(rng: RngStream, n: int, dim: int) -> np.ndarray:
    """n iid uniform points on [0,1]^dim, returned as an (n, dim) array."""
    return rng.uniform(n, dim)


@dataclass(frozen=True)
class AnalyticDensity:
    """Evaluatable density on [0,1]^d with smoothness metadata and bounds.

    eval_xp(x, xp) evaluates the density with the given array namespace
    (numpy or jax.numpy) so the same definition serves both plain numerics
    and traced training code. x has shape (..., dim).
    """

    name: str
    dim: int
    eval_xp: Callable = field(repr=False, default=None)
    smoothness_k: int = 4
    lower_bound: float = 0.0
    upper_bound: float = 1.0
    is_product: bool = False
    marginals: Optional[Sequence[Callable]] = field(repr=False, default=None)
    grad_xp: Optional[Callable] = field(repr=False, default=None)

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.eval_xp(np.asarray(x, dtype=float), np))

    def grad(self, x) -> np.ndarray:
        """Spatial gradient, analytic when supplied, else central differences."""
        x = np.asarray(x, dtype=float)
        if self.grad_xp is not None:
            return np.asarray(self.grad_xp(x, np))
        h = 1e-6
        out = np.empty_like(x)
        for j in range(self.dim):
            lo = np.clip(x[..., j] - h, 0.0, 1.0)
            hi = np.clip(x[..., j] + h, 0.0, 1.0)
            xp_ = x.copy()
            xm_ = x.copy()
            xp_[..., j] = hi
            xm_[..., j] = lo
            out[..., j] = (self(xp_) - self(xm_)) / (hi - lo)
        return out


@dataclass
class ValidationReport:
    name: str
    normalization_residual: float
    observed_min: float
    observed_max: float
    declared_lower: float
    declared_upper: float
    passed: bool


def validate_density(p: AnalyticDensity, grid: QuadratureGrid) -> ValidationReport:
    """Check normalization and declared bounds over the quadrature grid."""
    pts, _ = tensor_nodes(grid, p.dim)
    vals = p(pts)
    total = integrate(p, grid, p.dim)
    obs_min, obs_max = float(vals.min()), float(vals.max())
    tol = 1e-8
    ok = (
        abs(total - 1.0) <= 1e-6
        and obs_min >= p.lower_bound - tol
        and obs_max <= p.upper_bound + tol
    )
    return ValidationReport(p.name, abs(total - 1.0), obs_min, obs_max,
                            p.lower_bound, p.upper_bound, ok)


# ----------------------------------------------------------------------
# Density corpus
# ----------------------------------------------------------------------

def uniform_density(dim: int = 1) -> AnalyticDensity:
    def ev(x, xp):
        return xp.ones(x.shape[:-1])

    def gr(x, xp):
        return xp.zeros_like(x)

    marg = [lambda t: np.ones_like(np.asarray(t, dtype=float))] * dim
    return AnalyticDensity("uniform", dim, ev, smoothness_k=10,
                           lower_bound=1.0, upper_bound=1.0,
                           is_product=True, marginals=marg, grad_xp=gr)


def affine_1d() -> AnalyticDensity:
    """p(x) = 0.5 + x on [0,1]."""
    def ev(x, xp):
        return 0.5 + x[..., 0]

    def gr(x, xp):
        g = xp.ones(x.shape[:-1])
        return g[..., None]

    return AnalyticDensity("affine1d", 1, ev, smoothness_k=10,
                           lower_bound=0.5, upper_bound=1.5,
                           is_product=True,
                           marginals=[lambda t: 0.5 + np.asarray(t, dtype=float)],
                           grad_xp=gr)


def cosine_1d(a: float = 0.5) -> AnalyticDensity:
    """p(x) = 1 + a*cos(2 pi x); integrates to 1 for any |a| < 1."""
    two_pi = 2.0 * math.pi

    def ev(x, xp):
        return 1.0 + a * xp.cos(two_pi * x[..., 0])

    def gr(x, xp):
        g = -a * two_pi * xp.sin(two_pi * x[..., 0])
        return g[..., None]

    return AnalyticDensity("cosine1d", 1, ev, smoothness_k=10,
                           lower_bound=1.0 - a, upper_bound=1.0 + a,
                           is_product=True,
                           marginals=[lambda t: 1.0 + a * np.cos(two_pi * np.asarray(t, dtype=float))],
                           grad_xp=gr)


def affine_product_2d() -> AnalyticDensity:
    """Product of two affine marginals 0.5 + x."""
    def ev(x, xp):
        return (0.5 + x[..., 0]) * (0.5 + x[..., 1])

    def gr(x, xp):
        g0 = 0.5 + x[..., 1]
        g1 = 0.5 + x[..., 0]
        return xp.stack([g0, g1], axis=-1)

    m = lambda t: 0.5 + np.asarray(t, dtype=float)
    return AnalyticDensity("affine_product2d", 2, ev, smoothness_k=10,
                           lower_bound=0.25, upper_bound=2.25,
                           is_product=True, marginals=[m, m], grad_xp=gr)


def cross_2d(a: float = 0.5) -> AnalyticDensity:
    """Non-product density p(x,y) = (1 + a*x*y) / (1 + a/4)."""
    z = 1.0 + a / 4.0

    def ev(x, xp):
        return (1.0 + a * x[..., 0] * x[..., 1]) / z

    def gr(x, xp):
        g0 = a * x[..., 1] / z
        g1 = a * x[..., 0] / z
        return xp.stack([g0, g1], axis=-1)

    return AnalyticDensity("cross2d", 2, ev, smoothness_k=10,
                           lower_bound=1.0 / z, upper_bound=(1.0 + a) / z,
                           is_product=False, grad_xp=gr)


DENSITY_REGISTRY: dict = {
    "uniform": uniform_density,
    "affine1d": affine_1d,
    "cosine1d": cosine_1d,
    "affine_product2d": affine_product_2d,
    "cross2d": cross_2d,
}


def make_density(name: str, **params) -> AnalyticDensity:
    if name not in DENSITY_REGISTRY:
        raise KeyError(f"unknown density {name!r}; have {sorted(DENSITY_REGISTRY)}")
    return DENSITY_REGISTRY[name](**params)


def corpus_densities(max_dim: int = 2) -> list:
    """The shipped test corpus (nonuniform targets), filtered by dimension."""
    all_ = [affine_1d(), cosine_1d(), affine_product_2d(), cross_2d()]
    return [p for p in all_ if p.dim <= max_dim]

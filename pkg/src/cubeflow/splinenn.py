"""B-spline quasi-interpolation and exact compilation to power-ReLU networks.

The quasi-interpolant Q_n^m[f] = sum_nu lambda_nu[f] B^m_{n,nu} uses local dual
functionals realized as m point evaluations inside one knot cell of each
basis function's support: on a single cell every spline in the space is a
polynomial of degree m-1, so solving the local collocation system gives
functionals that reproduce the whole spline space exactly while staying
bounded by a constant times ||f||_sup independently of n.

A Vandermonde-based boundary extension (values reflected through nodes
gamma_j in (-1/m, 0) with weights alpha_j reproducing polynomials of degree
k) lets callers evaluate the extended function slightly outside [0,1]; the
shipped stencils keep all evaluation points interior, so the extension is
exercised only by derivative probes near the boundary.

Compilation: B^m(n x - j) is a linear combination of truncated powers
max(0, n x - q)^{m-1}, i.e. one affine layer plus one eta_{m-1} activation;
products of basis values (d=2) use the polarization identity with exact
squares built from shifted eta_{m-1} units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb, factorial
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import qmc

from . import _bspline
from .fields import NetworkSpec, NetworkAudit, audit_network


class UnsupportedOrder(Exception):
    pass


class KnotProbe(Exception):
    pass


class SingularVandermonde(Exception):
    pass


def eval_bspline(m: int, n: int, j: int, x, deriv: int = 0):
    """deriv-th derivative of B^m(n*x - j); truncated-power sum, 0^0 := 0."""
    if m < 1:
        raise UnsupportedOrder("spline order must be >= 1")
    return _bspline.eval_bspline(m, n, j, np.asarray(x, dtype=float), deriv)


# ----------------------------------------------------------------------
# Boundary extension
# ----------------------------------------------------------------------

def build_extension(k: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes gamma_j equispaced in (-1/m, 0) and weights alpha_j solving
    sum_j alpha_j gamma_j^r = 1 for r = 0..k (polynomial reproduction)."""
    if k < 0 or m < k + 1:
        raise UnsupportedOrder("need k >= 0 and m >= k+1")
    gammas = np.array([-(j + 1) / ((k + 2) * m) for j in range(k + 1)])
    V = np.vander(gammas, k + 1, increasing=True).T   # V[r, j] = gamma_j^r
    if abs(np.linalg.det(V)) < 1e-300:
        raise SingularVandermonde("degenerate extension nodes")
    alphas = np.linalg.solve(V, np.ones(k + 1))
    return gammas, alphas


def eval_extended(f: Callable, x: np.ndarray, gammas: np.ndarray,
                  alphas: np.ndarray) -> np.ndarray:
    """Evaluate the extension Ef at points that may leave [0,1]^d.

    For a coordinate x_a < 0: Ef(x) = sum_j alpha_j f(... gamma_j * x_a ...),
    mirrored at the 1-face. Points must stay within one extension reach
    (coordinates in [-1, 2])."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if np.any(x < -1.0) or np.any(x > 2.0):
        raise ValueError("extension evaluated outside [-1, 2]^d")
    d = x.shape[1]
    for a in range(d):
        lo = x[:, a] < 0.0
        hi = x[:, a] > 1.0
        if not (np.any(lo) or np.any(hi)):
            continue
        out = np.empty(x.shape[0])
        inside = ~(lo | hi)
        if np.any(inside):
            out[inside] = eval_extended(f, x[inside], gammas, alphas)
        for mask, reflect in ((lo, lambda v, g: g * v),
                              (hi, lambda v, g: 1.0 + g * (v - 1.0))):
            if not np.any(mask):
                continue
            acc = np.zeros(int(mask.sum()))
            for g, a_w in zip(gammas, alphas):
                xm = x[mask].copy()
                xm[:, a] = reflect(xm[:, a], g)
                acc += a_w * eval_extended(f, xm, gammas, alphas)
            out[mask] = acc
        return out
    return np.asarray(f(x), dtype=float).reshape(-1)


# ----------------------------------------------------------------------
# Dual functionals
# ----------------------------------------------------------------------

def _dual_weights(m: int) -> np.ndarray:
    """Stencil weights w[o, s] for every cell offset o = l - j in 0..m-1.

    On a unit knot cell the m overlapping B-splines restricted to the m
    interior points (s+0.5)/m form an invertible collocation matrix; its
    inverse rows are exact coefficient-extraction functionals."""
    pts = (np.arange(m) + 0.5) / m
    A = np.empty((m, m))
    for r in range(m):
        i_r = -m + 1 + r
        A[:, r] = _bspline.bspline_value(m, pts - i_r)
    # w^T A = e_r  <=>  w = row r of A^{-1}; offset o maps to r = m-1-o
    Ainv = np.linalg.inv(A)
    return np.stack([Ainv[m - 1 - o] for o in range(m)], axis=0)


def _functional_matrix(m: int, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """(Lam, pts): Lam[j_idx, p] are stencil weights on per-axis points pts.

    pts enumerates the m interior points of every knot cell; row j of Lam
    applies the dual functional of B^m_{n,j} (index j = j_idx - m + 1)."""
    w = _dual_weights(m)
    nidx = n + m - 1
    pts = np.empty(n * m)
    for l in range(n):
        pts[l * m:(l + 1) * m] = (l + (np.arange(m) + 0.5) / m) / n
    lam = np.zeros((nidx, n * m))
    half = (m - 1) // 2
    for idx in range(nidx):
        j = idx - m + 1
        l = min(max(j + half, 0), n - 1)
        o = l - j
        lam[idx, l * m:(l + 1) * m] = w[o]
    return lam, pts


# ----------------------------------------------------------------------
# The quasi-interpolant
# ----------------------------------------------------------------------

@dataclass
class QuasiInterpolant:
    m: int
    n: int
    k: int
    d: int
    coeffs: np.ndarray                   # shape (n+m-1,)*d
    extension_gammas: np.ndarray
    extension_alphas: np.ndarray
    stencil_weights: np.ndarray = None   # the per-offset dual weights

    def evaluate(self, x: np.ndarray, derivs: Optional[Tuple[int, ...]] = None
                 ) -> np.ndarray:
        """Q (or a mixed partial derivative of it) at (N,d) points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if derivs is None:
            derivs = (0,) * self.d
        out = self.coeffs
        for a in range(self.d):
            basis = _bspline.basis_matrix(self.m, self.n, x[:, a], derivs[a])
            if a == 0:
                out = np.einsum("nj,j...->n...", basis, out)
            else:
                out = np.einsum("nj,nj...->n...", basis, out)
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)


def quasi_interpolate(f: Callable, m: int, n: int, k: int, d: int = 1
                      ) -> QuasiInterpolant:
    """Build Q_n^m[f] by tensorized application of the 1-D dual functionals.

    f takes an (N,d) array and returns (N,). Requires m >= k+1."""
    if m < k + 1:
        raise UnsupportedOrder(f"need m >= k+1 (got m={m}, k={k})")
    gammas, alphas = build_extension(k, m)
    lam, pts = _functional_matrix(m, n)

    mesh = np.meshgrid(*([pts] * d), indexing="ij")
    grid = np.stack([mm.ravel() for mm in mesh], axis=-1)
    vals = eval_extended(f, grid, gammas, alphas).reshape((n * m,) * d)

    # contract the last raw axis each pass; the finished axes accumulate in
    # front, so after d passes the coefficient axes sit in natural order
    coeffs = vals
    for _ in range(d):
        coeffs = np.tensordot(lam, coeffs, axes=([1], [coeffs.ndim - 1]))
    return QuasiInterpolant(m=m, n=n, k=k, d=d, coeffs=coeffs,
                            extension_gammas=gammas, extension_alphas=alphas,
                            stencil_weights=_dual_weights(m))


def _fd_derivative(f, x, axis, gammas, alphas, h=1e-4):
    """4th-order central difference in one axis, extension-backed near faces."""
    def shift(delta):
        xs = x.copy()
        xs[:, axis] += delta
        return eval_extended(f, xs, gammas, alphas)
    return (-shift(2 * h) + 8 * shift(h) - 8 * shift(-h) + shift(-2 * h)) / (12 * h)


def offknot_probes(n: int, count: int, d: int = 1) -> np.ndarray:
    """Low-discrepancy probes in (0,1)^d kept clear of the knots j/n.

    Probes landing within 1e-4/n of a knot are nudged half a knot cell
    toward the interior, so derivative comparisons are always evaluated
    where the spline is a plain polynomial."""
    sampler = qmc.Halton(d, scramble=False)
    sampler.fast_forward(1)
    pts = sampler.random(count) * (1.0 - 2e-3) + 1e-3
    scaled = pts * n
    near = np.abs(scaled - np.round(scaled)) < 1e-4
    pts[near] += np.where(pts[near] < 0.5, 0.5 / n, -0.5 / n)
    return pts


DEFAULT_KINK_ENSEMBLE = (0.3183098861837907, 0.41421356237309515,
                         0.2182818284590451, 0.5721, 0.5773502691896258)


def kink_rate_slopes(k: int, ns=(8, 16, 32, 64),
                     kinks=DEFAULT_KINK_ENSEMBLE) -> Tuple[float, float]:
    """Fitted log-log error slopes of Q_n^{k+1} on truncated-power targets.

    Targets (x-a)_+^k have exactly the smoothness that saturates the n^{-k}
    bound (smoother targets superconverge at the spline order k+1 and would
    not exhibit the rate). Sup errors are averaged over an ensemble of break
    locations to wash out the phase of the break within its knot cell, and
    probe sets are enriched inside the break's neighbouring cells so the sup
    is actually sampled. Returns (r=0 slope, r=1 slope); the theory gives
    -k and -(k-1)."""
    m = k + 1
    e0, e1 = [], []
    for n in ns:
        acc0, acc1 = [], []
        for a in kinks:
            f = lambda x, a=a: np.maximum(0.0, np.asarray(x).reshape(-1) - a) ** k
            qi = quasi_interpolate(f, m, n, k, 1)
            pr = offknot_probes(n, 200, 1)
            loc = (np.floor(a * n) + np.linspace(0.05, 0.95, 19)) / n
            for off in range(-m, m + 1):
                pr = np.vstack([pr, (loc + off / n).clip(1e-4, 1 - 1e-4)[:, None]])
            acc0.append(quasi_interp_error(f, qi, 0, pr))
            acc1.append(quasi_interp_error(f, qi, 1, pr))
        e0.append(np.mean(acc0))
        e1.append(np.mean(acc1))
    logn = np.log(np.asarray(ns, dtype=float))
    return (float(np.polyfit(logn, np.log(e0), 1)[0]),
            float(np.polyfit(logn, np.log(e1), 1)[0]))


def quasi_interp_error(f: Callable, qi: QuasiInterpolant, r: int,
                       probes: np.ndarray) -> float:
    """Empirical sup over probes of the order-r derivative gap f - Q.

    Probes must keep every coordinate at least 1e-6/n away from a knot.
    Maximizes over all multi-indices alpha with |alpha| = r (FD derivatives
    of f, analytic piecewise-polynomial derivatives of Q)."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    scaled = probes * qi.n
    if np.any(np.abs(scaled - np.round(scaled)) < 1e-6):
        raise KnotProbe("probe within 1e-6/n of a knot")
    worst = 0.0
    for alpha in _multi_indices(qi.d, r):
        qd = qi.evaluate(probes, derivs=alpha)
        fd = _target_derivative(f, probes, alpha, qi)
        worst = max(worst, float(np.max(np.abs(fd - qd))))
    return worst


def _multi_indices(d: int, r: int):
    if d == 1:
        yield (r,)
        return
    for first in range(r + 1):
        for rest in _multi_indices(d - 1, r - first):
            yield (first,) + rest


def _target_derivative(f, x, alpha, qi):
    if sum(alpha) == 0:
        return np.asarray(f(x), dtype=float).reshape(-1)
    if sum(alpha) > 1:
        raise NotImplementedError("derivative probes implemented for r <= 1")
    axis = int(np.argmax(alpha))
    return _fd_derivative(f, x, axis, qi.extension_gammas, qi.extension_alphas)


# ----------------------------------------------------------------------
# Compilation to networks
# ----------------------------------------------------------------------

def _poly_in_shifted_powers(target_coeffs: np.ndarray, mu: int,
                            shifts: np.ndarray) -> np.ndarray:
    """Weights omega with sum_i omega_i (z + c_i)^mu = given polynomial.

    target_coeffs[p] is the coefficient of z^p (length mu+1). Valid wherever
    every z + c_i > 0 so eta_mu(z + c_i) = (z + c_i)^mu."""
    A = np.empty((mu + 1, mu + 1))
    for p in range(mu + 1):
        A[p] = comb(mu, p) * shifts ** (mu - p)
    return np.linalg.solve(A, target_coeffs)


@dataclass
class CompiledNetwork:
    net: NetworkSpec
    m: int
    n: int
    d: int
    N_sub: int                       # the substitution N(n) = (1+m+n)^d
    f_sup: float                     # sup |f| used when sizing coefficients
    provenance: Dict[str, int]
    bound_constants: Dict[str, float]


def _bank_matrices(m: int, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-layer pre-activations and the basis-combination matrix.

    Pre-activation q has value n*x - q for q in {-m+1..n-1}; after eta_{m-1},
    row j of C recombines them into B^m(n x - j) (terms with q >= n vanish
    identically on [0,1] and are dropped)."""
    qs = np.arange(-m + 1, n)
    K = qs.size
    C = np.zeros((K, K))
    for idx, j in enumerate(range(-m + 1, n)):
        for i in range(m + 1):
            q = j + i
            if q <= n - 1:
                C[idx, q + m - 1] = (-1) ** i * comb(m, i) / factorial(m - 1)
    return qs.astype(float), C, None


def compile_to_network(qi: QuasiInterpolant) -> CompiledNetwork:
    """Emit a NetworkSpec with activation eta_{m-1} realizing Q_n^m[f] exactly
    on [0,1]^d. Supports d <= 2 (pair products by polarization)."""
    m, n, d = qi.m, qi.n, qi.d
    if m < 3:
        raise UnsupportedOrder("compilation needs m >= 3 (activation power >= 2)")
    if d > 2:
        raise UnsupportedOrder("network compilation implemented for d <= 2")
    mu = m - 1
    qs, C, _ = _bank_matrices(m, n)
    K = qs.size
    lam_sum = float(np.max(np.sum(np.abs(_dual_weights(m)), axis=1)))
    f_sup = float(np.max(np.abs(qi.coeffs))) / max(lam_sum, 1.0)

    if d == 1:
        w1 = np.full((K, 1), float(n))
        b1 = -qs
        w2 = (qi.coeffs @ C)[None, :]
        b2 = np.zeros(1)
        layers = [(w1, b1), (w2, b2)]
        prov = {"spline_bank_units": K, "product_units": 0, "depth": 2}
    else:
        # layer 1: truncated-power bank for both axes
        w1 = np.zeros((2 * K, 2))
        b1 = np.empty(2 * K)
        w1[:K, 0] = n
        w1[K:, 1] = n
        b1[:K] = -qs
        b1[K:] = -qs
        # layer 2 pre-activations: shifted u, v, u+v for every basis pair
        shifts = 1.0 + np.arange(mu + 1, dtype=float)
        sq = _poly_in_shifted_powers(np.eye(mu + 1)[2], mu, shifts)  # z^2 weights
        rows = []
        biases = []
        for j1 in range(K):
            for j2 in range(K):
                for kind in range(3):          # u+v, u, v
                    for c in shifts:
                        row = np.zeros(2 * K)
                        if kind in (0, 1):
                            row[:K] += C[j1]
                        if kind in (0, 2):
                            row[K:] += C[j2]
                        rows.append(row)
                        biases.append(c)
        w2 = np.asarray(rows)
        b2 = np.asarray(biases)
        # layer 3: Q = sum lam_{j1 j2} * 0.5 [ (u+v)^2 - u^2 - v^2 ]
        w3 = np.zeros((1, w2.shape[0]))
        pos = 0
        lamc = qi.coeffs
        for j1 in range(K):
            for j2 in range(K):
                for kind, s in ((0, 0.5), (1, -0.5), (2, -0.5)):
                    w3[0, pos:pos + mu + 1] = lamc[j1, j2] * s * sq
                    pos += mu + 1
        b3 = np.zeros(1)
        layers = [(w1, b1), (w2, b2), (w3, b3)]
        prov = {"spline_bank_units": 2 * K,
                "product_units": int(w2.shape[0]), "depth": 3}

    net = NetworkSpec(d_in=d, d_out=1, activation_power=mu, layers=layers)
    N_sub = (1 + m + n) ** d
    consts = {
        "C_L": float(d + 1),
        "C_W": 3.0 * (mu + 1),
        "C_S": 8.0 * (mu + 1) ** 2,
        "C_B": (2.0 ** m / factorial(m - 1)) * lam_sum
               * max(1.0, float(np.max(np.abs(
                   _poly_in_shifted_powers(np.eye(mu + 1)[2], mu,
                                           1.0 + np.arange(mu + 1, dtype=float))))))
               + 1.0,
    }
    return CompiledNetwork(net=net, m=m, n=n, d=d, N_sub=N_sub, f_sup=f_sup,
                           provenance=prov, bound_constants=consts)


@dataclass
class SizeAuditReport:
    L: int
    W: int
    S: int
    B: float
    N: int
    checks: Dict[str, bool]
    passed: bool


def audit_against_bounds(cn: CompiledNetwork, f_sup: float, N: int
                         ) -> SizeAuditReport:
    """Compare the recorded (L,W,S,B) against the growth-shape bounds
    L <= C_L, W <= C_W N, S <= C_S N, B <= C_B f_sup + N^{1/d} m."""
    a = cn.net.audit
    c = cn.bound_constants
    checks = {
        "L_constant": a.depth <= c["C_L"],
        "W_linear_in_N": a.width <= c["C_W"] * N,
        "S_linear_in_N": a.nonzeros <= c["C_S"] * N,
        "B_linear": a.max_abs <= c["C_B"] * max(f_sup, 1.0)
                    + cn.m * N ** (1.0 / cn.d),
    }
    return SizeAuditReport(L=a.depth, W=a.width, S=a.nonzeros, B=a.max_abs,
                           N=N, checks=checks, passed=all(checks.values()))

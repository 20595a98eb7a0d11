"""Cardinal B-spline evaluation via the truncated-power representation.

B^m has knots 0,1,...,m and degree m-1:

    B^m(u) = sum_{i=0}^m (-1)^i C(m,i) max(0, u-i)^{m-1} / (m-1)!

with the convention 0^0 := 0 so the m=1 indicator is right-open.
Derivatives follow by differentiating each truncated power.
"""

from __future__ import annotations

from math import comb, factorial

import numpy as np


def truncated_power(u, p, xp=np):
    """max(0,u)^p elementwise with 0^0 := 0."""
    u = xp.asarray(u)
    if p == 0:
        return xp.where(u > 0, 1.0, 0.0)
    return xp.where(u > 0, u, 0.0) ** p


def bspline_value(m: int, u, deriv: int = 0, xp=np):
    """deriv-th derivative of B^m at u (vectorized)."""
    u = xp.asarray(u, dtype=float)
    if deriv >= m:
        return xp.zeros_like(u)
    p = m - 1 - deriv
    out = xp.zeros_like(u)
    for i in range(m + 1):
        out = out + ((-1) ** i * comb(m, i)) * truncated_power(u - i, p, xp)
    return out / factorial(p)


def eval_bspline(m: int, n: int, j: int, x, deriv: int = 0, xp=np):
    """deriv-th derivative of the stretched/shifted spline B^m(n*x - j)."""
    return (float(n) ** deriv) * bspline_value(m, xp.asarray(x, dtype=float) * n - j, deriv, xp)


def basis_matrix(m: int, n: int, z, deriv: int = 0, xp=np):
    """All basis functions at once: column j-offset for j in {-m+1,...,n-1}.

    Returns shape z.shape + (n+m-1,). Broadcasts over the index axis in one
    shot so traced (jax) evaluation stays a handful of array ops.
    """
    z = xp.asarray(z, dtype=float)
    offsets = np.arange(-m + 1, n, dtype=float)
    u = z[..., None] * n - offsets
    return (float(n) ** deriv) * bspline_value(m, u, deriv, xp)


def index_range(m: int, n: int):
    return range(-m + 1, n)

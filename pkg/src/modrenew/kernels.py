"""Müller-Wang boundary kernels on a compact mark domain ``[0, tau]``.

The kernel family ``K_pq`` lives on ``[-p, q]`` and satisfies
``int K = 1`` and ``int u K = 0`` for every ``(p, q)`` in ``(0, 1]^2``.
Interior marks use the symmetric kernel ``K_11``; marks within one bandwidth
of ``0`` use the left family with ``q = x / a``; marks within one bandwidth of
``tau`` use the right family with ``p = (tau - x) / a``.

Boundary kernels take negative values on part of their support.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

SUPPORTED_MU = (1, 2, 3)

INTERIOR = "interior"
LEFT = "left"
RIGHT = "right"


class KernelDomainError(ValueError):
    """A mark or kernel argument falls outside its admissible domain."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel order, bandwidth and mark-domain endpoint.

    Parameters
    ----------
    mu : int
        Smoothness order; the kernel is a polynomial of degree ``2 * mu``.
    bandwidth : float
        Half-width ``a`` of the kernel window in mark units.
    tau : float
        Right endpoint of the mark domain ``[0, tau]``.
    """

    mu: int
    bandwidth: float
    tau: float

    def __post_init__(self):
        if self.mu not in SUPPORTED_MU:
            raise ValueError(f"mu must be one of {SUPPORTED_MU}, got {self.mu}")
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ValueError(f"tau must be positive and finite, got {self.tau}")
        if not (0 < 2 * self.bandwidth < self.tau):
            raise ValueError(
                f"bandwidth must satisfy 0 < 2a < tau; got a={self.bandwidth}, tau={self.tau}"
            )


@dataclass(frozen=True)
class BoundaryRegion:
    tag: str
    p: float
    q: float


def kernel_constant(mu: int) -> float:
    """``C(mu) = 2 (2 mu + 1) binom(2 mu - 1, mu)``."""
    return 2.0 * (2 * mu + 1) * comb(2 * mu - 1, mu)


def classify_region(x: float, spec: KernelSpec) -> BoundaryRegion:
    """Return the kernel region of mark ``x`` with its ``(p, q)`` parameters.

    ``x = a`` belongs to the left region and ``x = tau - a`` to the right
    region; both give ``p = q = 1`` so the kernel value is continuous there.
    The endpoints ``0`` and ``tau`` themselves give a zero-length one-sided
    window and are rejected.
    """
    a, tau = spec.bandwidth, spec.tau
    if not (0.0 <= x <= tau):
        raise KernelDomainError(f"mark {x} outside [0, {tau}]")
    if x == 0.0 or x == tau:
        raise KernelDomainError(f"mark {x} sits on the domain endpoint (degenerate window)")
    if a < x < tau - a:
        return BoundaryRegion(INTERIOR, 1.0, 1.0)
    # the ratios can exceed 1 by an ulp when x sits on a region edge
    if x <= a:
        return BoundaryRegion(LEFT, 1.0, min(x / a, 1.0))
    return BoundaryRegion(RIGHT, min((tau - x) / a, 1.0), 1.0)


def _central(r, mu):
    c = kernel_constant(mu)
    return 2.0 * c * 0.5 ** (2 * mu + 2) * (1.0 + r) ** mu * (1.0 - r) ** mu


def _left(r, p, q, mu):
    c = kernel_constant(mu)
    bracket = 2.0 * r * ((p - q) * mu - q) + mu * (p - q) ** 2 + 2.0 * q * q
    return c * (p + q) ** (-2 * mu - 2) * (p + r) ** mu * (q - r) ** (mu - 1) * bracket


def _right(r, p, q, mu):
    c = kernel_constant(mu)
    bracket = 2.0 * r * ((p - q) * mu + p) + mu * (p - q) ** 2 + 2.0 * p * p
    return c * (p + q) ** (-2 * mu - 2) * (p + r) ** (mu - 1) * (q - r) ** mu * bracket


def kernel_pq(r, p, q, mu, side=None):
    """Evaluate ``K_pq(r)``; zero outside ``[-p, q]``.

    Parameters
    ----------
    r : float or array_like
    p, q : float
        Support endpoints, each in ``(0, 1]``.
    mu : int
    side : {None, 'interior', 'left', 'right'}
        Which closed form to use. By default the interior form is used when
        ``p == q == 1``, the right form when only ``q == 1`` and the left form
        otherwise.
    """
    if mu not in SUPPORTED_MU:
        raise ValueError(f"mu must be one of {SUPPORTED_MU}, got {mu}")
    if not (0 < p <= 1 and 0 < q <= 1):
        raise KernelDomainError(f"p and q must lie in (0, 1], got p={p}, q={q}")
    if side is None:
        if p == 1.0 and q == 1.0:
            side = INTERIOR
        elif q == 1.0:
            side = RIGHT
        else:
            side = LEFT
    r_arr = np.asarray(r, dtype=float)
    if side == INTERIOR:
        val = _central(r_arr, mu)
    elif side == LEFT:
        val = _left(r_arr, p, q, mu)
    elif side == RIGHT:
        val = _right(r_arr, p, q, mu)
    else:
        raise ValueError(f"unknown side {side!r}")
    out = np.where((r_arr >= -p) & (r_arr <= q), val, 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_weights(x, w, spec: KernelSpec) -> np.ndarray:
    """Vectorised ``K_n(x, w)`` with broadcasting over ``x`` and ``w``.

    All three regions share the substitution ``r = (x - w) / a`` and the
    support ``r in [-p(x), q(x)]``, which keeps ``w`` inside ``[0, tau]``.
    """
    a, tau, mu = spec.bandwidth, spec.tau, spec.mu
    x, w = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(w, dtype=float))
    if np.any((x <= 0.0) | (x >= tau)):
        bad = x[(x <= 0.0) | (x >= tau)].flat[0]
        raise KernelDomainError(f"evaluation mark {bad} not inside (0, {tau})")
    if np.any((w < 0.0) | (w > tau)):
        bad = w[(w < 0.0) | (w > tau)].flat[0]
        raise KernelDomainError(f"mark {bad} outside [0, {tau}]")
    r = (x - w) / a
    left = x <= a
    right = x >= tau - a
    q = np.where(left, np.minimum(x / a, 1.0), 1.0)
    p = np.where(right, np.minimum((tau - x) / a, 1.0), 1.0)
    with np.errstate(invalid="ignore"):
        val = np.where(
            left,
            _left(r, p, q, mu),
            np.where(right, _right(r, p, q, mu), _central(r, mu)),
        )
    inside = (r >= -p) & (r <= q)
    return np.where(inside, val, 0.0)


def kernel_weight(x: float, w: float, spec: KernelSpec) -> float:
    """Scalar boundary-kernel weight ``K_n(x, w)``."""
    classify_region(x, spec)
    return float(kernel_weights(x, w, spec))


@lru_cache(maxsize=None)
def _gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


def _quad(fn, lo, hi, mu):
    # integrands are polynomials of degree <= 4 mu + 2; 2 mu + 4 nodes are exact
    nodes, weights = _gauss_legendre(2 * mu + 4)
    half = 0.5 * (hi - lo)
    u = lo + half * (nodes + 1.0)
    return float(half * np.sum(weights * fn(u)))


def kernel_moment(p: float, q: float, mu: int, k: int, side=None) -> float:
    """``int_{-p}^{q} u^k K_pq(u) du`` by exact Gauss-Legendre quadrature."""
    if not 0 <= k <= 2:
        raise ValueError("only moments k = 0, 1, 2 are supported")
    return _quad(lambda u: u**k * kernel_pq(u, p, q, mu, side), -p, q, mu)


def kernel_l2(p: float, q: float, mu: int, side=None) -> float:
    """``d_pq(K) = int_{-p}^{q} K_pq(u)^2 du``."""
    return _quad(lambda u: kernel_pq(u, p, q, mu, side) ** 2, -p, q, mu)


def region_l2(x: float, spec: KernelSpec) -> float:
    """``d_{p(x), q(x)}(K)`` for an evaluation mark ``x``."""
    reg = classify_region(x, spec)
    side = {INTERIOR: INTERIOR, LEFT: LEFT, RIGHT: RIGHT}[reg.tag]
    return kernel_l2(reg.p, reg.q, spec.mu, side)

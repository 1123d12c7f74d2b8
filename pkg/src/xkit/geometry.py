"""Integral-geometric primitives for excursion-set computations.

This module collects the small zoo of special functions and geometric
quantities that every expected-topology formula is built from:

* probabilists' Hermite polynomials ``H_n`` (including the ``n = -1``
  extension built from the Gaussian tail),
* volumes of unit balls and flag coefficients,
* Lipschitz-Killing curvatures (intrinsic volumes) of axis-aligned
  rectangles, together with the Steiner tube-volume expansion,
* Gaussian-measure Minkowski functionals of one-sided hitting sets for
  the Gaussian and chi-square marginals, plus a generic numerical route
  that works from a bare probability density.

Everything here is deterministic, cheap, and heavily cross-checked by
the test suite; the Monte-Carlo and lattice machinery lives elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e
from scipy import integrate, special

__all__ = [
    "Rectangle",
    "LKCVector",
    "GMFSeries",
    "ball_volume",
    "flag_coefficient",
    "hermite",
    "gaussian_density",
    "gaussian_tail",
    "chi2_density",
    "chi2_tail",
    "rectangle_lkcs",
    "tube_volume_rectangle",
    "gaussian_gmf",
    "chi2_gmf",
    "density_derivative_gmf",
]


# ---------------------------------------------------------------------------
# basic scalar functions
# ---------------------------------------------------------------------------

def ball_volume(j: int) -> float:
    """Volume ``omega_j`` of the unit ball in ``R^j``.

    ``omega_j = pi^(j/2) / Gamma(1 + j/2)``; ``omega_0 = 1`` by convention.
    """
    if j < 0:
        raise ValueError(f"ball dimension must be >= 0, got {j}")
    return math.pi ** (j / 2.0) / math.gamma(1.0 + j / 2.0)


def flag_coefficient(n: int, j: int) -> float:
    """Flag coefficient ``[n, j] = binom(n, j) * omega_n / (omega_(n-j) * omega_j)``.

    These combinatorial factors weight the terms of kinematic-formula
    expansions; ``[n, 0] = [n, n] = 1`` for every ``n``.
    """
    if j < 0 or n < j:
        raise ValueError(f"flag coefficient needs 0 <= j <= n, got n={n}, j={j}")
    return math.comb(n, j) * ball_volume(n) / (ball_volume(n - j) * ball_volume(j))


def gaussian_density(x):
    """Standard normal density ``phi(x)``."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return out if out.ndim else float(out)


def gaussian_tail(x):
    """Standard normal upper tail ``Psi(x) = P{N(0,1) >= x}``.

    Evaluated through the complementary error function, which keeps full
    relative accuracy (~1e-15) far into the tail instead of degrading to
    absolute accuracy the way ``1 - Phi(x)`` would.
    """
    x = np.asarray(x, dtype=float)
    out = 0.5 * special.erfc(x / math.sqrt(2.0))
    return out if out.ndim else float(out)


def chi2_density(x, k: int):
    """Density of the chi-square distribution with ``k`` degrees of freedom."""
    if k < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {k}")
    x = np.asarray(x, dtype=float)
    half = k / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(
            x > 0,
            np.exp((half - 1.0) * np.log(np.where(x > 0, x, 1.0)) - x / 2.0)
            / (2.0 ** half * math.gamma(half)),
            0.0,
        )
    return out if out.ndim else float(out)


def chi2_tail(x, k: int):
    """Upper tail ``P{chi^2_k >= x}`` via the regularised incomplete gamma.

    ``gammaincc`` is a continued-fraction/series implementation accurate to
    better than 1e-13 relative across the range used here.
    """
    if k < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {k}")
    x = np.asarray(x, dtype=float)
    out = np.where(x > 0, special.gammaincc(k / 2.0, np.maximum(x, 0.0) / 2.0), 1.0)
    return out if out.ndim else float(out)


def hermite(n: int, x):
    """Probabilists' Hermite polynomial ``H_n(x)`` for ``n >= -1``.

    ``H_0 = 1``, ``H_1 = x``, ``H_2 = x^2 - 1``, and in general
    ``H_(n+1)(x) = x H_n(x) - n H_(n-1)(x)``.  The index ``n = -1`` is the
    tail-based extension ``H_(-1)(x) = sqrt(2 pi) Psi(x) exp(x^2 / 2)``,
    which lets Gaussian Minkowski-functional formulas treat order zero on
    the same footing as the rest.
    """
    if n < -1:
        raise ValueError(f"Hermite index must be >= -1, got {n}")
    scalar = np.isscalar(x)
    x = np.asarray(x, dtype=float)
    if n == -1:
        out = math.sqrt(2.0 * math.pi) * gaussian_tail(x) * np.exp(0.5 * x * x)
    else:
        coeffs = np.zeros(n + 1)
        coeffs[n] = 1.0
        out = hermite_e.hermeval(x, coeffs)
    out = np.asarray(out, dtype=float)
    return float(out) if scalar else out


# ---------------------------------------------------------------------------
# rectangles and their Lipschitz-Killing curvatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned solid rectangle ``prod_i [0, T_i]`` with positive sides."""

    sides: tuple[float, ...]

    def __post_init__(self):
        sides = tuple(float(s) for s in self.sides)
        if not sides:
            raise ValueError("a rectangle needs at least one side")
        if any(not math.isfinite(s) or s <= 0 for s in sides):
            raise ValueError(f"rectangle sides must be positive and finite, got {sides}")
        object.__setattr__(self, "sides", sides)

    @property
    def dim(self) -> int:
        return len(self.sides)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    @classmethod
    def cube(cls, side: float, dim: int) -> "Rectangle":
        return cls((side,) * dim)


@dataclass(frozen=True)
class LKCVector:
    """Lipschitz-Killing curvatures ``(L_0, ..., L_N)`` of an N-dimensional set.

    Entries may be NaN when a particular order is not measurable by the
    producing routine (lattice estimators only reach the top two orders).
    """

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("LKC vector must be a non-empty 1-d sequence")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size - 1

    def __getitem__(self, j: int) -> float:
        return float(self.values[j])

    def __repr__(self):
        vals = ", ".join(f"{v:.6g}" for v in self.values)
        return f"LKCVector([{vals}])"


@dataclass(frozen=True)
class GMFSeries:
    """Gaussian-measure Minkowski functionals ``(M_0, ..., M_J)`` of a hitting set.

    ``k`` is the dimension of the Gaussian space the hitting set lives in
    (1 for a scalar threshold, ``k`` for a chi-square construction).  The
    series are the Taylor coefficients of the Gaussian measure of a tube:
    ``gamma_k(Tube(A, rho)) = sum_j rho^j / j! * M_j``.
    """

    k: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"ambient Gaussian dimension must be >= 1, got {self.k}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("GMF series must be a non-empty 1-d sequence")
        if not 0.0 <= values[0] <= 1.0 + 1e-12:
            raise ValueError(f"M_0 is a probability, got {values[0]}")
        object.__setattr__(self, "values", values)

    @property
    def max_order(self) -> int:
        return self.values.size - 1

    def __getitem__(self, j: int) -> float:
        return float(self.values[j])

    def __repr__(self):
        vals = ", ".join(f"{v:.6g}" for v in self.values)
        return f"GMFSeries(k={self.k}, [{vals}])"


def rectangle_lkcs(rect: Rectangle) -> LKCVector:
    """Lipschitz-Killing curvatures of a solid rectangle.

    For ``prod_i [0, T_i]`` the curvature of order ``j`` is the elementary
    symmetric polynomial ``e_j(T_1, ..., T_N)``: the total j-volume of the
    j-faces containing the origin.  In particular ``L_0 = 1`` (Euler
    characteristic), ``L_1 = sum T_i`` (half the boundary measure scaled),
    and ``L_N`` is the volume.
    """
    # np.poly builds prod (x - T_i) whose coefficients alternate in sign
    # with the elementary symmetric polynomials.
    coeffs = np.poly(np.asarray(rect.sides, dtype=float))
    signs = (-1.0) ** np.arange(rect.dim + 1)
    return LKCVector(signs * coeffs)


def tube_volume_rectangle(rect: Rectangle, rho: float) -> float:
    """Lebesgue volume of the rho-tube around a solid rectangle (Steiner formula).

    ``vol(Tube(A, rho)) = sum_{j=0}^{N} omega_{N-j} rho^{N-j} L_j(A)``
    where ``N = rect.dim`` and ``omega_j`` is the unit-ball volume.
    """
    if rho < 0:
        raise ValueError(f"tube radius must be >= 0, got {rho}")
    lkcs = rectangle_lkcs(rect)
    n = rect.dim
    return float(
        sum(ball_volume(n - j) * rho ** (n - j) * lkcs[j] for j in range(n + 1))
    )


# ---------------------------------------------------------------------------
# Gaussian-measure Minkowski functionals
# ---------------------------------------------------------------------------

def gaussian_gmf(u: float, max_order: int) -> GMFSeries:
    """Minkowski functionals of the half line ``[u, inf)`` under N(0,1).

    ``M_0 = Psi(u)`` and ``M_j = H_(j-1)(u) exp(-u^2/2) / sqrt(2 pi)`` for
    ``j >= 1``; with the ``H_(-1)`` convention the second expression covers
    ``j = 0`` as well.
    """
    if max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    u = float(u)
    values = np.empty(max_order + 1)
    values[0] = gaussian_tail(u)
    dens = gaussian_density(u)
    for j in range(1, max_order + 1):
        values[j] = hermite(j - 1, u) * dens
    return GMFSeries(k=1, values=values)


def _chi2_density_derivative(u: float, k: int, order: int) -> float:
    """Exact ``order``-th derivative of the chi-square density at ``u > 0``.

    Writing ``p(u) = c_k u^a exp(-u/2)`` with ``a = k/2 - 1``, the Leibniz
    rule gives

        p^(d)(u) = c_k exp(-u/2)
                   * sum_m binom(d, m) * a(a-1)...(a-m+1) * u^(a-m) * (-1/2)^(d-m).

    Terms whose falling factorial vanishes are skipped, which also makes
    ``u = 0`` well defined whenever the surviving exponents are nonnegative.
    """
    a = k / 2.0 - 1.0
    c = 1.0 / (2.0 ** (k / 2.0) * math.gamma(k / 2.0))
    total = 0.0
    for m in range(order + 1):
        fall = math.prod(a - i for i in range(m))  # empty product = 1
        if fall == 0.0:
            continue
        expo = a - m
        if u == 0.0:
            if expo < 0:
                raise ValueError(
                    f"chi-square density derivative of order {order} diverges at u=0 "
                    f"for k={k}; evaluate at u > 0"
                )
            powu = 1.0 if expo == 0 else 0.0
        else:
            powu = u ** expo
        total += math.comb(order, m) * fall * powu * (-0.5) ** (order - m)
    return c * math.exp(-u / 2.0) * total


def chi2_gmf(u: float, k: int, max_order: int) -> GMFSeries:
    """Minkowski functionals of the chi-square hitting set ``{x : |x|^2 >= u}``.

    ``M_0`` is the chi-square upper tail at ``u``; for ``j >= 1`` the series
    follows the density-derivative identity

        ``M_j = (-1)^(j-1) * d^(j-1)/du^(j-1) p_k(u)``,

    with ``p_k`` the chi-square density, evaluated in closed form by the
    Leibniz expansion above.  The identity is what the rest of the package
    treats as the definition of these functionals, and the finite-difference
    route in :func:`density_derivative_gmf` provides an independent check.
    For ``u <= 0`` the hitting set is all of ``R^k`` and the series is
    ``(1, 0, 0, ...)``.
    """
    if max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    if k < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {k}")
    u = float(u)
    values = np.zeros(max_order + 1)
    if u <= 0.0:
        # A nonpositive threshold is hit everywhere: the set is all of R^k,
        # its tube is again R^k, so the expansion is flat.
        values[0] = 1.0
        return GMFSeries(k=k, values=values)
    values[0] = chi2_tail(u, k)
    for j in range(1, max_order + 1):
        values[j] = (-1.0) ** (j - 1) * _chi2_density_derivative(u, k, j - 1)
    return GMFSeries(k=k, values=values)


def _central_difference_weights(order: int, half_width: int) -> np.ndarray:
    """Weights of a central finite-difference stencil on integer offsets.

    Solves the Vandermonde moment conditions
    ``sum_i w_i * o_i^m / m! = delta(m, order)`` on offsets
    ``-half_width..half_width``; the resulting stencil has accuracy order
    ``2 * half_width + 1 - order`` rounded down to an even number.
    """
    offsets = np.arange(-half_width, half_width + 1, dtype=float)
    n = offsets.size
    a = np.vstack([offsets ** m / math.factorial(m) for m in range(n)])
    b = np.zeros(n)
    b[order] = 1.0
    return np.linalg.solve(a, b)


def density_derivative_gmf(density, u: float, max_order: int, k: int = 1) -> GMFSeries:
    """Minkowski functionals from a bare marginal density, numerically.

    This is the generic (and deliberately independent) route: ``M_0`` is
    obtained by adaptive quadrature of ``density`` over ``[u, inf)`` and

        ``M_j = (-1)^(j-1) * d^(j-1)/du^(j-1) density(u)``   for ``j >= 1``

    by high-order central finite differences (stencil accuracy >= 4).  The
    step for the ``d``-th derivative is ``eps^(1/(d+4)) * max(1, |u|)``,
    which balances truncation against the ``1/h^d`` roundoff amplification;
    a fixed tiny step would lose all significant digits by ``d = 3``.

    ``density`` must be vectorised over numpy arrays (the scipy.stats pdf
    methods and the module's own densities all qualify).
    """
    if max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    u = float(u)
    values = np.empty(max_order + 1)
    tail, _ = integrate.quad(density, u, np.inf, limit=200)
    values[0] = min(max(tail, 0.0), 1.0)
    if max_order >= 1:
        values[1] = (-1.0) ** 0 * float(density(u))
    eps = np.finfo(float).eps
    for j in range(2, max_order + 1):
        d = j - 1
        half_width = max(2, (d + 1) // 2 + 1)
        h = eps ** (1.0 / (d + 4)) * max(1.0, abs(u))
        w = _central_difference_weights(d, half_width)
        offsets = np.arange(-half_width, half_width + 1, dtype=float)
        samples = np.asarray(density(u + offsets * h), dtype=float)
        deriv = float(np.dot(w, samples)) / h ** d
        values[j] = (-1.0) ** (j - 1) * deriv
    return GMFSeries(k=k, values=values)

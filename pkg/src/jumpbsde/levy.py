"""Levy measures with singular small-jump behaviour, jump-space partitions and
compound-Poisson sampling of the truncated measure.

Measures are built from one-dimensional *axis densities*.  For ``q = 1`` the
measure is the axis density itself.  For ``q > 1`` the measure is the
product-axis form ``nu = sum_k nu_k o embed_k``: independent jump components
along each coordinate axis, so every jump moves exactly one coordinate.  A
signed one-dimensional density is handled as two radial *sides*
(``sign = +1`` for ``e > 0`` and ``sign = -1`` for ``e < 0``), each a density
in the radius ``r = |e| > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .quadrature import QuadratureError, adaptive_gl, integrate_log, power_integral

SIDES = (1, -1)
QUAD_RTOL = 1e-10


class PartitionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# one-dimensional densities


class AxisDensity:
    """Density of a one-dimensional Levy measure, split into two radial sides.

    Subclasses provide ``side_density``; closed-form moments and inverse CDFs
    are optional overrides of the quadrature/tabulation fallbacks here.
    """

    alpha: Optional[float] = None
    kind = "abstract"

    def side_density(self, sign: int, r):
        raise NotImplementedError

    def side_rmax(self, sign: int) -> float:
        """Radius beyond which the side density vanishes (``inf`` if unbounded)."""
        raise NotImplementedError

    def side_rfar(self, sign: int) -> float:
        """Finite radius beyond which the remaining mass is negligible."""
        return self.side_rmax(sign)

    def density(self, e):
        e = np.asarray(e, dtype=float)
        out = np.zeros_like(e)
        pos, neg = e > 0, e < 0
        if pos.any():
            out[pos] = self.side_density(1, e[pos])
        if neg.any():
            out[neg] = self.side_density(-1, -e[neg])
        return out

    # -- integrals -----------------------------------------------------------
    def side_integral(self, sign: int, fun: Callable, a: float, b: float, rtol: float = QUAD_RTOL) -> float:
        """``int_a^b fun(r) m_sign(r) dr`` over radii, ``0 < a``; ``b`` may be inf."""
        b = min(b, self.side_rfar(sign))
        if not b > a:
            return 0.0
        val, _ = integrate_log(lambda r: fun(r) * self.side_density(sign, r), a, b, rtol=rtol, atol=1e-300)
        return val

    def side_moment(self, sign: int, k: float, a: float, b: float) -> float:
        """``int_a^b r^k m_sign(r) dr``; ``a = 0`` allowed when ``k > alpha``."""
        if a <= 0.0:
            if self.alpha is None:
                a_num = 1e-14 * b
                head = 0.0
            else:
                if k <= self.alpha:
                    raise ValueError(f"moment of order {k} diverges at the origin (alpha={self.alpha})")
                a_num = 1e-10 * b
                # the density is ~ c r^{-1-alpha} this close to 0
                c0 = self.side_density(sign, np.array([a_num]))[0] * a_num ** (1.0 + self.alpha)
                head = c0 * a_num ** (k - self.alpha) / (k - self.alpha)
            return head + self.side_integral(sign, lambda r: r ** k, a_num, b)
        return self.side_integral(sign, lambda r: r ** k, a, b)

    def side_mass(self, sign: int, a: float, b: float) -> float:
        return self.side_moment(sign, 0.0, a, b)

    # -- sampling ------------------------------------------------------------
    def side_inverse_cdf(self, sign: int, a: float, b: float, u):
        """Radii with law ``m_sign`` restricted to ``(a, b]`` at uniforms ``u``."""
        r_grid, cdf = self._cdf_table(sign, a, b)
        return np.interp(u, cdf, r_grid)

    def _cdf_table(self, sign: int, a: float, b: float, n: int = 513):
        b = min(b, self.side_rfar(sign))
        r_grid = np.exp(np.linspace(math.log(a), math.log(b), n))
        x, w = np.polynomial.legendre.leggauss(8)
        lo, hi = r_grid[:-1], r_grid[1:]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        nodes = mid[:, None] + half[:, None] * x[None, :]
        pieces = half * (self.side_density(sign, nodes.ravel()).reshape(nodes.shape) @ w)
        cdf = np.concatenate([[0.0], np.cumsum(pieces)])
        cdf /= cdf[-1]
        return r_grid, cdf

    def describe(self) -> dict:
        return {"kind": self.kind}


class PowerLawDensity(AxisDensity):
    """``m(e) = c_sign |e|^{-1-alpha}`` for ``0 < |e| <= r_max``."""

    kind = "power-law"

    def __init__(self, alpha: float, c: float = 1.0, r_max: float = 1.0, c_neg: Optional[float] = None):
        if not 0.0 < alpha < 2.0:
            raise ValueError("power-law index alpha must lie in (0, 2)")
        if not (math.isfinite(r_max) and r_max > 0):
            raise ValueError("power-law density needs a finite r_max > 0 (second moment must be finite)")
        self.alpha = float(alpha)
        self.c = {1: float(c), -1: float(c if c_neg is None else c_neg)}
        if min(self.c.values()) < 0:
            raise ValueError("power-law scale must be nonnegative")
        self.r_max = float(r_max)

    def side_rmax(self, sign):
        return self.r_max if self.c[sign] > 0 else 0.0

    def side_density(self, sign, r):
        r = np.asarray(r, dtype=float)
        return np.where((r > 0) & (r <= self.r_max), self.c[sign] * np.abs(r) ** (-1.0 - self.alpha), 0.0)

    def side_moment(self, sign, k, a, b):
        b = min(b, self.r_max)
        if not b > a or self.c[sign] == 0.0:
            return 0.0
        p = k - 1.0 - self.alpha
        if a <= 0.0:
            if p <= -1.0:
                raise ValueError(f"moment of order {k} diverges at the origin (alpha={self.alpha})")
            return self.c[sign] * b ** (p + 1.0) / (p + 1.0)
        return self.c[sign] * power_integral(p, a, b)

    def side_inverse_cdf(self, sign, a, b, u):
        b = min(b, self.r_max)
        al = self.alpha
        lo, hi = a ** (-al), b ** (-al)
        return (lo - np.asarray(u) * (lo - hi)) ** (-1.0 / al)

    def describe(self):
        return {"kind": self.kind, "alpha": self.alpha, "c": self.c[1], "c_neg": self.c[-1], "r_max": self.r_max}


class TemperedPowerLawDensity(AxisDensity):
    """``m(e) = c_sign exp(-rate_sign |e|) |e|^{-1-alpha}`` (CGMY / tempered stable)."""

    kind = "tempered-power-law"

    def __init__(self, alpha: float, c: float = 1.0, rate: float = 1.0, r_max: float = math.inf,
                 c_neg: Optional[float] = None, rate_neg: Optional[float] = None):
        if not 0.0 < alpha < 2.0:
            raise ValueError("tempered power-law index alpha must lie in (0, 2)")
        self.alpha = float(alpha)
        self.c = {1: float(c), -1: float(c if c_neg is None else c_neg)}
        self.rate = {1: float(rate), -1: float(rate if rate_neg is None else rate_neg)}
        if min(self.rate.values()) <= 0 and not math.isfinite(r_max):
            raise ValueError("unbounded tempered density needs positive tempering rates")
        self.r_max = float(r_max)

    def side_rmax(self, sign):
        return self.r_max if self.c[sign] > 0 else 0.0

    def side_rfar(self, sign):
        if self.c[sign] == 0:
            return 0.0
        return min(self.r_max, 1.0 + 45.0 / self.rate[sign])

    def side_density(self, sign, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            val = self.c[sign] * np.exp(-self.rate[sign] * r) * r ** (-1.0 - self.alpha)
        return np.where((r > 0) & (r <= self.r_max), val, 0.0)

    def describe(self):
        return {"kind": self.kind, "alpha": self.alpha, "c": self.c[1], "c_neg": self.c[-1],
                "rate": self.rate[1], "rate_neg": self.rate[-1], "r_max": self.r_max}


class TableDensity(AxisDensity):
    """Piecewise-constant density on signed intervals ``[edges[k], edges[k+1])``.

    Finite activity by construction; zero outside the table.
    """

    kind = "finite-activity-table"

    def __init__(self, edges: Sequence[float], values: Sequence[float]):
        edges = np.asarray(edges, dtype=float)
        values = np.asarray(values, dtype=float)
        if edges.ndim != 1 or len(edges) != len(values) + 1 or np.any(np.diff(edges) <= 0):
            raise ValueError("table needs strictly increasing edges and len(values) == len(edges) - 1")
        if np.any(values < 0):
            raise ValueError("table density must be nonnegative")
        self.edges, self.values = edges, values
        self.pieces = {}
        for sign in SIDES:
            lo = np.clip(sign * edges[:-1], 0, None) if sign > 0 else np.clip(-edges[1:], 0, None)
            hi = np.clip(sign * edges[1:], 0, None) if sign > 0 else np.clip(-edges[:-1], 0, None)
            keep = (hi > lo) & (values > 0)
            order = np.argsort(lo[keep])
            self.pieces[sign] = (lo[keep][order], hi[keep][order], values[keep][order])

    def side_rmax(self, sign):
        lo, hi, _ = self.pieces[sign]
        return float(hi.max()) if len(hi) else 0.0

    def side_density(self, sign, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        for lo, hi, v in zip(*self.pieces[sign]):
            out = np.where((r > lo) & (r <= hi), v, out)
        return out

    def side_moment(self, sign, k, a, b):
        total = 0.0
        for lo, hi, v in zip(*self.pieces[sign]):
            lo2, hi2 = max(lo, a), min(hi, b)
            if hi2 > lo2:
                total += v * (hi2 ** (k + 1) - lo2 ** (k + 1)) / (k + 1)
        return total

    def side_integral(self, sign, fun, a, b, rtol=QUAD_RTOL):
        total = 0.0
        for lo, hi, v in zip(*self.pieces[sign]):
            lo2, hi2 = max(lo, a), min(hi, b)
            if hi2 > lo2:
                val, _ = adaptive_gl(lambda r: fun(r) * v, lo2, hi2, rtol=rtol, atol=1e-300)
                total += val
        return total

    def side_inverse_cdf(self, sign, a, b, u):
        segs = []
        for lo, hi, v in zip(*self.pieces[sign]):
            lo2, hi2 = max(lo, a), min(hi, b)
            if hi2 > lo2:
                segs.append((lo2, hi2, v * (hi2 - lo2)))
        if not segs:
            raise PartitionError("inverse CDF requested on a zero-mass interval")
        masses = np.array([s[2] for s in segs])
        cum = np.concatenate([[0.0], np.cumsum(masses)]) / masses.sum()
        u = np.asarray(u, dtype=float)
        k = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, len(segs) - 1)
        lo = np.array([s[0] for s in segs])[k]
        hi = np.array([s[1] for s in segs])[k]
        frac = (u - cum[k]) / (cum[k + 1] - cum[k])
        return lo + np.clip(frac, 0.0, 1.0) * (hi - lo)

    def describe(self):
        return {"kind": self.kind, "edges": self.edges.tolist(), "values": self.values.tolist()}


# ---------------------------------------------------------------------------
# q-dimensional measure


@dataclass(frozen=True)
class LevyMeasure:
    """Levy measure on ``R^q \\ {0}`` in product-axis form (see module docstring)."""

    axes: tuple

    def __post_init__(self):
        if len(self.axes) < 1:
            raise ValueError("measure needs at least one axis")
        self._check_integrability()

    @property
    def q(self) -> int:
        return len(self.axes)

    @property
    def alpha(self) -> Optional[float]:
        al = [a.alpha for a in self.axes if a.alpha is not None]
        return max(al) if al else None

    @property
    def r_max(self) -> float:
        return max(ax.side_rmax(s) for ax in self.axes for s in SIDES)

    def density(self, e):
        """Density along the axes; points off the coordinate axes get 0 for q > 1."""
        e = np.atleast_2d(np.asarray(e, dtype=float))
        if self.q == 1:
            return self.axes[0].density(e[:, 0])
        out = np.zeros(len(e))
        nz = (e != 0).sum(axis=1)
        for k, ax in enumerate(self.axes):
            on_axis = (nz == 1) & (e[:, k] != 0)
            out[on_axis] = ax.density(e[on_axis, k])
        return out

    def _check_integrability(self):
        for ax in self.axes:
            for s in SIDES:
                if ax.side_rmax(s) <= 0:
                    continue
                inner = ax.side_moment(s, 2.0, 0.0, min(1.0, ax.side_rmax(s)))
                outer = ax.side_mass(s, 1.0, ax.side_rmax(s)) if ax.side_rmax(s) > 1.0 else 0.0
                if not (math.isfinite(inner) and math.isfinite(outer)):
                    raise ValueError("Levy measure violates int (|e|^2 ^ 1) nu(de) < inf")
                if ax.alpha is not None:
                    r = np.geomspace(1e-8, min(1.0, ax.side_rmax(s)), 64)
                    ratio = ax.side_density(s, r) * r ** (1.0 + ax.alpha)
                    if not np.all(np.isfinite(ratio)):
                        raise ValueError("density exceeds C|e|^{-q-alpha} bound near the origin")

    def describe(self) -> dict:
        return {"q": self.q, "axes": [ax.describe() for ax in self.axes]}


def power_law_measure(alpha: float, c: float = 1.0, r_max: float = 1.0, q: int = 1, c_neg=None) -> LevyMeasure:
    return LevyMeasure(tuple(PowerLawDensity(alpha, c, r_max, c_neg) for _ in range(q)))


def tempered_measure(alpha: float, c: float = 1.0, rate: float = 1.0, r_max: float = math.inf, q: int = 1,
                     c_neg=None, rate_neg=None) -> LevyMeasure:
    return LevyMeasure(tuple(TemperedPowerLawDensity(alpha, c, rate, r_max, c_neg, rate_neg) for _ in range(q)))


def table_measure(edges, values, q: int = 1) -> LevyMeasure:
    return LevyMeasure(tuple(TableDensity(edges, values) for _ in range(q)))


def small_jump_covariance(measure: LevyMeasure, epsilon: float) -> np.ndarray:
    """``Sigma_eps = int_{|e| <= eps} e e^T nu(de)`` (diagonal in product-axis form)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    diag = []
    for ax in measure.axes:
        v = 0.0
        for s in SIDES:
            if ax.side_rmax(s) > 0:
                v += ax.side_moment(s, 2.0, 0.0, min(epsilon, ax.side_rmax(s)))
        diag.append(v)
    return np.diag(diag)


def truncation_variance(measure: LevyMeasure, epsilon: float) -> float:
    """``sigma_eps^2 = int_{|e| <= eps} |e|^2 nu(de)``, the trace of ``Sigma_eps``."""
    return float(np.trace(small_jump_covariance(measure, epsilon)))


def psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues (quadrature noise) clamp to 0."""
    mat = 0.5 * (np.asarray(mat, dtype=float) + np.asarray(mat, dtype=float).T)
    w, v = np.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


# ---------------------------------------------------------------------------
# jump coefficients


def _central_jacobian(fun, x, h):
    """Jacobian of ``fun`` (R^q -> R^m) at a single point, central differences."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        dx = np.zeros_like(x)
        dx[k] = h
        cols.append((np.asarray(fun(x + dx)) - np.asarray(fun(x - dx))) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class JumpCoefficients:
    """Jump amplitude ``beta(x, e)`` and weight ``gamma(e)``.

    ``beta`` maps ``(n, q)`` states and ``(n, q)`` jumps to ``(n, q)``;
    ``gamma`` maps ``(n, q)`` jumps to ``(n,)``.  ``d_beta0`` (``(n, q)`` ->
    ``(n, q, q)``) and ``d_gamma0`` (``(q,)``) default to central finite
    differences at ``e = 0``.
    """

    beta: Callable
    gamma: Callable
    d_beta0: Optional[Callable] = None
    d_gamma0: Optional[np.ndarray] = None
    name: str = "custom"

    def dbeta0(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.d_beta0 is not None:
            return np.asarray(self.d_beta0(x), dtype=float)
        q = x.shape[1]
        out = np.empty((len(x), q, q))
        for n, xn in enumerate(x):
            h = 1e-6 * (1.0 + np.linalg.norm(xn))
            out[n] = _central_jacobian(lambda e: self.beta(xn[None, :], e[None, :])[0], np.zeros(q), h)
        return out

    def dgamma0(self, q: int) -> np.ndarray:
        if self.d_gamma0 is not None:
            return np.asarray(self.d_gamma0, dtype=float).reshape(q)
        return _central_jacobian(lambda e: self.gamma(e[None, :]), np.zeros(q), 1e-6).reshape(q)

    def check(self, xs, es, c_gamma: float = 10.0) -> list:
        """Spot-check ``beta(x,0)=0``, ``gamma(0)=0`` and ``0 <= gamma <= C(1 ^ |e|)``; returns violations."""
        xs = np.atleast_2d(xs)
        es = np.atleast_2d(es)
        bad = []
        if np.max(np.abs(self.beta(xs, np.zeros_like(xs)))) > 1e-12:
            bad.append("beta(x, 0) != 0")
        if abs(float(self.gamma(np.zeros((1, es.shape[1])))[0])) > 1e-12:
            bad.append("gamma(0) != 0")
        g = self.gamma(es)
        bound = c_gamma * np.minimum(1.0, np.linalg.norm(es, axis=1))
        if np.any(g < -1e-14) or np.any(g > bound + 1e-12):
            bad.append("gamma outside [0, C(1 ^ |e|)]")
        return bad


# ---------------------------------------------------------------------------
# partitions


@dataclass
class JumpPartition:
    """Finite partition of ``E^eps = {|e| > eps}`` into radial cells on each axis side.

    Cell ``j`` is ``{e = sign * r * unit(axis) : lo < r <= hi}``; a cell with
    ``is_tail`` set runs from ``r_work`` to the end of the support.
    """

    epsilon: float
    h: float
    r_work: float
    q: int
    axis: np.ndarray
    sign: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    is_tail: np.ndarray
    masses: np.ndarray
    representatives: np.ndarray
    gamma_avg: np.ndarray
    measure: LevyMeasure = field(repr=False)
    merged: int = 0

    @property
    def n_cells(self) -> int:
        return len(self.masses)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def tail_mass(self) -> float:
        return float(self.masses[self.is_tail].sum())

    def radius(self, j) -> np.ndarray:
        return np.abs(self.representatives[j, self.axis[j]]) if np.ndim(j) else abs(self.representatives[j, self.axis[j]])

    def locate(self, e) -> np.ndarray:
        """Cell index of each jump ``e`` (``(n, q)``); -1 when outside ``E^eps`` or off-axis."""
        e = np.atleast_2d(np.asarray(e, dtype=float))
        out = np.full(len(e), -1, dtype=np.int64)
        nz = (e != 0).sum(axis=1)
        for k in range(self.q):
            on = (nz == 1) & (e[:, k] != 0)
            if not on.any():
                continue
            idx = np.flatnonzero(on)
            r = np.abs(e[idx, k])
            sg = np.sign(e[idx, k]).astype(int)
            for s in SIDES:
                cells = np.flatnonzero((self.axis == k) & (self.sign == s))
                if len(cells) == 0:
                    continue
                order = cells[np.argsort(self.lo[cells])]
                lo, hi = self.lo[order], self.hi[order]
                sel = sg == s
                pos = np.searchsorted(hi, r[sel], side="left")
                ok = (pos < len(order))
                ok[ok] &= r[sel][ok] > lo[pos[ok]]
                res = np.full(sel.sum(), -1, dtype=np.int64)
                res[ok] = order[pos[ok]]
                out[idx[sel]] = res
        return out

    def k_h(self) -> float:
        """``min_j nu(K_j) gamma_j^2``, the refined-partition diagnostic."""
        return float(np.min(self.masses * self.gamma_avg ** 2)) if self.n_cells else 0.0

    def max_diameter(self, radius: float) -> float:
        """Largest diameter of ``B_R`` intersected with a cell."""
        hi = np.minimum(self.hi, radius)
        d = np.where(hi > self.lo, hi - self.lo, 0.0)
        return float(d.max()) if len(d) else 0.0

    def diagnostics(self) -> dict:
        return {
            "epsilon": self.epsilon, "h": self.h, "r_work": self.r_work, "cells": self.n_cells,
            "total_mass": self.total_mass, "tail_mass": self.tail_mass, "k_h": self.k_h(),
            "merged_cells": self.merged,
        }


def _stretch_edges(epsilon: float, r_work: float, h: float) -> np.ndarray:
    """Radial edges uniform (spacing <= h) in a coordinate that is ``log(r/eps)``
    up to ``r_c = max(1, eps)`` and continues linearly with slope ``1/r_c``.

    Cells are geometric near the singularity and uniform far out; halving
    ``h`` doubles the count up to one.
    """
    r_c = max(1.0, epsilon)

    def phi(r):
        return math.log(min(r, r_c) / epsilon) + max(r - r_c, 0.0) / r_c

    def phi_inv(s):
        s_c = math.log(r_c / epsilon)
        return epsilon * math.exp(s) if s <= s_c else r_c + (s - s_c) * r_c

    total = phi(r_work)
    n = max(1, int(math.ceil(total / h - 1e-9)))
    edges = np.array([phi_inv(total * k / n) for k in range(n + 1)])
    edges[0], edges[-1] = epsilon, r_work
    return edges


def default_r_work(measure: LevyMeasure, epsilon: float, level: float = 1e-6) -> float:
    """Working radius: end of a bounded support, else the ``1 - level`` quantile
    radius of ``nu`` restricted to ``E^eps``."""
    if math.isfinite(measure.r_max):
        return measure.r_max
    total = sum(ax.side_mass(s, epsilon, math.inf) for ax in measure.axes for s in SIDES if ax.side_rmax(s) > 0)
    if total <= 0:
        return 2 * epsilon
    lo, hi = epsilon, epsilon * 2
    far = max(ax.side_rfar(s) for ax in measure.axes for s in SIDES)

    def tail(r):
        return sum(ax.side_mass(s, r, math.inf) for ax in measure.axes for s in SIDES if ax.side_rmax(s) > r)

    while hi < far and tail(hi) > level * total:
        lo, hi = hi, hi * 2
    hi = min(hi, far)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if tail(mid) > level * total:
            lo = mid
        else:
            hi = mid
    return hi


def build_partition(measure: LevyMeasure, epsilon: float, h: float, r_work: Optional[float] = None,
                    gamma: Optional[Callable] = None, edges: Optional[Sequence[float]] = None) -> JumpPartition:
    """Partition ``E^eps`` into cells satisfying the disjoint-cover and refinement rules.

    ``edges`` overrides the generated radial edges (same edges on every axis
    side).  Masses and barycentres come from the measure's closed forms or
    quadrature; cells of zero mass are merged into their inner neighbour.
    """
    if not epsilon > 0:
        raise PartitionError("epsilon must be positive")
    if r_work is None:
        r_work = default_r_work(measure, epsilon) if edges is None else float(edges[-1])
    if not epsilon < r_work:
        raise PartitionError("need 0 < epsilon < R_work")
    if edges is None:
        if not h > 0:
            raise PartitionError("h must be positive")
        radial = _stretch_edges(epsilon, r_work, h)
    else:
        radial = np.asarray(edges, dtype=float)
        if radial[0] != epsilon or np.any(np.diff(radial) <= 0):
            raise PartitionError("explicit edges must start at epsilon and increase")
    gamma = gamma if gamma is not None else (lambda e: np.minimum(1.0, np.linalg.norm(e, axis=1)))
    q = measure.q
    rows = []
    merged = 0
    for k, ax in enumerate(measure.axes):
        unit = np.zeros(q)
        unit[k] = 1.0
        for s in SIDES:
            rmax = ax.side_rmax(s)
            if rmax <= epsilon:
                continue
            cells = [(a, b, False) for a, b in zip(radial[:-1], radial[1:]) if a < rmax]
            if rmax > radial[-1] and ax.side_mass(s, radial[-1], math.inf) > 0:
                cells.append((radial[-1], math.inf, True))
            fixed = []
            pending_lo = None
            for a, b, tail in cells:
                a = a if pending_lo is None else pending_lo
                m = ax.side_mass(s, a, b)
                if m <= 0.0 or not math.isfinite(m):
                    merged += 1
                    if fixed:
                        pa, _, ptail, pm = fixed[-1]
                        fixed[-1] = (pa, b, ptail or tail, pm)
                    else:
                        pending_lo = a
                    continue
                pending_lo = None
                fixed.append((a, b, tail, m))
            for a, b, tail, m in fixed:
                bary = ax.side_moment(s, 1.0, a, b) / m
                hi_eff = min(b, rmax)
                r_rep = float(np.clip(bary, a, hi_eff)) if math.isfinite(bary) else 0.5 * (a + hi_eff)
                g_int = ax.side_integral(s, lambda r: gamma(s * r[:, None] * unit[None, :]), a, b)
                rows.append((k, s, a, b, tail, m, s * r_rep * unit, g_int / m))
    if not rows:
        return empty_partition(measure, epsilon, h, r_work, merged)
    axis, sign, lo, hi, tail, masses, reps, gav = zip(*rows)
    return JumpPartition(
        epsilon=float(epsilon), h=float(h), r_work=float(r_work), q=q,
        axis=np.array(axis, dtype=int), sign=np.array(sign, dtype=int),
        lo=np.array(lo, dtype=float), hi=np.array(hi, dtype=float), is_tail=np.array(tail, dtype=bool),
        masses=np.array(masses, dtype=float), representatives=np.array(reps, dtype=float),
        gamma_avg=np.array(gav, dtype=float), measure=measure, merged=merged,
    )


def empty_partition(measure: LevyMeasure, epsilon: float, h: float = 0.0, r_work: Optional[float] = None,
                    merged: int = 0) -> JumpPartition:
    """Partition with no cells: the truncation removed every jump (``epsilon >= R_max``)."""
    q = measure.q
    r_work = float(measure.r_max if r_work is None else r_work)
    return JumpPartition(float(epsilon), float(h), r_work, q, np.zeros(0, int), np.zeros(0, int), np.zeros(0),
                         np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros((0, q)), np.zeros(0), measure, merged)


def cell_gamma_average(partition: JumpPartition, gamma: Callable) -> np.ndarray:
    """``gamma_j = (1/nu(K_j)) int_{K_j} gamma dnu`` for an arbitrary weight function."""
    out = np.empty(partition.n_cells)
    for j in range(partition.n_cells):
        ax = partition.measure.axes[partition.axis[j]]
        unit = np.zeros(partition.q)
        unit[partition.axis[j]] = 1.0
        s = int(partition.sign[j])
        out[j] = ax.side_integral(s, lambda r: gamma(s * r[:, None] * unit[None, :]),
                                  partition.lo[j], partition.hi[j]) / partition.masses[j]
    return out


def gamma_quadrature_error(partition: JumpPartition, gamma: Callable) -> float:
    """``R^2_gamma(h) = sum_j int_{K_j} |gamma(e) - gamma_j|^2 nu(de)``."""
    gav = cell_gamma_average(partition, gamma)
    total = 0.0
    for j in range(partition.n_cells):
        ax = partition.measure.axes[partition.axis[j]]
        unit = np.zeros(partition.q)
        unit[partition.axis[j]] = 1.0
        s = int(partition.sign[j])
        gj = gav[j]
        total += ax.side_integral(s, lambda r: (gamma(s * r[:, None] * unit[None, :]) - gj) ** 2,
                                  partition.lo[j], partition.hi[j])
    return total


# ---------------------------------------------------------------------------
# sampling


@dataclass
class JumpRealization:
    """Jumps of the truncated compound Poisson measure over one time step.

    ``path[k]`` and ``cell[k]`` locate jump ``k`` of size ``sizes[k]``;
    ``counts[p, j]`` is the number of jumps of path ``p`` in cell ``j``,
    obtained by binning the same jumps.
    """

    path: np.ndarray
    cell: np.ndarray
    sizes: np.ndarray
    counts: np.ndarray

    @property
    def n_jumps(self) -> int:
        return len(self.cell)


def sample_cell_sizes(partition: JumpPartition, cells: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Jump vectors distributed as ``nu`` restricted to each given cell."""
    sizes = np.zeros((len(cells), partition.q))
    for j in np.unique(cells):
        sel = cells == j
        ax = partition.measure.axes[partition.axis[j]]
        s = int(partition.sign[j])
        r = ax.side_inverse_cdf(s, partition.lo[j], partition.hi[j], u[sel])
        sizes[sel, partition.axis[j]] = s * r
    return sizes


def sample_jumps(partition: JumpPartition, dt: float, rng: np.random.Generator, batch: int = 1) -> JumpRealization:
    """Compound-Poisson jumps on ``E^eps`` over a step ``dt`` for ``batch`` paths.

    Per path the jump count is Poisson(``Lambda dt``), cells are chosen with
    probability ``lambda_j / Lambda`` and sizes by inverse CDF inside the
    cell; per-cell counts are the binned jumps.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    J = partition.n_cells
    lam = partition.total_mass * dt
    if J == 0 or lam <= 0.0:
        return JumpRealization(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, partition.q)),
                               np.zeros((batch, J), dtype=np.int64))
    n = rng.poisson(lam, size=batch)
    total = int(n.sum())
    path = np.repeat(np.arange(batch, dtype=np.int64), n)
    cdf = np.cumsum(partition.masses) / partition.total_mass
    cell = np.minimum(np.searchsorted(cdf, rng.random(total), side="right"), J - 1).astype(np.int64)
    sizes = sample_cell_sizes(partition, cell, rng.random(total))
    counts = np.bincount(path * J + cell, minlength=batch * J).reshape(batch, J)
    return JumpRealization(path, cell, sizes, counts)

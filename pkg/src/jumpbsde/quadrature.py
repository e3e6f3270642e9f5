"""Adaptive composite Gauss-Legendre quadrature.

Singular Levy densities are integrated after the substitution ``e = exp(s)``,
which turns a power singularity at the origin into exponential decay in
``s``; ``integrate_log`` does exactly that.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


class QuadratureError(RuntimeError):
    """Adaptive quadrature could not reach the requested tolerance."""

    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(f"{message} (estimate={estimate:.6g}, error estimate={error:.3g})")
        self.estimate = estimate
        self.error = error


@lru_cache(maxsize=8)
def _gl_rule(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def _panel(fun, a: float, b: float, order: int) -> float:
    x, w = _gl_rule(order)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    vals = np.asarray(fun(mid + half * x), dtype=float)
    return half * float(np.dot(w, vals))


def adaptive_gl(fun, a: float, b: float, rtol: float = 1e-10, atol: float = 1e-14,
                order: int = 15, max_panels: int = 20000, initial_panels: int = 8):
    """Integrate ``fun`` over ``[a, b]``; returns ``(value, error_estimate)``.

    ``fun`` is called with a 1-d array of nodes and must return an array of
    the same shape.  Panels are bisected until the difference between the
    panel rule and the sum over its two halves is below its share of the
    global tolerance.
    """
    if b == a:
        return 0.0, 0.0
    sign = 1.0
    if b < a:
        a, b, sign = b, a, -1.0
    edges = np.linspace(a, b, initial_panels + 1)
    stack = [(lo, hi, _panel(fun, lo, hi, order)) for lo, hi in zip(edges[:-1], edges[1:])]
    rough = abs(sum(v for _, _, v in stack))
    total = 0.0
    err_total = 0.0
    n_panels = len(stack)
    width = b - a
    while stack:
        lo, hi, whole = stack.pop()
        mid = 0.5 * (lo + hi)
        left = _panel(fun, lo, mid, order)
        right = _panel(fun, mid, hi, order)
        err = abs(left + right - whole)
        tol = max(atol, rtol * rough) * (hi - lo) / width
        if err <= tol or (hi - lo) <= 1e-13 * max(1.0, abs(mid)):
            total += left + right
            err_total += err
            continue
        n_panels += 2
        if n_panels > max_panels:
            raise QuadratureError("adaptive quadrature exceeded panel budget",
                                  sign * (total + left + right), err_total + err)
        rough = max(rough, abs(total + left + right))
        stack.append((lo, mid, left))
        stack.append((mid, hi, right))
    if err_total > 10 * max(atol, rtol * abs(total)) and err_total > 1e-12:
        raise QuadratureError("adaptive quadrature did not converge", sign * total, err_total)
    return sign * total, err_total


def integrate_log(fun, a: float, b: float, rtol: float = 1e-10, atol: float = 1e-14):
    """``int_a^b fun(e) de`` for ``0 < a < b`` via ``e = exp(s)``."""
    if not (0.0 < a <= b):
        raise ValueError(f"integrate_log needs 0 < a <= b, got a={a}, b={b}")
    if a == b:
        return 0.0, 0.0

    def g(s):
        e = np.exp(s)
        return np.asarray(fun(e), dtype=float) * e

    n0 = max(8, int(math.ceil(math.log(b / a) / 0.5)))
    return adaptive_gl(g, math.log(a), math.log(b), rtol=rtol, atol=atol, initial_panels=min(n0, 200))


def power_integral(p: float, a: float, b: float) -> float:
    """``int_a^b e^p de`` for ``0 < a <= b``."""
    if abs(p + 1.0) < 1e-14:
        return math.log(b / a)
    return (b ** (p + 1.0) - a ** (p + 1.0)) / (p + 1.0)


def composite_rule(a: float, b: float, panels: int, order: int = 10, log: bool = False):
    """Fixed composite GL nodes and weights on ``[a, b]`` (optionally log-spaced panels).

    Used where the same integral is needed at many states and adaptive
    refinement per state would be too slow.
    """
    x, w = _gl_rule(order)
    if log:
        edges = np.exp(np.linspace(math.log(a), math.log(b), panels + 1))
    else:
        edges = np.linspace(a, b, panels + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    halves = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mids[:, None] + halves[:, None] * x[None, :]).ravel()
    weights = (halves[:, None] * w[None, :]).ravel()
    return nodes, weights

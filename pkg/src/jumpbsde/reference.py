"""Oracles for the solver: regressions, projections, the least-squares
intermediate scheme, nonlocal operators of smooth functions, manufactured
drivers, projection-error estimators and the small-jump strong-rate
experiment.

Conditional expectations ``E[. | X_{t_i}]`` are global polynomial ridge
regressions on the state, which is adequate for ``q <= 3``.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .levy import (JumpPartition, LevyMeasure, build_partition, psd_sqrt, sample_jumps, small_jump_covariance,
                   truncation_variance)
from .paths import Driver, ModelCoefficients, PathBatch, TimeGrid, euler_step, partition_compensator
from .quadrature import QuadratureError, composite_rule

log = logging.getLogger(__name__)

MAX_STATE_DIM = 3


class RegressionWarning(UserWarning):
    pass


class FixedPointError(RuntimeError):
    def __init__(self, step: int, residual: float, iterations: int):
        super().__init__(f"fixed point at step {step} did not converge in {iterations} iterations "
                         f"(residual {residual:.3g})")
        self.step = step
        self.residual = residual


# ---------------------------------------------------------------------------
# regression


def _multi_indices(q: int, degree: int):
    out = [a for a in itertools.product(range(degree + 1), repeat=q) if sum(a) <= degree]
    return sorted(out, key=lambda a: (sum(a), tuple(-k for k in a)))


@dataclass
class BasisRegression:
    """Ridge regression on total-degree polynomials of standardised states.

    Coordinates with zero sample variance are dropped; with none left the
    fit is the sample mean.  An ill-conditioned normal matrix triggers a
    larger ridge and sets ``flagged``.
    """

    degree: int = 3
    ridge: float = 1e-8
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None
    coef: Optional[np.ndarray] = None
    flagged: bool = False
    normal_residual: float = 0.0
    resid_std: Optional[np.ndarray] = None
    n_fit: int = 0

    @property
    def constant_only(self) -> bool:
        return self.active is not None and not self.active.any()

    def features(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = (x[:, self.active] - self.shift[self.active]) / self.scale[self.active]
        idx = _multi_indices(z.shape[1], self.degree)
        cols = [np.prod(z ** np.array(a)[None, :], axis=1) if z.shape[1] else np.ones(len(x)) for a in idx]
        return np.stack(cols, axis=1)

    def fit(self, x, y) -> "BasisRegression":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        vec = y.ndim == 1
        Y = y[:, None] if vec else y
        self.shift = x.mean(axis=0)
        sd = x.std(axis=0)
        self.active = sd > 1e-12 * (1.0 + np.abs(self.shift))
        self.scale = np.where(self.active, sd, 1.0)
        phi = self.features(x)
        n, p = phi.shape
        A = phi.T @ phi / n
        rhs = phi.T @ Y / n
        ridge = self.ridge
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e12:
            ridge = max(ridge, 1e-6 * np.trace(A) / p)
            self.flagged = True
            warnings.warn(f"ill-conditioned regression (cond {cond:.3g}); ridge raised to {ridge:.3g}",
                          RegressionWarning, stacklevel=2)
        M = A + ridge * np.eye(p)
        M[0, 0] -= ridge  # intercept is not shrunk
        coef = np.linalg.solve(M, rhs)
        # one step of iterative refinement
        coef += np.linalg.solve(M, rhs - M @ coef)
        self.normal_residual = float(np.linalg.norm(M @ coef - rhs) / max(np.linalg.norm(rhs), 1e-300))
        self.coef = coef[:, 0] if vec else coef
        res = Y - phi @ coef
        self.resid_std = res.std(axis=0)
        self.n_fit = n
        return self

    def predict(self, x) -> np.ndarray:
        return self.features(x) @ self.coef

    def __call__(self, x):
        return self.predict(x)


def project_time(values, anchors, times=None, degree: int = 3, ridge: float = 1e-8):
    """Estimate ``pi_[s,t](Z) = E[(1/(t-s)) int_s^t Z_r dr | anchor]``.

    ``values`` is ``(B, M+1)`` or ``(B, M+1, d)`` samples of ``Z`` on a grid
    of ``[s, t]`` (uniform unless ``times`` is given).  Returns the fitted
    regression and its values at the anchors.
    """
    v = np.asarray(values, dtype=float)
    if times is None:
        times = np.linspace(0.0, 1.0, v.shape[1])
    times = np.asarray(times, dtype=float)
    avg = np.trapezoid(v, times, axis=1) / (times[-1] - times[0])
    reg = BasisRegression(degree, ridge).fit(anchors, avg)
    return reg, reg.predict(anchors)


def cell_rule(partition: JumpPartition, j: int, panels: int = 4, order: int = 8):
    """Nodes (``(K, q)`` jump vectors) and ``nu``-weights on cell ``j``."""
    ax = partition.measure.axes[partition.axis[j]]
    s = int(partition.sign[j])
    hi = min(partition.hi[j], ax.side_rfar(s))
    r, w = composite_rule(partition.lo[j], hi, panels, order, log=True)
    e = np.zeros((len(r), partition.q))
    e[:, partition.axis[j]] = s * r
    return e, w * ax.side_density(s, r)


def project_cell(values, weights, anchors, times=None, degree: int = 3, ridge: float = 1e-8):
    """Estimate ``pi_[s,t],K(U) = E[(1/((t-s) nu(K))) int_s^t int_K U_r(e) nu(de) dr | anchor]``.

    ``values`` is ``(B, M+1, K)``: samples of ``U_r(e_k)`` at the cell nodes
    of ``cell_rule`` with ``nu``-weights ``weights``.
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    cellavg = v @ w / w.sum()
    return project_time(cellavg, anchors, times, degree, ridge)


# ---------------------------------------------------------------------------
# least-squares intermediate scheme


@dataclass
class IntermediateStep:
    i: int
    t: float
    dt: float
    cond_mean: BasisRegression  # x -> E_i[V_{i+1}]
    z: BasisRegression
    l: Optional[BasisRegression]
    u: Optional[BasisRegression]
    fixed_point_residual: float
    iterations: int


@dataclass
class IntermediateSolution:
    coeffs: ModelCoefficients
    grid: TimeGrid
    partition: JumpPartition
    sigma_eps_sqrt: np.ndarray
    steps: List[IntermediateStep]
    v0: float
    v0_stderr: float
    mode: str
    tol: float = 1e-8
    max_iter: int = 50

    def evaluate(self, i: int, x) -> dict:
        """``v, z, l, u`` (``u`` at the representatives) of step ``i`` at states ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        st = self.steps[i]
        c = st.cond_mean(x)
        z = st.z(x).reshape(len(x), -1)
        l = st.l(x).reshape(len(x), -1) if st.l is not None else np.zeros((len(x), self.coeffs.q))
        u = st.u(x).reshape(len(x), -1) if st.u is not None else np.zeros((len(x), 0))
        p = _p_value(self.coeffs, self.partition, self.sigma_eps_sqrt, l, u)
        v, res, it = _fixed_point(self.coeffs.driver, st.t, x, c, z, p, st.dt, self.tol, self.max_iter)
        if res > self.tol:
            raise FixedPointError(i, res, it)
        return {"v": v, "z": z, "l": l, "u": u}


def _p_value(coeffs, partition, sigma_eps_sqrt, l, u):
    p = u @ (partition.gamma_avg * partition.masses) if u.shape[1] else np.zeros(len(l))
    if coeffs.zeta:
        p = p + l @ (np.asarray(sigma_eps_sqrt).T @ coeffs.jump.dgamma0(coeffs.q))
    return p


def _fixed_point(driver, t, x, c, z, p, dt, tol, max_iter):
    """Picard iteration for ``v = c + f(t, x, v, z, p) dt`` (pointwise)."""
    v = c.copy()
    res = np.inf
    for it in range(1, max_iter + 1):
        v_new = c + driver(t, x, v, z, p) * dt
        res = float(np.max(np.abs(v_new - v))) if len(v) else 0.0
        v = v_new
        if res <= tol:
            return v, res, it
    return v, res, max_iter


def _net_increment(nets, t, dt, x, coeffs, partition, sigma_eps_sqrt):
    """``f(t_l, X_l, Y_l, Z_l, P_l) dt_l`` with the trained networks of one step."""
    y, z, w, u = nets.evaluate(x, partition.representatives)
    w = w if w is not None else np.zeros((len(x), coeffs.q))
    p = _p_value(coeffs, partition, sigma_eps_sqrt, w, u)
    return coeffs.driver(t, x, y, z, p) * dt


def solve_intermediate(coeffs: ModelCoefficients, grid: TimeGrid, partition: JumpPartition, paths: PathBatch,
                       solution=None, degree: int = 3, ridge: float = 1e-8, tol: float = 1e-8,
                       max_iter: int = 50) -> IntermediateSolution:
    """Least-squares Monte Carlo realisation of the intermediate backward scheme.

    With ``solution=None`` the auxiliary ``V_{i+1} = g(X_N) + sum_{l > i} f_l dt_l``
    is built from the scheme's own fits (pure LSMC); with a trained solution
    its networks supply ``Y, Z, W, U`` inside the sum.
    """
    q = coeffs.q
    if q > MAX_STATE_DIM:
        raise ValueError(f"basis regression oracle supports q <= {MAX_STATE_DIM}, got q={q}")
    lip = getattr(coeffs.driver, "lipschitz", None)
    if lip is not None and np.isfinite(lip) and lip * grid.dt_max > 0.5:
        raise ValueError(f"step too large for the fixed-point iteration: dt*C_f = {lip * grid.dt_max:.3g} > 0.5")
    valid = np.flatnonzero(paths.valid)
    X = paths.X[valid]
    inc = paths.increments
    N = grid.N
    masses = partition.masses
    acc = coeffs.g(X[:, N, :])  # V_{i+1} along each path
    steps: List[Optional[IntermediateStep]] = [None] * N
    v0_stderr = float("nan")
    for i in range(N - 1, -1, -1):
        t, dt = float(grid.nodes[i]), float(grid.steps[i])
        x = X[:, i, :]
        cm = BasisRegression(degree, ridge).fit(x, acc)
        centred = acc - cm(x)
        dW = inc.dW[valid, i, :]
        z_reg = BasisRegression(degree, ridge).fit(x, centred[:, None] * dW / dt)
        l_reg = None
        if coeffs.zeta:
            l_reg = BasisRegression(degree, ridge).fit(x, centred[:, None] * inc.dWt[valid, i, :] / dt)
        u_reg = None
        if partition.n_cells:
            nt = inc.compensated(i)[valid]
            u_reg = BasisRegression(degree, ridge).fit(x, centred[:, None] * nt / (dt * masses[None, :]))
        c = cm(x)
        z = z_reg(x).reshape(len(x), -1)
        l = l_reg(x).reshape(len(x), -1) if l_reg is not None else np.zeros((len(x), q))
        u = u_reg(x).reshape(len(x), -1) if u_reg is not None else np.zeros((len(x), 0))
        p = _p_value(coeffs, partition, paths.sigma_eps_sqrt, l, u)
        v, res, it = _fixed_point(coeffs.driver, t, x, c, z, p, dt, tol, max_iter)
        if res > tol:
            raise FixedPointError(i, res, it)
        steps[i] = IntermediateStep(i, t, dt, cm, z_reg, l_reg, u_reg, res, it)
        if i == 0:
            v0_stderr = float(np.ravel(cm.resid_std)[0] / math.sqrt(max(len(x), 1)))
            v0 = float(np.mean(v))
        if solution is None:
            acc = acc + (v - c)
        else:
            acc = acc + _net_increment(solution.steps[i], t, dt, x, coeffs, partition, paths.sigma_eps_sqrt)
    return IntermediateSolution(coeffs, grid, partition, paths.sigma_eps_sqrt, steps, v0, v0_stderr,
                                "lsmc" if solution is None else "nets", tol, max_iter)


# ---------------------------------------------------------------------------
# nonlocal operators of smooth functions


def _axis_breaks(ax, sign: int, a: float) -> np.ndarray:
    """Panel edges on ``[a, rfar]``: log-spaced below 1, width <= 0.5 beyond, plus known kinks."""
    b = ax.side_rfar(sign)
    if not b > a:
        return np.array([])
    knots = [a, b]
    top = min(1.0, b)
    if top > a:
        n = max(2, int(math.ceil(math.log(top / a) / 0.2)))
        knots.extend(np.exp(np.linspace(math.log(a), math.log(top), n + 1)))
    if b > 1.0:
        lo = max(1.0, a)
        n = max(1, int(math.ceil((b - lo) / 0.5)))
        knots.extend(np.linspace(lo, b, n + 1))
    for attr in ("edges",):
        extra = getattr(ax, attr, None)
        if extra is not None:
            knots.extend(np.abs(np.asarray(extra, dtype=float)))
    knots = np.unique(np.asarray(knots))
    return knots[(knots >= a) & (knots <= b)]


def _radial_nodes(ax, sign: int, a: float, order: int, refine: int = 1):
    knots = _axis_breaks(ax, sign, a)
    if len(knots) < 2:
        return np.zeros(0), np.zeros(0)
    if refine > 1:
        fine = [np.linspace(lo, hi, refine + 1)[:-1] for lo, hi in zip(knots[:-1], knots[1:])]
        knots = np.concatenate(fine + [knots[-1:]])
    x, w = np.polynomial.legendre.leggauss(order)
    mid, half = 0.5 * (knots[:-1] + knots[1:]), 0.5 * (knots[1:] - knots[:-1])
    r = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return r, wt * ax.side_density(sign, r)


def _central_grad(u, x, h=1e-5):
    x = np.atleast_2d(x)
    out = np.empty_like(x)
    for k in range(x.shape[1]):
        dx = np.zeros(x.shape[1])
        dx[k] = h
        out[:, k] = (u(x + dx) - u(x - dx)) / (2 * h)
    return out


def _central_hess(u, x, h=1e-4):
    x = np.atleast_2d(x)
    n, q = x.shape
    out = np.empty((n, q, q))
    u0 = u(x)
    for k in range(q):
        for m in range(k, q):
            if k == m:
                dx = np.zeros(q)
                dx[k] = h
                val = (u(x + dx) - 2 * u0 + u(x - dx)) / h ** 2
            else:
                dk, dm = np.zeros(q), np.zeros(q)
                dk[k], dm[m] = h, h
                val = (u(x + dk + dm) - u(x + dk - dm) - u(x - dk + dm) + u(x - dk - dm)) / (4 * h * h)
            out[:, k, m] = out[:, m, k] = val
    return out


def _additive_beta(x, e):
    return e


def _jump_sweep(integrand, x, measure: LevyMeasure, lower: float, order: int, refine: int):
    """``sum_axes sum_sides int_{r > lower} integrand(x, e(r)) nu(dr)`` for all rows of ``x``."""
    n, q = x.shape
    total = np.zeros(n)
    for k, ax in enumerate(measure.axes):
        for s in (1, -1):
            if ax.side_rmax(s) <= lower:
                continue
            r, w = _radial_nodes(ax, s, lower, order, refine)
            if not len(r):
                continue
            e = np.zeros((len(r), q))
            e[:, k] = s * r
            xr = np.repeat(x, len(r), axis=0)
            er = np.tile(e, (n, 1))
            total += integrand(xr, er).reshape(n, len(r)) @ w
    return total


def _checked_sweep(integrand, x, measure, lower, order, rtol, atol):
    coarse = _jump_sweep(integrand, x, measure, lower, order, 1)
    fine = _jump_sweep(integrand, x, measure, lower, order, 2)
    err = float(np.max(np.abs(fine - coarse))) if len(fine) else 0.0
    scale = float(np.max(np.abs(fine))) if len(fine) else 0.0
    if err > max(atol, rtol * scale):
        raise QuadratureError("nonlocal operator quadrature not converged", scale, err)
    return fine


def _signed_first_moment(measure: LevyMeasure, a: float, b: float, weight=None) -> np.ndarray:
    """``int_{a < |e| <= b} e w(e) nu(de)`` per axis (``w = 1`` by default)."""
    out = np.zeros(measure.q)
    for k, ax in enumerate(measure.axes):
        for s in (1, -1):
            hi = min(b, ax.side_rmax(s))
            if hi <= a:
                continue
            if weight is None:
                out[k] += s * ax.side_moment(s, 1.0, a, hi)
            else:
                unit = np.zeros(measure.q)
                unit[k] = 1.0
                out[k] += s * ax.side_integral(s, lambda r: r * weight(s * r[:, None] * unit[None, :]),
                                               max(a, 1e-300), hi)
    return out


def apply_nonlocal_J(u: Callable, x, measure: LevyMeasure, epsilon_inner: float = 1e-2, beta: Callable = None,
                     dbeta0: Callable = None, grad: Callable = None, hess: Callable = None, epsilon: float = 0.0,
                     order: int = 10, rtol: float = 1e-9, atol: float = 1e-10) -> np.ndarray:
    """``int_{|e| > epsilon} (u(x + beta(x,e)) - u(x) - Du(x) beta(x,e)) nu(de)`` at each row of ``x``.

    Jumps below ``epsilon_inner`` enter through the second-order Taylor term
    ``(1/2) tr(D^2u Dbeta(x,0) Sigma Dbeta(x,0)^T)`` with ``Sigma`` the
    covariance of ``nu`` on ``epsilon < |e| <= epsilon_inner``; larger jumps
    by composite Gauss-Legendre quadrature.  ``u`` maps ``(n, q)`` to
    ``(n,)``; derivatives default to central differences.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    beta = beta or _additive_beta
    grad = grad or (lambda z: _central_grad(u, z))
    du = grad(x)
    ux = u(x)

    def integrand(xr, er):
        n_nodes = len(xr) // len(x)
        b = beta(xr, er)
        return (u(xr + b) - np.repeat(ux, n_nodes) - np.sum(np.repeat(du, n_nodes, axis=0) * b, axis=1))

    lower = max(epsilon, epsilon_inner)
    out = _checked_sweep(integrand, x, measure, lower, order, rtol, atol)
    if epsilon < epsilon_inner:
        cov = small_jump_covariance(measure, epsilon_inner)
        if epsilon > 0:
            cov = cov - small_jump_covariance(measure, epsilon)
        D2 = (hess or (lambda z: _central_hess(u, z)))(x)
        if dbeta0 is None and beta is _additive_beta:
            out += 0.5 * np.einsum("nij,ji->n", D2, cov)
        else:
            Db = dbeta0(x) if dbeta0 is not None else _fd_dbeta0(beta, x)
            out += 0.5 * np.einsum("nij,njk,kl,nil->n", D2, Db, cov, Db)
    return out


def _fd_dbeta0(beta, x, h=1e-6):
    n, q = x.shape
    out = np.empty((n, q, q))
    for k in range(q):
        e = np.zeros((n, q))
        e[:, k] = h
        out[:, :, k] = (beta(x, e) - beta(x, -e)) / (2 * h)
    return out


def apply_nonlocal_B(u: Callable, x, measure: LevyMeasure, gamma: Callable, epsilon: float, zeta: int,
                     Sigma_eps_sqrt=None, beta: Callable = None, dbeta0: Callable = None, grad: Callable = None,
                     dgamma0=None, epsilon_inner: float = 1e-2, order: int = 10, rtol: float = 1e-9,
                     atol: float = 1e-10) -> np.ndarray:
    """``int_{|e| > epsilon} (u(x + beta(x,e)) - u(x)) gamma(e) nu(de) + zeta Dgamma(0) Sigma_eps Dbeta(x,0)^T Du(x)``.

    ``Sigma_eps = S S^T`` for ``S = Sigma_eps_sqrt`` (computed from the
    measure when omitted).  Jumps below ``epsilon_inner`` use the first-order
    expansion ``Du(x) Dbeta(x,0) int e gamma(e) nu(de)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, q = x.shape
    beta = beta or _additive_beta
    grad = grad or (lambda z: _central_grad(u, z))
    ux = u(x)

    def integrand(xr, er):
        n_nodes = len(xr) // n
        return (u(xr + beta(xr, er)) - np.repeat(ux, n_nodes)) * gamma(er)

    lower = max(epsilon, epsilon_inner)
    out = _checked_sweep(integrand, x, measure, lower, order, rtol, atol)
    Db = None
    if epsilon < epsilon_inner or zeta:
        Db = dbeta0(x) if dbeta0 is not None else _fd_dbeta0(beta, x)
        du = grad(x)
    if epsilon < epsilon_inner:
        m1 = _signed_first_moment(measure, epsilon, epsilon_inner, weight=gamma)
        out += np.einsum("nk,nkl,l->n", du, Db, m1)
    if zeta:
        if Sigma_eps_sqrt is None:
            Sigma_eps_sqrt = psd_sqrt(small_jump_covariance(measure, epsilon))
        S = np.asarray(Sigma_eps_sqrt, dtype=float)
        dg = np.zeros(q) if dgamma0 is None else np.asarray(dgamma0, dtype=float).reshape(q)
        out += zeta * np.einsum("k,kl,nml,nm->n", dg, S @ S.T, Db, du)
    return out


# ---------------------------------------------------------------------------
# manufactured solutions


@dataclass
class ManufacturedSolution:
    """A smooth ``u*(t, x)`` with optional analytic derivatives (central differences otherwise)."""

    u: Callable
    u_t: Optional[Callable] = None
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    name: str = "custom"

    def value(self, t, x):
        return self.u(t, np.atleast_2d(x))

    def time_derivative(self, t, x, h=1e-5):
        x = np.atleast_2d(x)
        if self.u_t is not None:
            return self.u_t(t, x)
        return (self.u(t + h, x) - self.u(t - h, x)) / (2 * h)

    def gradient(self, t, x):
        x = np.atleast_2d(x)
        return self.grad(t, x) if self.grad is not None else _central_grad(lambda z: self.u(t, z), x)

    def hessian(self, t, x):
        x = np.atleast_2d(x)
        return self.hess(t, x) if self.hess is not None else _central_hess(lambda z: self.u(t, z), x)


def sine_solution(speed: float = 0.5, freq: float = 1.0) -> ManufacturedSolution:
    """``u*(t, x) = sin(freq * sum(x) + speed * t)``."""

    def arg(t, x):
        return freq * np.sum(x, axis=1) + speed * t

    def hess(t, x):
        q = x.shape[1]
        return -freq ** 2 * np.sin(arg(t, x))[:, None, None] * np.ones((1, q, q))

    return ManufacturedSolution(
        u=lambda t, x: np.sin(arg(t, x)),
        u_t=lambda t, x: speed * np.cos(arg(t, x)),
        grad=lambda t, x: freq * np.cos(arg(t, x))[:, None] * np.ones((1, x.shape[1])),
        hess=hess, name=f"sine(speed={speed},freq={freq})",
    )


def linear_solution(weights=1.0) -> ManufacturedSolution:
    """``u*(t, x) = w . x`` (time independent)."""

    def u(t, x):
        return x @ np.broadcast_to(np.asarray(weights, float), (x.shape[1],))

    return ManufacturedSolution(
        u=u, u_t=lambda t, x: np.zeros(len(x)),
        grad=lambda t, x: np.broadcast_to(np.asarray(weights, float), x.shape).copy(),
        hess=lambda t, x: np.zeros((len(x), x.shape[1], x.shape[1])), name="linear",
    )


def apply_generator(u_star: ManufacturedSolution, t: float, x, coeffs: ModelCoefficients, measure: LevyMeasure,
                    epsilon: float = 0.0, zeta: int = 0, epsilon_inner: float = 1e-2) -> np.ndarray:
    """``L[u*](t, x)``: drift, diffusion (plus ``zeta`` Gaussian compensation) and the jump part on ``|e| > epsilon``.

    ``epsilon = 0`` gives the generator of the untruncated forward process.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    du = u_star.gradient(t, x)
    D2 = u_star.hessian(t, x)
    sig = coeffs.sigma(x)
    diff = np.einsum("nqd,npd->nqp", sig, sig)
    if zeta and epsilon > 0:
        Db = coeffs.jump.dbeta0(x)
        diff = diff + np.einsum("nik,kl,njl->nij", Db, small_jump_covariance(measure, epsilon), Db)
    out = np.sum(coeffs.b(x) * du, axis=1) + 0.5 * np.einsum("nij,nij->n", diff, D2)
    out += apply_nonlocal_J(lambda z: u_star.u(t, z), x, measure, epsilon_inner, beta=coeffs.jump.beta,
                            dbeta0=coeffs.jump.dbeta0, grad=lambda z: u_star.gradient(t, z),
                            hess=lambda z: u_star.hessian(t, z), epsilon=epsilon)
    return out


class ManufacturedDriver(Driver):
    """``f(t, x, y, z, p) = h(t, x) + kappa sin(y)`` with ``h`` tabulated on a state grid per time node."""

    def __init__(self, h: Callable, kappa: float, tables: dict = None, name: str = "manufactured"):
        self.h = h
        self.kappa = float(kappa)
        self.tables = tables or {}
        super().__init__(self._f, self._partials, name=name, lipschitz=abs(self.kappa))

    def h_value(self, t, x):
        x = np.atleast_2d(x)
        tab = self.tables.get(round(float(t), 12))
        if tab is not None and x.shape[1] == 1:
            grid, vals = tab
            inside = (x[:, 0] >= grid[0]) & (x[:, 0] <= grid[-1])
            out = np.empty(len(x))
            out[inside] = np.interp(x[inside, 0], grid, vals)
            if (~inside).any():
                out[~inside] = self.h(t, x[~inside])
            return out
        return self.h(t, x)

    def _f(self, t, x, y, z, p):
        return self.h_value(t, x) + self.kappa * np.sin(y)

    def _partials(self, t, x, y, z, p):
        return self.kappa * np.cos(y), np.zeros(np.shape(z)), np.zeros(len(y))


def manufactured_driver(u_star: ManufacturedSolution, coeffs: ModelCoefficients, measure: LevyMeasure,
                        kappa: float = 0.5, epsilon: float = 0.0, zeta: int = 0, epsilon_inner: float = 1e-2,
                        times: Sequence[float] = None, x_range=None, n_grid: int = 4001) -> ManufacturedDriver:
    """Driver making ``u*`` an exact solution of ``u_t + L[u] + f(t, x, u, .) = 0``.

    ``h = -(u*_t + L[u*]) - kappa sin(u*)``.  The generator ``L`` is that of
    the forward process truncated at ``epsilon`` with ``zeta`` Gaussian
    compensation; ``epsilon = 0`` gives the untruncated equation, so the
    truncation error of a solver stays visible.  For ``q = 1`` with ``times``
    and ``x_range`` given, ``h(t_i, .)`` is tabulated (linear interpolation
    on ``n_grid`` points) and evaluated directly outside the range.
    """

    def h(t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gen = apply_generator(u_star, t, x, coeffs, measure, epsilon, zeta, epsilon_inner)
        return -(u_star.time_derivative(t, x) + gen) - kappa * np.sin(u_star.value(t, x))

    tables = {}
    if times is not None and x_range is not None and coeffs.q == 1:
        grid = np.linspace(float(x_range[0]), float(x_range[1]), n_grid)
        for t in times:
            tables[round(float(t), 12)] = (grid, h(float(t), grid[:, None]))
    return ManufacturedDriver(h, kappa, tables, name=f"manufactured[{u_star.name}]")


def pde_residual(u_star: ManufacturedSolution, driver: Driver, t, x, coeffs: ModelCoefficients,
                 measure: LevyMeasure, epsilon: float = 0.0, zeta: int = 0, epsilon_inner: float = 1e-3):
    """``u*_t + L[u*] + f(t, x, u*, sigma^T Du*, 0)`` at one time and a batch of states."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = u_star.value(t, x)
    z = np.einsum("nqd,nq->nd", coeffs.sigma(x), u_star.gradient(t, x))
    gen = apply_generator(u_star, t, x, coeffs, measure, epsilon, zeta, epsilon_inner)
    return u_star.time_derivative(t, x) + gen + driver(t, x, y, z, np.zeros(len(x)))


# ---------------------------------------------------------------------------
# projection errors and isometries


@dataclass
class ProjectionErrors:
    R2_Z: float
    R2_Z_se: float
    R2_L: float
    R2_L_se: float
    R2_U: float
    R2_U_se: float
    R2_U_tail: float = 0.0


def _per_path_time_error(values, anchors_per_step, fine_times, substeps, degree, ridge):
    """Per path ``sum_i int_{t_i}^{t_i+1} |V_t - pi_i(V)|^2 dt`` for ``values`` ``(B, N*M+1, ...)``."""
    B = values.shape[0]
    N = (values.shape[1] - 1) // substeps
    total = np.zeros(B)
    for i in range(N):
        sl = slice(i * substeps, (i + 1) * substeps + 1)
        v = values[:, sl]
        tt = fine_times[sl]
        _, pi = project_time(v, anchors_per_step[i], tt, degree, ridge)
        pi = pi.reshape((B,) + (1,) + v.shape[2:])
        dev = (v - pi) ** 2
        if dev.ndim > 2:
            dev = dev.reshape(B, dev.shape[1], -1).sum(axis=2)
        total += np.trapezoid(dev, tt, axis=1)
    return total


def projection_error_estimates(fine_times, anchors, substeps: int, Z=None, L=None, U=None,
                               U_weights=None, U_tail=None, degree: int = 3, ridge: float = 1e-8) -> ProjectionErrors:
    """Monte Carlo estimates of the time-projection errors of ``Z``, ``L`` and ``U``.

    ``fine_times`` has ``N * substeps + 1`` points; ``anchors[i]`` is the
    ``(B, q)`` state at coarse node ``i``.  ``Z`` and ``L`` are ``(B, n_fine, .)``
    samples.  ``U`` is a list over cells of ``(B, n_fine, K_j)`` samples at the
    nodes of ``cell_rule`` with weights ``U_weights[j]``; ``U_tail`` marks
    the cells whose share is also reported separately.
    """
    fine_times = np.asarray(fine_times, dtype=float)

    def mean_se(v):
        return float(np.mean(v)), float(np.std(v) / math.sqrt(len(v)))

    rz = rzs = rl = rls = ru = rus = rtail = 0.0
    if Z is not None:
        rz, rzs = mean_se(_per_path_time_error(np.asarray(Z), anchors, fine_times, substeps, degree, ridge))
    if L is not None:
        rl, rls = mean_se(_per_path_time_error(np.asarray(L), anchors, fine_times, substeps, degree, ridge))
    if U is not None:
        per_path = 0.0
        tail_path = 0.0
        for j, (vals, w) in enumerate(zip(U, U_weights)):
            vals = np.asarray(vals, dtype=float)
            w = np.asarray(w, dtype=float)
            B = vals.shape[0]
            N = (vals.shape[1] - 1) // substeps
            contrib = np.zeros(B)
            for i in range(N):
                sl = slice(i * substeps, (i + 1) * substeps + 1)
                v = vals[:, sl, :]
                tt = fine_times[sl]
                _, pi = project_cell(v, w, anchors[i], tt, degree, ridge)
                dev = ((v - pi[:, None, None]) ** 2) @ w
                contrib += np.trapezoid(dev, tt, axis=1)
            per_path = per_path + contrib
            if U_tail is not None and U_tail[j]:
                tail_path = tail_path + contrib
        ru, rus = mean_se(per_path)
        rtail = float(np.mean(tail_path)) if np.ndim(tail_path) else 0.0
    return ProjectionErrors(rz, rzs, rl, rls, ru, rus, rtail)


def brownian_projection_experiment(T: float, N: int, substeps: int, batch: int, seed: int) -> ProjectionErrors:
    """``R^2_Z`` for ``Z_t = W_t`` (exact value ``T * dt / 2``)."""
    g = rngmod.stream(seed, "projection", 0)
    n_fine = N * substeps
    dt = T / n_fine
    W = np.concatenate([np.zeros((batch, 1)), np.cumsum(g.standard_normal((batch, n_fine)) * math.sqrt(dt), 1)], 1)
    times = np.linspace(0.0, T, n_fine + 1)
    anchors = [W[:, i * substeps][:, None] for i in range(N)]
    return projection_error_estimates(times, anchors, substeps, Z=W)


def isometry_check(partition: JumpPartition, u, dt: float, batch: int, seed: int, block: int = 100_000):
    """``E|sum_j u_j Ntilde_j|^2`` by simulation vs ``dt sum_j u_j^2 lambda_j``; returns ``(mc, stderr, exact)``."""
    u = np.asarray(u, dtype=float)
    vals = []
    for k, sl in rngmod.block_slices(batch, block):
        real = sample_jumps(partition, dt, rngmod.stream(seed, "isometry", k), batch=sl.stop - sl.start)
        nt = real.counts - partition.masses[None, :] * dt
        vals.append((nt @ u) ** 2)
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std() / math.sqrt(len(v))), float(dt * np.sum(u * u * partition.masses))


# ---------------------------------------------------------------------------
# small-jump strong-rate experiment


@dataclass
class RateTable:
    epsilons: np.ndarray
    sigma2: np.ndarray
    error: np.ndarray
    stderr: np.ndarray
    flagged: np.ndarray
    slope: float
    intercept: float
    reference_epsilon: float
    rows_used: int

    def monotone(self, n_se: float = 3.0) -> bool:
        """Error nondecreasing in ``epsilon`` up to ``n_se`` combined standard errors."""
        order = np.argsort(self.epsilons)
        e, s = self.error[order], self.stderr[order]
        return bool(np.all(e[1:] - e[:-1] >= -n_se * np.hypot(s[1:], s[:-1])))


def fit_loglog(x, y):
    """Least-squares slope and intercept of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(slope), float(icpt)


def smalljump_rate_experiment(coeffs: ModelCoefficients, measure: LevyMeasure, epsilons: Sequence[float],
                              zeta: int, reference_epsilon: float, batch: int, seed: int, x0=None,
                              T: float = 1.0, N: int = 10, h: float = 0.5, block: int = 10_000,
                              max_rel_se: float = 0.25) -> RateTable:
    """Coupled strong errors ``E|X_T^ref - X_T^eps|^2``.

    All processes share the Brownian path and every jump larger than
    ``reference_epsilon``; the process truncated at ``eps`` drops the jumps
    in ``(reference_epsilon, eps]`` and, for ``zeta = 1``, replaces them by
    ``Sigma_eps^{1/2}`` times a Brownian increment shared with the
    reference's own compensation term.
    """
    eps = np.asarray(sorted(epsilons), dtype=float)
    if reference_epsilon > eps.min():
        raise ValueError("reference_epsilon must not exceed the smallest epsilon")
    q = coeffs.q
    x0 = np.zeros(q) if x0 is None else np.asarray(x0, float).reshape(q)
    grid = TimeGrid.uniform(T, N)
    dt = grid.steps
    ref_part = build_partition(measure, reference_epsilon, h)
    parts = [build_partition(measure, float(e), h) for e in eps]
    ref_sig = psd_sqrt(small_jump_covariance(measure, reference_epsilon)) if zeta else np.zeros((q, q))
    sigs = [psd_sqrt(small_jump_covariance(measure, float(e))) if zeta else np.zeros((q, q)) for e in eps]
    sq_sum = np.zeros(len(eps))
    sq_sq = np.zeros(len(eps))
    for k, sl in rngmod.block_slices(batch, block):
        g = rngmod.stream(seed, "rates", k)
        nb = sl.stop - sl.start
        x_ref = np.tile(x0, (nb, 1))
        xs = [x_ref.copy() for _ in eps]
        for i in range(N):
            dW = g.standard_normal((nb, coeffs.d)) * math.sqrt(dt[i])
            dWt = g.standard_normal((nb, q)) * math.sqrt(dt[i])
            real = sample_jumps(ref_part, dt[i], g, batch=nb)
            radius = np.max(np.abs(real.sizes), axis=1) if real.n_jumps else np.zeros(0)
            comp_ref = partition_compensator(coeffs, x_ref, ref_part)
            new_ref = euler_step(x_ref, _with_zeta(coeffs, zeta), ref_sig, dt[i], dW, dWt, real.path, real.sizes,
                                 compensator=comp_ref)
            for m, e in enumerate(eps):
                keep = radius > e
                comp = partition_compensator(coeffs, xs[m], parts[m])
                xs[m] = euler_step(xs[m], _with_zeta(coeffs, zeta), sigs[m], dt[i], dW, dWt, real.path[keep],
                                   real.sizes[keep], compensator=comp)
            x_ref = new_ref
        for m in range(len(eps)):
            d2 = np.sum((xs[m] - x_ref) ** 2, axis=1)
            sq_sum[m] += d2.sum()
            sq_sq[m] += (d2 * d2).sum()
    err = sq_sum / batch
    se = np.sqrt(np.maximum(sq_sq / batch - err ** 2, 0.0) / batch)
    sigma2 = np.array([truncation_variance(measure, float(e)) for e in eps])
    flagged = ~(err > 0) | (se > max_rel_se * np.where(err > 0, err, 1.0))
    use = ~flagged & (eps > reference_epsilon)
    slope, icpt = fit_loglog(sigma2[use], err[use]) if use.sum() >= 2 else (float("nan"), float("nan"))
    for m in np.flatnonzero(flagged & (eps > reference_epsilon)):
        log.warning("rate row eps=%g flagged: stderr %.3g vs estimate %.3g", eps[m], se[m], err[m])
    return RateTable(eps, sigma2, err, se, flagged, slope, icpt, float(reference_epsilon), int(use.sum()))


def _with_zeta(coeffs: ModelCoefficients, zeta: int) -> ModelCoefficients:
    if coeffs.zeta == zeta:
        return coeffs
    return replace(coeffs, zeta=zeta)

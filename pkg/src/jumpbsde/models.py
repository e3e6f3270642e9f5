"""Registry of named closed-form coefficient families and ready-made problems."""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .levy import JumpCoefficients
from .paths import Driver, ModelCoefficients, zero_driver


class RegistryError(KeyError):
    pass


def _lookup(table: Dict[str, Callable], kind: str, name: str):
    try:
        return table[name]
    except KeyError:
        raise RegistryError(f"unknown {kind} '{name}' (known: {', '.join(sorted(table))})") from None


# drift b(x): (n, q) -> (n, q)
def _drift_zero(q, **_):
    return lambda x: np.zeros_like(x)


def _drift_constant(q, value=0.0, **_):
    v = np.broadcast_to(np.asarray(value, dtype=float), (q,)).copy()
    return lambda x: np.broadcast_to(v, x.shape).copy()


def _drift_linear(q, rate=1.0, mean=0.0, **_):
    return lambda x: -rate * (x - mean)


DRIFTS = {"zero": _drift_zero, "constant": _drift_constant, "linear": _drift_linear}


# diffusion sigma(x): (n, q) -> (n, q, d)
def _sigma_constant(q, d, value=0.3, **_):
    mat = np.zeros((q, d))
    np.fill_diagonal(mat, value)
    return lambda x: np.broadcast_to(mat, (len(x), q, d)).copy()


def _sigma_zero(q, d, **_):
    return lambda x: np.zeros((len(x), q, d))


SIGMAS = {"constant": _sigma_constant, "zero": _sigma_zero}


# jump amplitude beta(x, e)
def _beta_additive(q, scale=1.0, **_):
    eye = scale * np.eye(q)
    return (lambda x, e: scale * np.asarray(e, dtype=float),
            lambda x: np.broadcast_to(eye, (len(np.atleast_2d(x)), q, q)).copy(),
            True)


def _beta_state(q, scale=1.0, amp=0.5, **_):
    # beta(x, e) = scale * (1 + amp sin x) * e, componentwise
    def beta(x, e):
        return scale * (1.0 + amp * np.sin(x)) * e

    def dbeta(x):
        x = np.atleast_2d(x)
        out = np.zeros((len(x), q, q))
        idx = np.arange(q)
        out[:, idx, idx] = scale * (1.0 + amp * np.sin(x))
        return out

    return beta, dbeta, False


BETAS = {"additive": _beta_additive, "state": _beta_state}


# jump weight gamma(e)
def _gamma_min1(q, scale=1.0, **_):
    return (lambda e: scale * np.minimum(1.0, np.linalg.norm(np.atleast_2d(e), axis=1))), np.zeros(q)


def _gamma_zero(q, **_):
    return (lambda e: np.zeros(len(np.atleast_2d(e)))), np.zeros(q)


def _gamma_square(q, scale=1.0, **_):
    return (lambda e: scale * np.minimum(1.0, np.sum(np.atleast_2d(e) ** 2, axis=1))), np.zeros(q)


GAMMAS = {"min1": _gamma_min1, "zero": _gamma_zero, "square": _gamma_square}


# terminal g(x): (n, q) -> (n,)
def _g_sum(q, **_):
    return lambda x: np.sum(x, axis=1)


def _g_constant(q, value=0.0, **_):
    return lambda x: np.full(len(x), float(value))


def _g_sine(q, freq=1.0, phase=0.0, **_):
    return lambda x: np.sin(freq * np.sum(x, axis=1) + phase)


TERMINALS = {"sum": _g_sum, "constant": _g_constant, "sine": _g_sine}


# driver f(t, x, y, z, p)
def _f_zero(q, d, **_):
    return zero_driver()


def _f_linear(q, d, rate=0.0, z_coef=0.0, p_coef=0.0, **_):
    def f(t, x, y, z, p):
        return -rate * y + z_coef * np.sum(z, axis=1) + p_coef * p

    def partials(t, x, y, z, p):
        return np.full(len(y), -rate), np.full(z.shape, z_coef), np.full(len(y), p_coef)

    return Driver(f, partials, name="linear", lipschitz=abs(rate) + abs(z_coef) * np.sqrt(d) + abs(p_coef))


DRIVERS = {"zero": _f_zero, "linear": _f_linear}


def jump_coefficients(q: int, beta: str = "additive", gamma: str = "min1", beta_params=None,
                      gamma_params=None) -> JumpCoefficients:
    bfun, dbeta, additive = _lookup(BETAS, "beta", beta)(q, **(beta_params or {}))
    gfun, dgamma = _lookup(GAMMAS, "gamma", gamma)(q, **(gamma_params or {}))
    return JumpCoefficients(beta=bfun, gamma=gfun, d_beta0=dbeta, d_gamma0=dgamma, name=f"{beta}/{gamma}")


def additive_compensator(x, partition):
    """Exact ``int_{E^eps} e nu(de)`` for ``beta(x, e) = e``: signed first moments per axis."""
    q = partition.q
    comp = np.zeros(q)
    meas = partition.measure
    for k, ax in enumerate(meas.axes):
        for s in (1, -1):
            if ax.side_rmax(s) > partition.epsilon:
                comp[k] += s * ax.side_moment(s, 1.0, partition.epsilon, np.inf)
    return np.broadcast_to(comp, x.shape).copy()


def build_coefficients(q: int, d: int, zeta: int, drift="zero", drift_params=None, sigma="constant",
                       sigma_params=None, beta="additive", beta_params=None, gamma="min1", gamma_params=None,
                       terminal="sum", terminal_params=None, driver="zero", driver_params=None,
                       driver_obj: Driver = None, exact_compensator: bool = False, name="custom") -> ModelCoefficients:
    jump = jump_coefficients(q, beta, gamma, beta_params, gamma_params)
    comp = None
    if exact_compensator:
        if beta != "additive":
            raise RegistryError("exact compensator is only registered for additive beta")
        scale = (beta_params or {}).get("scale", 1.0)
        comp = (lambda x, part: scale * additive_compensator(x, part))
    return ModelCoefficients(
        q=q, d=d,
        b=_lookup(DRIFTS, "drift", drift)(q, **(drift_params or {})),
        sigma=_lookup(SIGMAS, "sigma", sigma)(q, d, **(sigma_params or {})),
        jump=jump,
        driver=driver_obj if driver_obj is not None else _lookup(DRIVERS, "driver", driver)(q, d, **(driver_params or {})),
        g=_lookup(TERMINALS, "terminal", terminal)(q, **(terminal_params or {})),
        zeta=zeta, compensator=comp, name=name,
    )


def martingale_model(sigma: float = 0.3, zeta: int = 1, q: int = 1) -> ModelCoefficients:
    """``b = 0``, constant ``sigma``, ``beta = e``, ``gamma = 1 ^ |e|``, ``f = 0``, ``g(x) = sum x``.

    The forward state is a martingale and ``u(t, x) = sum x`` exactly.
    """
    return build_coefficients(q, q, zeta, drift="zero", sigma="constant", sigma_params={"value": sigma},
                              beta="additive", gamma="min1", terminal="sum", driver="zero", name="martingale")

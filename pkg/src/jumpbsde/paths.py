"""Driving noise and the jump-corrected Euler scheme for the truncated forward SDE.

One Euler step reads::

    x' = x + b(x) dt + sigma(x) dW + zeta * Dbeta(x, 0) Sigma_eps^{1/2} dW~
           + sum_{jumps e} beta(x, e) - dt * sum_j beta(x, e_j) lambda_j

where the compensator is the partition quadrature of ``int beta(x,e) nu(de)``
over ``E^eps`` unless the model registers an exact one.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .levy import JumpCoefficients, JumpPartition, psd_sqrt, sample_cell_sizes, sample_jumps, small_jump_covariance

log = logging.getLogger(__name__)

INVALID_FRACTION = 1e-3


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model data


class Driver:
    """Generator ``f(t, x, y, z, p)`` of the backward equation.

    ``fun`` is vectorised: ``t`` scalar, ``x`` ``(n, q)``, ``y`` ``(n,)``,
    ``z`` ``(n, d)``, ``p`` ``(n,)``; returns ``(n,)``.  ``partials`` returns
    ``(f_y, f_z, f_p)``; without an analytic version central differences are
    used.
    """

    def __init__(self, fun: Callable, partials: Optional[Callable] = None, name: str = "custom",
                 lipschitz: Optional[float] = None):
        self.fun = fun
        self._partials = partials
        self.name = name
        self.lipschitz = lipschitz

    def __call__(self, t, x, y, z, p):
        return self.fun(t, x, y, z, p)

    def partials(self, t, x, y, z, p):
        if self._partials is not None:
            return self._partials(t, x, y, z, p)
        h = 1e-6
        fy = (self.fun(t, x, y + h, z, p) - self.fun(t, x, y - h, z, p)) / (2 * h)
        fp = (self.fun(t, x, y, z, p + h) - self.fun(t, x, y, z, p - h)) / (2 * h)
        fz = np.empty_like(z)
        for k in range(z.shape[1]):
            dz = np.zeros_like(z)
            dz[:, k] = h
            fz[:, k] = (self.fun(t, x, y, z + dz, p) - self.fun(t, x, y, z - dz, p)) / (2 * h)
        return fy, fz, fp


def zero_driver() -> Driver:
    def f(t, x, y, z, p):
        return np.zeros(len(y))

    def partials(t, x, y, z, p):
        return np.zeros(len(y)), np.zeros_like(z), np.zeros(len(y))

    return Driver(f, partials, name="zero", lipschitz=0.0)


@dataclass
class ModelCoefficients:
    """Coefficients of the forward-backward system.

    ``b``: ``(n, q) -> (n, q)``; ``sigma``: ``(n, q) -> (n, q, d)``;
    ``g``: ``(n, q) -> (n,)``.  ``compensator`` optionally gives the exact
    ``int_{E^eps} beta(x, e) nu(de)`` as ``(x, partition) -> (n, q)``.
    """

    q: int
    d: int
    b: Callable
    sigma: Callable
    jump: JumpCoefficients
    driver: Driver
    g: Callable
    zeta: int = 1
    compensator: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        if self.zeta not in (0, 1):
            raise ValueError("zeta must be 0 or 1")

    def lipschitz_spot_check(self, xs, rng: np.random.Generator, scale: float = 1e-3) -> dict:
        """Empirical Lipschitz ratios of b, sigma and g on nearby point pairs (not a proof)."""
        xs = np.atleast_2d(xs)
        ys = xs + scale * rng.standard_normal(xs.shape)
        dx = np.linalg.norm(xs - ys, axis=1)
        out = {
            "b": float(np.max(np.linalg.norm(self.b(xs) - self.b(ys), axis=1) / dx)),
            "sigma": float(np.max(np.linalg.norm((self.sigma(xs) - self.sigma(ys)).reshape(len(xs), -1), axis=1) / dx)),
            "g": float(np.max(np.abs(self.g(xs) - self.g(ys)) / dx)),
        }
        return out


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 1 or nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("time grid must start at 0 and be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if N < 0 or (N > 0 and T <= 0):
            raise ValueError("need N >= 0 and T > 0")
        return cls(np.linspace(0.0, T, N + 1))

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def dt_max(self) -> float:
        return float(self.steps.max()) if self.N else 0.0


# ---------------------------------------------------------------------------
# increments


@dataclass
class IncrementBatch:
    """All driving noise of a batch of paths.

    Jumps are stored flat, sorted by step: rows ``step_ptr[i]:step_ptr[i+1]``
    belong to step ``i``.
    """

    dW: np.ndarray  # (B, N, d)
    dWt: np.ndarray  # (B, N, q)
    counts: np.ndarray  # (B, N, J)
    jump_path: np.ndarray
    jump_cell: np.ndarray
    jump_size: np.ndarray  # (K, q)
    step_ptr: np.ndarray  # (N + 1,)
    masses: np.ndarray  # (J,)
    steps: np.ndarray  # (N,)

    @property
    def batch(self) -> int:
        return self.dW.shape[0]

    def compensated(self, i: int) -> np.ndarray:
        """``N_{i,j} - lambda_j dt_i`` for every path, ``(B, J)``."""
        return self.counts[:, i, :] - self.masses[None, :] * self.steps[i]

    def step_jumps(self, i: int):
        sl = slice(self.step_ptr[i], self.step_ptr[i + 1])
        return self.jump_path[sl], self.jump_cell[sl], self.jump_size[sl]

    def subset(self, idx: np.ndarray) -> "IncrementBatch":
        """Increments restricted to the paths ``idx`` (renumbered 0..len-1)."""
        idx = np.asarray(idx)
        remap = np.full(self.batch, -1, dtype=np.int64)
        remap[idx] = np.arange(len(idx))
        keep = remap[self.jump_path] >= 0
        new_path = remap[self.jump_path[keep]]
        step_of = np.repeat(np.arange(len(self.steps)), np.diff(self.step_ptr))[keep]
        ptr = np.concatenate([[0], np.cumsum(np.bincount(step_of, minlength=len(self.steps)))])
        return IncrementBatch(self.dW[idx], self.dWt[idx], self.counts[idx], new_path, self.jump_cell[keep],
                              self.jump_size[keep], ptr, self.masses, self.steps)


def generate_increments(grid: TimeGrid, partition: JumpPartition, d: int, q: int, batch: int,
                        seed: int) -> IncrementBatch:
    """Brownian, compensating-Brownian and jump noise for ``batch`` paths.

    Paths are drawn in fixed blocks of ``rng.PATH_BLOCK``, each from its own
    counter-based stream, so the result depends only on ``seed``.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    N, J = grid.N, partition.n_cells
    steps = grid.steps
    dW = np.empty((batch, N, d))
    dWt = np.empty((batch, N, q))
    counts = np.zeros((batch, N, J), dtype=np.int32)
    per_step = [[] for _ in range(N)]
    for k, sl in rngmod.block_slices(batch):
        g = rngmod.stream(seed, "increments", k)
        nb = sl.stop - sl.start
        dW[sl] = g.standard_normal((nb, N, d)) * np.sqrt(steps)[None, :, None]
        dWt[sl] = g.standard_normal((nb, N, q)) * np.sqrt(steps)[None, :, None]
        for i in range(N):
            real = sample_jumps(partition, steps[i], g, batch=nb)
            counts[sl, i, :] = real.counts
            per_step[i].append((real.path + sl.start, real.cell, real.sizes))
    paths, cells, sizes, ptr = [], [], [], [0]
    for i in range(N):
        for p, c, s in per_step[i]:
            paths.append(p)
            cells.append(c)
            sizes.append(s)
        ptr.append(ptr[-1] + sum(len(p) for p, _, _ in per_step[i]))
    cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape))
    return IncrementBatch(
        dW, dWt, counts,
        cat(paths, (0,)).astype(np.int64), cat(cells, (0,)).astype(np.int64), cat(sizes, (0, q)),
        np.array(ptr, dtype=np.int64), partition.masses.copy(), steps.copy(),
    )


# ---------------------------------------------------------------------------
# Euler scheme


def partition_compensator(coeffs: ModelCoefficients, x: np.ndarray, partition: JumpPartition) -> np.ndarray:
    """``int_{E^eps} beta(x, e) nu(de)`` for each row of ``x``: exact override or ``sum_j beta(x, e_j) lambda_j``."""
    if coeffs.compensator is not None:
        return np.asarray(coeffs.compensator(x, partition), dtype=float)
    n, J = len(x), partition.n_cells
    if J == 0:
        return np.zeros_like(x)
    xr = np.repeat(x, J, axis=0)
    er = np.tile(partition.representatives, (n, 1))
    vals = coeffs.jump.beta(xr, er).reshape(n, J, -1)
    return np.einsum("njq,j->nq", vals, partition.masses)


def euler_step(x, coeffs: ModelCoefficients, sigma_eps_sqrt, dt: float, dW, dWt,
               jump_path=None, jump_size=None, compensator=None, partition: Optional[JumpPartition] = None):
    """One jump-corrected Euler step for a batch of states ``x`` (``(n, q)``).

    ``jump_path[k]`` is the row of ``x`` receiving jump ``jump_size[k]``.
    ``compensator`` (``(n, q)``) is computed from ``partition`` if omitted.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    dW = np.asarray(dW, dtype=float).reshape(n, coeffs.d)
    out = x + coeffs.b(x) * dt + np.einsum("nqd,nd->nq", coeffs.sigma(x), dW)
    if coeffs.zeta:
        dWt = np.asarray(dWt, dtype=float).reshape(n, coeffs.q)
        noise = dWt @ np.asarray(sigma_eps_sqrt).T
        out = out + np.einsum("nqk,nk->nq", coeffs.jump.dbeta0(x), noise)
    if jump_path is not None and len(jump_path):
        jumps = coeffs.jump.beta(x[jump_path], jump_size)
        for k in range(coeffs.q):
            out[:, k] += np.bincount(jump_path, weights=jumps[:, k], minlength=n)
    if compensator is None and partition is not None:
        compensator = partition_compensator(coeffs, x, partition)
    if compensator is not None:
        out = out - dt * compensator
    return out


@dataclass
class PathBatch:
    X: np.ndarray  # (B, N+1, q)
    increments: IncrementBatch
    grid: TimeGrid
    sigma_eps_sqrt: np.ndarray
    seed: int
    valid: np.ndarray  # (B,) bool
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def batch(self) -> int:
        return self.X.shape[0]

    @property
    def n_invalid(self) -> int:
        return int((~self.valid).sum())

    def subset(self, idx) -> "PathBatch":
        idx = np.asarray(idx)
        return PathBatch(self.X[idx], self.increments.subset(idx), self.grid, self.sigma_eps_sqrt, self.seed,
                         self.valid[idx], self.fingerprint, dict(self.meta))


def _fingerprint(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def simulate_forward(coeffs: ModelCoefficients, grid: TimeGrid, partition: JumpPartition, x0, batch: int,
                     seed: int, increments: Optional[IncrementBatch] = None,
                     forward_jumps: str = "exact", config_tag: str = "") -> PathBatch:
    """Simulate ``batch`` paths of the truncated forward SDE on ``grid``.

    ``forward_jumps="representative"`` replaces every sampled jump size by
    its cell representative (the cell-discretised alternative).
    """
    x0 = np.asarray(x0, dtype=float).reshape(coeffs.q)
    if increments is None:
        increments = generate_increments(grid, partition, coeffs.d, coeffs.q, batch, seed)
    sig = psd_sqrt(small_jump_covariance(partition.measure, partition.epsilon)) if coeffs.zeta else \
        np.zeros((coeffs.q, coeffs.q))
    N = grid.N
    X = np.empty((batch, N + 1, coeffs.q))
    X[:, 0, :] = x0
    valid = np.ones(batch, dtype=bool)
    steps = grid.steps
    for i in range(N):
        jp, jc, js = increments.step_jumps(i)
        if forward_jumps == "representative":
            js = partition.representatives[jc]
        x = X[:, i, :]
        with np.errstate(over="ignore", invalid="ignore"):
            xn = euler_step(x, coeffs, sig, steps[i], increments.dW[:, i, :], increments.dWt[:, i, :],
                            jp, js, partition=partition)
        bad = ~np.all(np.isfinite(xn), axis=1)
        if bad.any():
            valid &= ~bad
            xn[bad] = x[bad]
        X[:, i + 1, :] = xn
    n_bad = int((~valid).sum())
    if n_bad:
        log.warning("%d of %d paths produced non-finite states and are excluded", n_bad, batch)
        if n_bad > INVALID_FRACTION * batch:
            raise SimulationError(f"{n_bad} of {batch} paths invalid (limit {INVALID_FRACTION:.1%})")
    fp = _fingerprint({"seed": seed, "batch": batch, "N": N, "T": grid.T, "x0": x0.tolist(),
                       "cells": partition.n_cells, "eps": partition.epsilon, "model": coeffs.name,
                       "zeta": coeffs.zeta, "tag": config_tag})
    return PathBatch(X, increments, grid, sig, seed, valid, fp,
                     {"forward_jumps": forward_jumps, "invalid": n_bad})

"""Multi-step deep BSDE solver for the truncated jump FBSDE.

At step ``i`` four networks are fitted by minimising the empirical mean of::

    | Y_i(X_i) - g(X_N) - F_i - sum_{l > i} F_l(frozen) |^2

with the one-step residual::

    F_l = f(t_l, X_l, Y_l, Z_l, P_l) dt_l - zeta W_l . dW~_l - Z_l . dW_l - sum_j U_l(X_l, e_j) Ntilde_{l,j}
    P_l = sum_j U_l(X_l, e_j) gamma_j lambda_j + zeta Dgamma(0) Sigma_eps^{1/2} W_l

The frozen tail ``sum_{l > i} F_l`` is cached per path and refreshed by
telescoping when the loop moves from ``i + 1`` to ``i``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import rng as rngmod
from .levy import JumpPartition
from .nn import (AdamState, Mlp, adam_step, he_init, mlp_backward, mlp_backward_pairs, mlp_forward,
                 mlp_forward_pairs, mlp_widths)
from .paths import ModelCoefficients, PathBatch, TimeGrid, simulate_forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, step: int, last_finite_loss: float):
        super().__init__(f"{message} at step {step} (last finite loss {last_finite_loss:.6g})")
        self.step = step
        self.last_finite_loss = last_finite_loss


@dataclass
class SolverConfig:
    epochs: int = 200
    minibatch: int = 512
    lr: float = 3e-3
    hidden: Optional[int] = None  # default 20 + q
    layers: int = 3
    val_fraction: float = 0.1
    warm_start: bool = True
    resample: bool = False
    resample_batch: Optional[int] = None

    def hidden_units(self, q: int) -> int:
        return self.hidden if self.hidden is not None else 20 + q


# ---------------------------------------------------------------------------
# networks of one time step


@dataclass
class StepNetworks:
    net_Y: Mlp
    net_Z: Mlp
    net_W: Optional[Mlp]
    net_U: Mlp
    x_shift: np.ndarray
    x_scale: np.ndarray
    e_scale: float

    def nets(self) -> list:
        return [n for n in (self.net_Y, self.net_Z, self.net_W, self.net_U) if n is not None]

    def params(self) -> list:
        return [p for n in self.nets() for p in n.params()]

    def set_params(self, params) -> None:
        k = 0
        for n in self.nets():
            m = len(n.params())
            n.set_params(params[k:k + m])
            k += m

    def copy(self) -> "StepNetworks":
        return StepNetworks(self.net_Y.copy(), self.net_Z.copy(), None if self.net_W is None else self.net_W.copy(),
                            self.net_U.copy(), self.x_shift.copy(), self.x_scale.copy(), self.e_scale)

    def normalize(self, x):
        return (np.atleast_2d(x) - self.x_shift) / self.x_scale

    def u_inputs(self, xn, reps):
        n, J = len(xn), len(reps)
        return np.concatenate([np.repeat(xn, J, axis=0), np.tile(reps / self.e_scale, (n, 1))], axis=1)

    def evaluate(self, x, reps):
        """``(Y, Z, W, U)`` at states ``x``; ``U`` is ``(n, J)`` at the cell representatives."""
        xn = self.normalize(x)
        y = self.net_Y(xn)[:, 0]
        z = self.net_Z(xn)
        w = self.net_W(xn) if self.net_W is not None else None
        u = self.net_U(self.u_inputs(xn, reps)).reshape(len(xn), len(reps)) if len(reps) else np.zeros((len(xn), 0))
        return y, z, w, u


def init_step_networks(coeffs: ModelCoefficients, partition: JumpPartition, config: SolverConfig,
                       rng: np.random.Generator, x_shift=None, x_scale=None) -> StepNetworks:
    q, d = coeffs.q, coeffs.d
    m, L = config.hidden_units(q), config.layers
    reps = partition.representatives
    e_scale = float(np.max(np.abs(reps))) if len(reps) else 1.0
    return StepNetworks(
        net_Y=he_init(mlp_widths(q, 1, m, L), rng),
        net_Z=he_init(mlp_widths(q, d, m, L), rng),
        net_W=he_init(mlp_widths(q, q, m, L), rng) if coeffs.zeta else None,
        net_U=he_init(mlp_widths(2 * q, 1, m, L), rng),
        x_shift=np.zeros(q) if x_shift is None else np.asarray(x_shift, float),
        x_scale=np.ones(q) if x_scale is None else np.asarray(x_scale, float),
        e_scale=e_scale if e_scale > 0 else 1.0,
    )


def _state_normalization(x):
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-8 * (1.0 + np.abs(shift)), scale, 1.0)
    return shift, scale


# ---------------------------------------------------------------------------
# residual and loss


@dataclass
class StepData:
    """Per-path data of step ``i`` needed by the loss."""

    i: int
    t: float
    dt: float
    x: np.ndarray
    dW: np.ndarray
    dWt: np.ndarray
    ntilde: np.ndarray
    target: np.ndarray  # g(X_N) + frozen tail

    def take(self, idx):
        return StepData(self.i, self.t, self.dt, self.x[idx], self.dW[idx], self.dWt[idx], self.ntilde[idx],
                        self.target[idx])


@dataclass
class ResidualTail:
    """Frozen ``sum_{l=i+1}^{N-1} F_l`` per path (``values``) and ``g(X_N)`` (``terminal``)."""

    i: int
    values: np.ndarray
    terminal: np.ndarray

    def total(self) -> np.ndarray:
        return self.terminal + self.values

    def advance(self, F_i: np.ndarray) -> "ResidualTail":
        """Tail for step ``i - 1``: add the newly frozen residual of step ``i``."""
        return ResidualTail(self.i - 1, self.values + F_i, self.terminal)


class _Ctx:
    """Constants shared by every loss evaluation of a run."""

    def __init__(self, coeffs: ModelCoefficients, partition: JumpPartition, sigma_eps_sqrt):
        self.coeffs = coeffs
        self.reps = partition.representatives
        self.gl = partition.gamma_avg * partition.masses
        self.zeta = coeffs.zeta
        dg = coeffs.jump.dgamma0(coeffs.q)
        self.c_w = np.asarray(sigma_eps_sqrt).T @ dg if coeffs.zeta else np.zeros(coeffs.q)


def _forward(nets: StepNetworks, ctx: _Ctx, data: StepData, with_cache: bool = False):
    xn = nets.normalize(data.x)
    n, J = len(xn), len(ctx.reps)
    yv, aY = mlp_forward(nets.net_Y, xn)
    zv, aZ = mlp_forward(nets.net_Z, xn)
    if nets.net_W is not None:
        wv, aW = mlp_forward(nets.net_W, xn)
    else:
        wv, aW = np.zeros((n, ctx.coeffs.q)), None
    if J:
        uv, aU = mlp_forward_pairs(nets.net_U, xn, ctx.reps / nets.e_scale)
        uv = uv.reshape(n, J)
    else:
        uv, aU = np.zeros((n, 0)), None
    y = yv[:, 0]
    p = uv @ ctx.gl + ctx.zeta * (wv @ ctx.c_w)
    fval = ctx.coeffs.driver(data.t, data.x, y, zv, p)
    F = (fval * data.dt - ctx.zeta * np.einsum("nq,nq->n", wv, data.dWt)
         - np.einsum("nd,nd->n", zv, data.dW) - np.einsum("nj,nj->n", uv, data.ntilde))
    if not with_cache:
        return y, F
    return y, F, (y, zv, wv, uv, p, aY, aZ, aW, aU, xn)


def _loss_and_grad(nets: StepNetworks, ctx: _Ctx, data: StepData):
    y, F, cache = _forward(nets, ctx, data, with_cache=True)
    _, zv, wv, uv, p, aY, aZ, aW, aU, xn = cache
    r = y - data.target - F
    n = len(r)
    loss = float(np.mean(r * r))
    fy, fz, fp = ctx.coeffs.driver.partials(data.t, data.x, y, zv, p)
    dr = 2.0 * r / n
    dt = data.dt
    grads = mlp_backward(nets.net_Y, aY, (dr * (1.0 - fy * dt))[:, None])
    grads += mlp_backward(nets.net_Z, aZ, dr[:, None] * (data.dW - fz * dt))
    if nets.net_W is not None:
        cw = dr[:, None] * ctx.zeta * (data.dWt - (fp * dt)[:, None] * ctx.c_w[None, :])
        grads += mlp_backward(nets.net_W, aW, cw)
    if aU is not None:
        cu = dr[:, None] * (data.ntilde - (fp * dt)[:, None] * ctx.gl[None, :])
        grads += mlp_backward_pairs(nets.net_U, xn, ctx.reps / nets.e_scale, aU, cu.reshape(-1, 1))
    else:
        grads += [np.zeros_like(p_) for p_ in nets.net_U.params()]
    return loss, grads


def residual_F(i: int, x, nets: StepNetworks, dW, dWt, ntilde, partition: JumpPartition,
               coeffs: ModelCoefficients, grid: TimeGrid, sigma_eps_sqrt) -> np.ndarray:
    """One-step residual ``F(t_i, x, nets)`` for the given step increments."""
    ctx = _Ctx(coeffs, partition, sigma_eps_sqrt)
    x = np.atleast_2d(x)
    data = StepData(i, float(grid.nodes[i]), float(grid.steps[i]), x, np.atleast_2d(dW), np.atleast_2d(dWt),
                    np.atleast_2d(ntilde), np.zeros(len(x)))
    return _forward(nets, ctx, data)[1]


def step_data(paths: PathBatch, tail: ResidualTail, i: int, idx=None) -> StepData:
    if tail.i != i:
        raise ValueError(f"residual tail belongs to step {tail.i}, not {i}")
    inc = paths.increments
    idx = np.flatnonzero(paths.valid) if idx is None else idx
    return StepData(i, float(paths.grid.nodes[i]), float(paths.grid.steps[i]), paths.X[idx, i, :],
                    inc.dW[idx, i, :], inc.dWt[idx, i, :], inc.compensated(i)[idx], tail.total()[idx])


def loss_Ri(i: int, paths: PathBatch, tail: ResidualTail, nets: StepNetworks, partition: JumpPartition,
            coeffs: ModelCoefficients, idx=None) -> float:
    """Empirical ``R_i``: mean squared multi-step residual over valid paths."""
    data = step_data(paths, tail, i, idx)
    ctx = _Ctx(coeffs, partition, paths.sigma_eps_sqrt)
    y, F = _forward(nets, ctx, data)
    r = y - data.target - F
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# training


def train_step(nets: StepNetworks, ctx: _Ctx, train: StepData, val: StepData, config: SolverConfig,
               rng: np.random.Generator, fresh=None):
    """Adam over minibatches; returns ``(best_nets, history)``.

    The returned networks are those with the lowest validation loss seen,
    the initial ones included.  ``fresh(epoch)`` may supply a new training
    set per epoch (resampling mode).
    """
    best = nets.copy()
    best_val = _eval_loss(nets, ctx, val)
    history = {"train": [], "val": [best_val]}
    if config.epochs <= 0:
        return best, history
    if not math.isfinite(best_val):
        raise TrainingError("non-finite initial loss", train.i, float("nan"))
    params = nets.params()
    state = AdamState.for_params(params, lr=config.lr)
    n = len(train.x)
    mb = min(config.minibatch, n)
    n_mb = max(1, n // mb)
    total_iters = config.epochs * n_mb
    it = 0
    last_finite = best_val
    for epoch in range(config.epochs):
        data = fresh(epoch) if fresh is not None else train
        perm = rng.permutation(len(data.x))
        ep_loss = 0.0
        for b in range(n_mb):
            idx = perm[b * mb:(b + 1) * mb]
            loss, grads = _loss_and_grad(nets, ctx, data.take(idx))
            if not math.isfinite(loss):
                raise TrainingError("loss diverged", train.i, last_finite)
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * it / total_iters))
            params = adam_step(state, params, grads, lr=lr)
            nets.set_params(params)
            ep_loss += loss
            it += 1
        vl = _eval_loss(nets, ctx, val)
        if not math.isfinite(vl):
            raise TrainingError("validation loss diverged", train.i, last_finite)
        last_finite = vl
        history["train"].append(ep_loss / n_mb)
        history["val"].append(vl)
        if vl < best_val:
            best_val = vl
            best = nets.copy()
    return best, history


def _eval_loss(nets, ctx, data: StepData) -> float:
    if len(data.x) == 0:
        return 0.0
    y, F = _forward(nets, ctx, data)
    r = y - data.target - F
    return float(np.mean(r * r))


@dataclass
class TrainedSolution:
    coeffs: ModelCoefficients
    grid: TimeGrid
    partition: JumpPartition
    sigma_eps_sqrt: np.ndarray
    steps: List[StepNetworks]
    history: list
    config_fingerprint: str
    y0_residual_std: float = float("nan")
    y0_count: int = 0
    wall_time: float = 0.0
    tails: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.grid.N

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.config_fingerprint.encode())
        for s in self.steps:
            for p in s.params():
                h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(s.x_shift, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(s.x_scale, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def final_losses(self) -> list:
        return [min(h["val"]) for h in self.history]

    def y0_stderr(self) -> float:
        return self.y0_residual_std / math.sqrt(max(self.y0_count, 1))


def evaluate(solution: TrainedSolution, i: int, x) -> dict:
    """``y, z, l, u`` at step ``i``; at ``i = N`` only ``y = g(x)`` is defined."""
    if not 0 <= i <= solution.N:
        raise IndexError(f"time index {i} outside 0..{solution.N}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if i == solution.N:
        return {"y": solution.coeffs.g(x), "z": None, "l": None, "u": None}
    y, z, w, u = solution.steps[i].evaluate(x, solution.partition.representatives)
    return {"y": y, "z": z, "l": w, "u": u}


def compute_F(solution_steps, i: int, paths: PathBatch, partition, coeffs, idx=None) -> np.ndarray:
    ctx = _Ctx(coeffs, partition, paths.sigma_eps_sqrt)
    idx = np.arange(paths.batch) if idx is None else idx
    inc = paths.increments
    data = StepData(i, float(paths.grid.nodes[i]), float(paths.grid.steps[i]), paths.X[idx, i, :],
                    inc.dW[idx, i, :], inc.dWt[idx, i, :], inc.compensated(i)[idx], np.zeros(len(idx)))
    return _forward(solution_steps[i], ctx, data)[1]


def compute_tail(steps, i: int, paths: PathBatch, partition, coeffs) -> ResidualTail:
    """Tail for step ``i`` on arbitrary paths by direct summation over ``l > i``."""
    vals = np.zeros(paths.batch)
    for l in range(i + 1, paths.grid.N):
        vals += compute_F(steps, l, paths, partition, coeffs)
    return ResidualTail(i, vals, coeffs.g(paths.X[:, -1, :]))


def run_algorithm1(coeffs: ModelCoefficients, grid: TimeGrid, partition: JumpPartition, x0, config: SolverConfig,
                   seed: int, batch: int = 8192, paths: Optional[PathBatch] = None,
                   keep_tails: bool = False, callback=None) -> TrainedSolution:
    """Backward loop ``i = N-1, ..., 0`` of the multi-step scheme."""
    t0 = time.perf_counter()
    if grid.N < 1:
        raise ValueError("need at least one time step")
    if paths is None:
        paths = simulate_forward(coeffs, grid, partition, x0, batch, seed)
    N = grid.N
    valid = np.flatnonzero(paths.valid)
    perm = rngmod.stream(seed, "split").permutation(valid)
    n_val = int(round(config.val_fraction * len(perm)))
    if len(perm) - n_val < 1:
        n_val = 0
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    ctx = _Ctx(coeffs, partition, paths.sigma_eps_sqrt)
    tail = ResidualTail(N - 1, np.zeros(paths.batch), coeffs.g(paths.X[:, -1, :]))
    steps: List[Optional[StepNetworks]] = [None] * N
    history = [None] * N
    tails = {}
    prev = None
    cfg_fp = hashlib.sha256(repr((asdict(config), paths.fingerprint, seed)).encode()).hexdigest()[:16]
    for i in range(N - 1, -1, -1):
        shift, scale = _state_normalization(paths.X[train_idx, i, :])
        cold = prev is None or not config.warm_start
        if cold:
            nets = init_step_networks(coeffs, partition, config, rngmod.stream(seed, "init", i), shift, scale)
        else:
            nets = prev.copy()
            nets.x_shift, nets.x_scale = shift, scale
        train = step_data(paths, tail, i, train_idx)
        val = step_data(paths, tail, i, val_idx) if n_val else train
        if cold:
            # cold start: put the output bias at the target level, Adam moves it only ~lr per step
            nets.net_Y.biases[-1][:] = float(np.mean(train.target))
        fresh = None
        if config.resample:
            fresh = _resampler(coeffs, grid, partition, x0, config, seed, i, steps, len(train_idx))
        nets, hist = train_step(nets, ctx, train, val, config, rngmod.stream(seed, "shuffle", i), fresh)
        steps[i] = nets
        history[i] = hist
        prev = nets
        if keep_tails:
            tails[i] = tail
        if callback is not None:
            callback(i, nets, hist)
        log.info("step %d: val loss %.6g", i, min(hist["val"]))
        F_i = compute_F(steps, i, paths, partition, coeffs)
        if i == 0:
            data0 = step_data(paths, tail, 0, valid)
            _, F = _forward(nets, ctx, data0)
            y0_std, y0_n = float(np.std(data0.target + F)), len(F)
        tail = tail.advance(F_i)
    sol = TrainedSolution(coeffs, grid, partition, paths.sigma_eps_sqrt, steps, history, cfg_fp,
                          y0_std, y0_n, time.perf_counter() - t0, tails)
    return sol


def _resampler(coeffs, grid, partition, x0, config, seed, i, steps, n):
    nb = config.resample_batch or n

    def fresh(epoch):
        p = simulate_forward(coeffs, grid, partition, x0, nb, rngmod.child_seed(seed, "resample", i, epoch))
        tail = compute_tail(steps, i, p, partition, coeffs)
        return step_data(p, tail, i)

    return fresh

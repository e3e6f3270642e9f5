"""Small ReLU multilayer perceptrons with hand-written backprop and Adam.

Rows are samples: a layer maps ``y -> y @ P + b`` with ``P`` of shape
``(fan_in, fan_out)``.  Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np


@dataclass
class Mlp:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        L = len(self.weights)
        self.weights = [np.array(p, dtype=float) for p in params[:L]]
        self.biases = [np.array(p, dtype=float) for p in params[L:]]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x):
        return mlp_eval(self, x)


def zeros_mlp(widths: Sequence[int]) -> Mlp:
    return Mlp([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
               [np.zeros(b) for b in widths[1:]])


def he_init(widths: Sequence[int], rng: np.random.Generator) -> Mlp:
    """Weights ``N(0, 2/fan_in)``, zero biases."""
    if any(int(w) <= 0 for w in widths) or len(widths) < 2:
        raise ValueError("widths must be positive and include input and output")
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(widths[:-1], widths[1:])]
    return Mlp(weights, [np.zeros(b) for b in widths[1:]])


def mlp_widths(n_in: int, n_out: int, hidden: int, layers: int) -> tuple:
    """Widths for ``layers`` affine maps (``layers - 1`` hidden layers of ``hidden`` units)."""
    return (n_in,) + (hidden,) * (layers - 1) + (n_out,)


def _check_input(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.n_in:
        raise ValueError(f"input dimension {x2.shape[-1]} does not match network input {net.n_in}")
    return x2, single


def _affine(y, P, b, relu):
    # in place: fresh large temporaries cost page faults that dwarf the arithmetic
    out = y @ P
    out += b
    if relu:
        np.maximum(out, 0.0, out=out)
    return out


def mlp_eval(net: Mlp, x):
    """Forward pass; ``x`` is ``(n, n_in)`` or a single vector."""
    y, single = _check_input(net, x)
    last = len(net.weights) - 1
    for l, (P, b) in enumerate(zip(net.weights, net.biases)):
        y = _affine(y, P, b, l < last)
    return y[0] if single else y


def mlp_forward(net: Mlp, x):
    """Forward pass keeping the layer inputs needed by ``mlp_backward``."""
    y, _ = _check_input(net, x)
    acts = [y]
    last = len(net.weights) - 1
    for l, (P, b) in enumerate(zip(net.weights, net.biases)):
        y = _affine(y, P, b, l < last)
        if l < last:
            acts.append(y)
    return y, acts


def mlp_backward(net: Mlp, acts, cot, want_input: bool = False):
    """Gradient of ``sum <cot, net(x)>`` w.r.t. all parameters (weights then biases)."""
    g = np.asarray(cot, dtype=float)
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        a = acts[l]
        gw[l] = a.T @ g
        gb[l] = g.sum(axis=0)
        if l > 0 or want_input:
            g = g @ net.weights[l].T
            if l > 0:
                # ReLU'(0) := 0
                g *= a > 0
    if want_input:
        return gw + gb, g
    return gw + gb


def mlp_forward_pairs(net: Mlp, xa, xb):
    """Forward pass on every pair ``(xa[n], xb[j])`` with input ``concat(xa[n], xb[j])``.

    The first affine map splits into an ``xa`` part and an ``xb`` part that
    are broadcast-added, so the ``(n*J, n_in)`` input is never formed.
    Output rows are ordered ``n``-major, as ``net(concat(repeat(xa), tile(xb)))``.
    """
    na = xa.shape[1]
    P, b = net.weights[0], net.biases[0]
    n, J, w = len(xa), len(xb), P.shape[1]
    pre = np.empty((n, J, w))
    np.add((xa @ P[:na])[:, None, :], (xb @ P[na:] + b)[None, :, :], out=pre)
    y = pre.reshape(n * J, w)
    if len(net.weights) == 1:
        return y, [None]
    np.maximum(y, 0.0, out=y)
    acts = [None, y]
    last = len(net.weights) - 1
    for l in range(1, len(net.weights)):
        y = _affine(y, net.weights[l], net.biases[l], l < last)
        if l < last:
            acts.append(y)
    return y, acts


def mlp_backward_pairs(net: Mlp, xa, xb, acts, cot):
    """Parameter gradient matching ``mlp_forward_pairs``."""
    g = np.asarray(cot, dtype=float)
    L = len(net.weights)
    gw = [None] * L
    gb = [None] * L
    for l in range(L - 1, 0, -1):
        a = acts[l]
        gw[l] = a.T @ g
        gb[l] = g.sum(axis=0)
        g = g @ net.weights[l].T
        g *= a > 0
    n, J = len(xa), len(xb)
    g3 = g.reshape(n, J, -1)
    ga = g3.sum(axis=1)
    ge = g3.sum(axis=0)
    gw[0] = np.concatenate([xa.T @ ga, xb.T @ ge], axis=0)
    gb[0] = ge.sum(axis=0)
    return gw + gb


def mlp_grad(net: Mlp, x, cot):
    """Exact reverse-mode gradient of ``sum_n <cot_n, net(x_n)>``."""
    x2, _ = _check_input(net, x)
    cot = np.asarray(cot, dtype=float).reshape(len(x2), net.n_out)
    _, acts = mlp_forward(net, x2)
    return mlp_backward(net, acts, cot)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params, grads, lr=None):
    """Bias-corrected Adam update; returns new parameter arrays and advances ``state``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter/gradient shape mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out.append(p - lr * mhat / (np.sqrt(vhat) + state.eps_hat))
    return out

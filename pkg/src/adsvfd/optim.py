"""Adam and L-BFGS updates on plain tensors."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import torch


@dataclass
class AdamState:
    """Moment buffers keyed like the parameters they track."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update.

    Args:
        params: name -> tensor. Updated in place (under ``no_grad``).
        grads: name -> gradient, same shapes as ``params``.
        state: moment buffers; created on first use.
        lr: step size.

    Returns:
        ``params`` after the update.
    """
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(g.shape)} vs {tuple(params[k].shape)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for k, g in grads.items():
            m = state.m.get(k)
            if m is None:
                m = state.m[k] = torch.zeros_like(g)
                state.v[k] = torch.zeros_like(g)
            v = state.v[k]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            params[k].sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


@dataclass
class LbfgsState:
    history: int = 10
    s: deque = field(default_factory=deque)
    y: deque = field(default_factory=deque)
    iterations: int = 0


def _direction(g, state: LbfgsState):
    q = g.clone()
    alphas = []
    for s, y in zip(reversed(state.s), reversed(state.y)):
        rho = 1.0 / torch.dot(y, s)
        a = rho * torch.dot(s, q)
        q -= a * y
        alphas.append((rho, a))
    if state.s:
        s, y = state.s[-1], state.y[-1]
        q *= torch.dot(s, y) / torch.dot(y, y)
    for (s, y), (rho, a) in zip(zip(state.s, state.y), reversed(alphas)):
        b = rho * torch.dot(y, q)
        q += (a - b) * s
    return -q


def lbfgs_step(z: torch.Tensor, closure, state: LbfgsState, c: float = 1e-4,
               shrink: float = 0.5, max_trials: int = 20, lr: float = 1.0,
               f0=None, g0=None):
    """One L-BFGS iteration with Armijo backtracking.

    Args:
        z: flat parameter vector (not modified).
        closure: ``f(z) -> (loss, grad)`` with float loss and tensor grad.
        state: curvature history.
        f0, g0: loss and gradient at ``z`` if already known.

    Returns:
        ``(z_new, loss_new, grad_new)``. With a zero gradient ``z`` is
        returned unchanged.
    """
    if f0 is None or g0 is None:
        f0, g0 = closure(z)
    if float(g0.abs().max()) == 0.0:
        return z, f0, g0
    d = _direction(g0, state)
    slope = float(torch.dot(g0, d))
    if slope >= 0:
        # not a descent direction; restart from steepest descent
        state.s.clear()
        state.y.clear()
        d = -g0
        slope = float(torch.dot(g0, d))
    t = lr if state.s else min(1.0, 1.0 / float(g0.abs().sum())) * lr
    for _ in range(max_trials):
        z_new = z + t * d
        f1, g1 = closure(z_new)
        if f1 <= f0 + c * t * slope:
            break
        t *= shrink
    else:
        warnings.warn("L-BFGS line search failed; taking a small gradient step")
        state.s.clear()
        state.y.clear()
        z_new = z - 1e-3 * g0 / max(1.0, float(g0.norm()))
        f1, g1 = closure(z_new)
        return z_new, f1, g1
    s, y = z_new - z, g1 - g0
    if float(torch.dot(s, y)) > 1e-10:
        state.s.append(s)
        state.y.append(y)
        if len(state.s) > state.history:
            state.s.popleft()
            state.y.popleft()
    state.iterations += 1
    return z_new, f1, g1

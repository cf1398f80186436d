"""Explicit and implicit Euler integration of the stationary flow ODE."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .network import NonFiniteError


class FixedPointError(RuntimeError):
    """Raised when an implicit step does not converge."""


@dataclass
class FlowResult:
    """Trajectory of a flow integration.

    Attributes:
        states: ``(K+1, ..., M, 3)``; ``states[0]`` is the start of time and
            ``states[K]`` its end, whatever the direction of integration.
        velocities: ``(K, ..., M, 3)`` field samples used by each step.
        kinetic_energy: mean of ``‖v‖²`` over steps, shapes and points.
    """

    states: torch.Tensor
    velocities: torch.Tensor
    kinetic_energy: torch.Tensor

    @property
    def steps(self) -> int:
        return self.velocities.shape[0]

    def mapped(self) -> torch.Tensor:
        return self.states[-1]


def _check(x, k):
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite state at step {k}")


def _finish(states, vels):
    v = torch.stack(vels)
    return FlowResult(torch.stack(states), v, (v ** 2).sum(-1).mean())


def integrate_forward(points, grid, net, K: int = 10) -> FlowResult:
    """Forward Euler ``x ← x + v(x)/K``; ``states[K]`` is ``φ(x)``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    x = points
    states, vels = [x], []
    for k in range(K):
        v = net(x, grid)
        x = x + v / K
        _check(x, k + 1)
        states.append(x)
        vels.append(v)
    return _finish(states, vels)


def integrate_backward_modified(points, grid, net, K: int = 10) -> FlowResult:
    """Modified Euler inverse ``x ← x - v(x - v(x)/K)/K``; ``states[0]`` is ``φ⁻¹(x)``.

    The stored velocity for each step is the outer evaluation.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    x = points
    states, vels = [x], []
    for k in range(K):
        v = net(x - net(x, grid) / K, grid)
        x = x - v / K
        _check(x, k + 1)
        states.append(x)
        vels.append(v)
    states.reverse()
    vels.reverse()
    return _finish(states, vels)


def integrate_backward_implicit(points, grid, net, K: int = 10, fp_tol: float = 1e-10,
                                fp_max: int = 50) -> FlowResult:
    """Implicit Euler inverse solving ``y = x - v(y)/K`` by fixed-point iteration.

    Starts from the modified-Euler guess. Exact inverse of
    :func:`integrate_forward` up to ``fp_tol``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    x = points
    states, vels = [x], []
    for k in range(K):
        y = x - net(x - net(x, grid) / K, grid) / K
        for _ in range(fp_max):
            y_new = x - net(y, grid) / K
            delta = float((y_new - y).detach().abs().max())
            y = y_new
            if delta < fp_tol:
                break
        else:
            raise FixedPointError(f"fixed point did not converge at step {k + 1} "
                                  f"(last update {delta:.3e})")
        _check(y, k + 1)
        vels.append(net(y, grid))
        states.append(y)
        x = y
    states.reverse()
    vels.reverse()
    return _finish(states, vels)


def geodesic_path(result: FlowResult, step: int) -> torch.Tensor:
    """Snapshot of the trajectory after ``step`` of ``K`` steps."""
    if not 0 <= step <= result.steps:
        raise IndexError(f"step {step} outside [0, {result.steps}]")
    return result.states[step]


def kinetic_energy(forward: FlowResult, backward: FlowResult) -> torch.Tensor:
    """Mean squared speed along both trajectories, summed over the two directions."""
    return forward.kinetic_energy + backward.kinetic_energy

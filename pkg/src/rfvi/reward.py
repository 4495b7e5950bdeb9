"""Separable reward ``r(x, u) = q(x) - g(u)`` with a barrier-shaped action cost.

The action cost ``g(u) = -2 beta u_max / pi * log cos(pi u / (2 u_max))`` has
gradient ``beta tan(pi u / (2 u_max))``; its inverse is the policy shape
``(2 u_max / pi) atan(w / beta)`` used by the analytic greedy action.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import SystemSpec

# Paper-reported reward weights per system.
DEFAULT_WEIGHTS = {
    "pendulum": ([1.0, 0.1], 0.5),
    "cartpole": ([25.0, 1.0, 0.5, 0.1], 0.1),
    "furuta": ([1.0, 5.0, 0.1, 0.1], 0.1),
}

TRANSFORMS = ("half_angle", "literal")


class BarrierDomainError(ValueError):
    """Action on or beyond the actuation limit, where the barrier cost is undefined."""


@dataclass(frozen=True, eq=False)
class RewardSpec:
    Q_diag: np.ndarray
    beta: float
    u_max: np.ndarray
    transform_mask: np.ndarray
    x_des: np.ndarray
    transform: str = "half_angle"

    def __post_init__(self):
        if np.any(self.Q_diag < 0) or not np.any(self.Q_diag > 0):
            raise ValueError("Q_diag must be nonnegative with at least one positive entry")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if np.any(self.u_max <= 0):
            raise ValueError("u_max must be positive")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}")


def make_reward(system: SystemSpec, Q_diag=None, beta=None, transform: str = "half_angle") -> RewardSpec:
    q_default, b_default = DEFAULT_WEIGHTS[system.name]
    return RewardSpec(
        Q_diag=np.asarray(q_default if Q_diag is None else Q_diag, dtype=float),
        beta=float(b_default if beta is None else beta),
        u_max=system.u_max.copy(),
        transform_mask=system.wrap_mask.copy(),
        x_des=system.x_des.copy(),
        transform=transform,
    )


def transform_state(spec: RewardSpec, x) -> np.ndarray:
    """Continuous-joint transform.

    ``half_angle``: ``pi sin(x/2)``, zero only at the upright and of magnitude
    pi when hanging. ``literal``: ``pi**2 sin(x)``, which also vanishes when
    hanging and is kept for comparison only.
    """
    z = np.array(x, dtype=float, copy=True)
    mask = spec.transform_mask
    if mask.any():
        if spec.transform == "half_angle":
            z[..., mask] = np.pi * np.sin(0.5 * z[..., mask])
        else:
            z[..., mask] = np.pi**2 * np.sin(z[..., mask])
    return z


def state_reward(spec: RewardSpec, x) -> np.ndarray:
    dz = transform_state(spec, x) - transform_state(spec, spec.x_des)
    return -np.sum(spec.Q_diag * dz**2, axis=-1)


def action_cost(spec: RewardSpec, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(u) >= spec.u_max):
        raise BarrierDomainError("action on or outside the actuation limit")
    scale = 2.0 * spec.beta * spec.u_max / np.pi
    return np.sum(-scale * np.log(np.cos(np.pi * u / (2.0 * spec.u_max))), axis=-1)


def action_cost_gradient(spec: RewardSpec, u) -> np.ndarray:
    return spec.beta * np.tan(np.pi * np.asarray(u, dtype=float) / (2.0 * spec.u_max))


def conjugate_policy(spec: RewardSpec, w) -> np.ndarray:
    """Maximiser of ``w.u - g(u)``; always strictly inside the actuation limits."""
    u = 2.0 * spec.u_max / np.pi * np.arctan(np.asarray(w, dtype=float) / spec.beta)
    inner = np.nextafter(spec.u_max, 0.0)
    return np.clip(u, -inner, inner)


def reward(spec: RewardSpec, x, u) -> np.ndarray:
    return state_reward(spec, x) - action_cost(spec, u)

"""Closed-form worst-case disturbances and their admissible sets.

Energy-bounded channels (state, action, observation) push along the negative
normalised sensitivity of the value; the parameter channel is bang-bang inside
a box. Amplitudes of the energy channels are modulated by reflected Wiener
processes so the adversary strength varies smoothly in time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import JacobianBundle, SystemSpec

DEFAULT_MODEL_BOUND = 0.075
DEFAULT_SIGMA_W = 1.0


@dataclass(frozen=True, eq=False)
class AdmissibleSets:
    alpha_x: float = 0.0
    alpha_u: float = 0.0
    alpha_o: float = 0.0
    nu_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    global_scale: float = 1.0

    def __post_init__(self):
        if min(self.alpha_x, self.alpha_u, self.alpha_o) < 0:
            raise ValueError("energy bounds must be nonnegative")
        if not 0.0 <= self.global_scale <= 1.0:
            raise ValueError("global_scale must lie in [0, 1]")
        lo, hi = np.asarray(self.nu_min, float), np.asarray(self.nu_max, float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("need nu_min <= nu_max elementwise")
        object.__setattr__(self, "nu_min", lo)
        object.__setattr__(self, "nu_max", hi)

    # effective (scaled) bounds
    @property
    def mu(self) -> np.ndarray:
        return self.global_scale * 0.5 * (self.nu_max + self.nu_min)

    @property
    def delta(self) -> np.ndarray:
        return self.global_scale * 0.5 * (self.nu_max - self.nu_min)

    @property
    def scaled_alpha(self) -> tuple[float, float, float]:
        s = self.global_scale
        return s * self.alpha_x, s * self.alpha_u, s * self.alpha_o

    @property
    def inert(self) -> bool:
        return not (any(self.scaled_alpha) or np.any(self.delta) or np.any(self.mu))

    def scaled(self, global_scale: float) -> "AdmissibleSets":
        return AdmissibleSets(self.alpha_x, self.alpha_u, self.alpha_o, self.nu_min, self.nu_max, global_scale)


def default_sets(
    system: SystemSpec,
    global_scale: float = 1.0,
    model_bound: float = DEFAULT_MODEL_BOUND,
    alpha_x=None,
    alpha_u=None,
    alpha_o=None,
) -> AdmissibleSets:
    """Budgets derived from the system's domain and actuation limits.

    State budget 2.5% of the velocity half-width norm, action budget 5% of
    u_max, observation budget 1.25% of the full half-width norm, parameters
    within +-``model_bound`` of nominal (only where the system allows it).
    """
    half = 0.5 * (system.state_domain[:, 1] - system.state_domain[:, 0])
    vel = half[system.n // 2 :]  # states are (positions, velocities)
    if alpha_x is None:
        alpha_x = 0.025 * float(np.linalg.norm(vel))
    if alpha_u is None:
        alpha_u = 0.05 * float(np.linalg.norm(system.u_max))
    if alpha_o is None:
        alpha_o = 0.0125 * float(np.linalg.norm(half))
    span = model_bound * np.abs(system.theta) * system.perturb_mask
    return AdmissibleSets(alpha_x, alpha_u, alpha_o, -span, span, global_scale)


def null_sets(system: SystemSpec) -> AdmissibleSets:
    return AdmissibleSets(0.0, 0.0, 0.0, np.zeros(system.p), np.zeros(system.p), 0.0)


# --------------------------------------------------------------------------
# projections


def project_energy(z, alpha) -> np.ndarray:
    """``alpha z / |z|``, batched over leading axes; zero where ``z = 0``."""
    z = np.asarray(z, dtype=float)
    # rescale first so tiny or huge z don't under/overflow in the squared norm
    big = np.max(np.abs(z), axis=-1, keepdims=True)
    zs = z / np.where(big > 0.0, big, 1.0)
    norm = np.linalg.norm(zs, axis=-1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim:  # per-row budgets
        alpha = alpha[..., None]
    return np.where(norm > 0.0, alpha * (zs / safe), 0.0)


def project_amplitude(z, delta, mu) -> np.ndarray:
    """``delta * sign(z) + mu`` with ``sign(0) = 0``."""
    return np.asarray(delta, dtype=float) * np.sign(z) + np.asarray(mu, dtype=float)


# --------------------------------------------------------------------------
# channels


def state_disturbance(grad_v, alpha_x) -> np.ndarray:
    return -project_energy(grad_v, alpha_x)


def action_disturbance(B, grad_v, alpha_u) -> np.ndarray:
    z = np.einsum("...ij,...i->...j", B, grad_v)
    return -project_energy(z, alpha_u)


def model_sensitivity(bundle: JacobianBundle, u, grad_v) -> np.ndarray:
    """``(da/dtheta + dB/dtheta u)^T grad_v``, shape (..., p)."""
    J = bundle.da_dtheta + np.einsum("...imp,...m->...ip", bundle.dB_dtheta, u)
    return np.einsum("...ip,...i->...p", J, grad_v)


def observation_sensitivity(bundle: JacobianBundle, u, grad_v) -> np.ndarray:
    """``(da/dx + dB/dx u)^T grad_v``, shape (..., n)."""
    J = bundle.da_dx + np.einsum("...imk,...m->...ik", bundle.dB_dx, u)
    return np.einsum("...ik,...i->...k", J, grad_v)


def model_disturbance(bundle: JacobianBundle, u, grad_v, sets: AdmissibleSets) -> np.ndarray:
    z = model_sensitivity(bundle, u, grad_v)
    # theorem form: only the half-width term changes sign
    return -sets.delta * np.sign(z) + sets.mu


def observation_disturbance(bundle: JacobianBundle, u, grad_v, alpha_o) -> np.ndarray:
    return -project_energy(observation_sensitivity(bundle, u, grad_v), alpha_o)


# --------------------------------------------------------------------------
# Wiener modulation


def reflect_unit(w):
    """Fold the real line onto [0, 1] with reflecting walls."""
    return 1.0 - np.abs(np.mod(w, 2.0) - 1.0)


class WienerState:
    """Reflected Brownian motion on [0, 1], one value per channel (and per rollout).

    The initial value is drawn from the uniform distribution, which is
    stationary for the reflected process.
    """

    def __init__(self, shape, rng: np.random.Generator, sigma: float = DEFAULT_SIGMA_W, w0=None):
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.sigma = float(sigma)
        self.rng = rng
        self.w = rng.uniform(0.0, 1.0, size=shape) if w0 is None else np.broadcast_to(np.asarray(w0, float), shape).copy()

    def modulate(self, dt: float) -> np.ndarray:
        if not dt > 0:
            raise ValueError("dt must be positive")
        step = self.rng.standard_normal(self.w.shape) * (self.sigma * np.sqrt(dt))
        self.w = reflect_unit(self.w + step)
        return self.w


def modulate(wiener: WienerState, dt: float) -> np.ndarray:
    return wiener.modulate(dt)

"""Control-affine rigid-body models: pendulum, cart-pole and Furuta pendulum.

Every system is written as ``xdot = a(x; theta) + B(x; theta) u`` with all
angles measured from the upright configuration, so the goal state is the
origin. Functions broadcast over leading batch dimensions: ``x`` has shape
``(..., n)``, parameters ``(p,)`` or ``(..., p)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

DT_SIM = 0.002  # 500 Hz
DIVERGENCE_INFLATION = 10.0


class DomainError(ValueError):
    """Non-finite state or parameter handed to the dynamics."""


class ParameterError(ValueError):
    """Physical parameter outside its valid range (e.g. non-positive mass)."""


class DivergenceError(RuntimeError):
    """State left the inflated state domain during integration."""


@dataclass(frozen=True, eq=False)
class SystemSpec:
    name: str
    param_names: tuple[str, ...]
    theta: np.ndarray  # nominal parameters
    x_des: np.ndarray
    u_max: np.ndarray
    state_domain: np.ndarray  # (n, 2) lower/upper
    wrap_mask: np.ndarray
    positive_mask: np.ndarray  # params that must stay > 0
    perturb_mask: np.ndarray  # params the model adversary may touch
    start_state: np.ndarray  # hanging configuration
    angle_index: int  # pendulum joint used for the success test
    velocity_index: int
    dt_sim: float = DT_SIM
    state_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.p < 1:
            raise ValueError("n, m, p must all be >= 1")
        if np.any(self.u_max <= 0):
            raise ValueError("u_max must be strictly positive")
        if np.any(self.state_domain[:, 0] >= self.state_domain[:, 1]):
            raise ValueError("state_domain lower bound must be below upper bound")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")
        check_params(self, self.theta)

    @property
    def n(self) -> int:
        return len(self.x_des)

    @property
    def m(self) -> int:
        return len(self.u_max)

    @property
    def p(self) -> int:
        return len(self.theta)

    def param_index(self, name: str) -> int:
        return self.param_names.index(name)

    def with_params(self, **overrides) -> "SystemSpec":
        theta = self.theta.copy()
        for key, value in overrides.items():
            if key not in self.param_names:
                raise KeyError(f"{self.name} has no parameter {key!r}")
            theta[self.param_index(key)] = float(value)
        return replace(self, theta=theta)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": dict(zip(self.param_names, map(float, self.theta))),
            "state_domain": self.state_domain.tolist(),
            "u_max": self.u_max.tolist(),
            "dt_sim": self.dt_sim,
        }


class Controls(NamedTuple):
    """Action and the four disturbances, held constant over a control interval."""

    u: np.ndarray
    xi_x: np.ndarray | float = 0.0
    xi_u: np.ndarray | float = 0.0
    xi_o: np.ndarray | float = 0.0
    xi_theta: np.ndarray | float = 0.0


# --------------------------------------------------------------------------
# equations of motion


def _pendulum(x, th):
    mass, length, damping, gravity = (th[..., i] for i in range(4))
    q, qd = x[..., 0], x[..., 1]
    inertia = mass * length**2
    a = np.stack(
        np.broadcast_arrays(qd, gravity / length * np.sin(q) - damping * qd / inertia), axis=-1
    )
    b2 = np.broadcast_to(1.0 / inertia, q.shape)
    B = np.stack([np.zeros_like(b2), b2], axis=-1)[..., None]
    return a, B


def _cartpole(x, th):
    # x = (cart position, pole angle, cart velocity, pole velocity)
    mc, mp, lp, dc, dp, g = (th[..., i] for i in range(6))
    q, qd, pd = x[..., 1], x[..., 2], x[..., 3]
    lc = 0.5 * lp
    j_pivot = mp * lp**2 / 3.0
    s, c = np.sin(q), np.cos(q)
    m11 = mc + mp
    m12 = mp * lc * c
    m22 = j_pivot
    det = m11 * m22 - m12**2
    f1 = mp * lc * s * pd**2 - dc * qd
    f2 = mp * g * lc * s - dp * pd
    acc_x = (m22 * f1 - m12 * f2) / det
    acc_q = (m11 * f2 - m12 * f1) / det
    a = np.stack(np.broadcast_arrays(qd, pd, acc_x, acc_q), axis=-1)
    zero = np.zeros_like(det)
    B = np.stack(np.broadcast_arrays(zero, zero, m22 / det, -m12 / det), axis=-1)[..., None]
    return a, B


def _furuta(x, th):
    # x = (arm angle, pendulum angle, arm velocity, pendulum velocity)
    mr, lr, mp, lp, dr, dp, g = (th[..., i] for i in range(7))
    al, td, ad = x[..., 1], x[..., 2], x[..., 3]
    jr = mr * lr**2 / 3.0
    jp = mp * lp**2 / 3.0
    lc = 0.5 * lp
    s, c = np.sin(al), np.cos(al)
    m11 = jr + mp * lr**2 + jp * s**2
    m12 = mp * lr * lc * c
    m22 = jp
    det = m11 * m22 - m12**2
    f1 = -dr * td - 2.0 * jp * s * c * td * ad + mp * lr * lc * s * ad**2
    f2 = -dp * ad + jp * s * c * td**2 + mp * g * lc * s
    acc_t = (m22 * f1 - m12 * f2) / det
    acc_a = (m11 * f2 - m12 * f1) / det
    a = np.stack(np.broadcast_arrays(td, ad, acc_t, acc_a), axis=-1)
    zero = np.zeros_like(det)
    B = np.stack(np.broadcast_arrays(zero, zero, m22 / det, -m12 / det), axis=-1)[..., None]
    return a, B


_MODELS: dict[str, Callable] = {"pendulum": _pendulum, "cartpole": _cartpole, "furuta": _furuta}

# name -> (params, positive, perturbable, u_max, domain, wrap, start, angle idx, vel idx, states)
_DEFAULTS = {
    "pendulum": dict(
        params={"mass": 1.0, "length": 1.0, "damping": 0.0, "gravity": 9.81},
        positive=("mass", "length", "gravity"),
        fixed=("gravity",),
        u_max=[6.0],
        domain=[[-math.pi, math.pi], [-8.0, 8.0]],
        wrap=[True, False],
        start=[math.pi, 0.0],
        angle=0,
        velocity=1,
        states=("theta", "theta_dot"),
    ),
    "cartpole": dict(
        params={
            "cart_mass": 0.57,
            "pole_mass": 0.127,
            "pole_length": 0.3365,
            "cart_damping": 0.1,
            "pole_damping": 0.0024,
            "gravity": 9.81,
        },
        positive=("cart_mass", "pole_mass", "pole_length", "gravity"),
        fixed=("gravity",),
        u_max=[5.0],
        domain=[[-0.4, 0.4], [-math.pi, math.pi], [-3.0, 3.0], [-20.0, 20.0]],
        wrap=[False, True, False, False],
        start=[0.0, math.pi, 0.0, 0.0],
        angle=1,
        velocity=3,
        states=("x", "theta", "x_dot", "theta_dot"),
    ),
    "furuta": dict(
        params={
            "arm_mass": 0.095,
            "arm_length": 0.085,
            "pend_mass": 0.024,
            "pend_length": 0.129,
            "arm_damping": 5e-4,
            "pend_damping": 1e-6,
            "gravity": 9.81,
        },
        positive=("arm_mass", "arm_length", "pend_mass", "pend_length", "gravity"),
        fixed=("gravity",),
        u_max=[0.04],
        domain=[[-math.pi / 2, math.pi / 2], [-math.pi, math.pi], [-20.0, 20.0], [-30.0, 30.0]],
        wrap=[False, True, False, False],
        start=[0.0, math.pi, 0.0, 0.0],
        angle=1,
        velocity=3,
        states=("arm", "pendulum", "arm_dot", "pendulum_dot"),
    ),
}

SYSTEM_NAMES = tuple(_MODELS)


def make_system(
    name: str,
    params: dict | None = None,
    state_domain=None,
    u_max=None,
    dt_sim: float = DT_SIM,
) -> SystemSpec:
    """Build a system with its documented defaults, optionally overridden."""
    if name not in _DEFAULTS:
        raise KeyError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")
    d = _DEFAULTS[name]
    values = dict(d["params"])
    for key, val in (params or {}).items():
        if key not in values:
            raise KeyError(f"{name} has no parameter {key!r}")
        values[key] = float(val)
    names = tuple(values)
    n = len(d["wrap"])
    return SystemSpec(
        name=name,
        param_names=names,
        theta=np.array([values[k] for k in names], dtype=float),
        x_des=np.zeros(n),
        u_max=np.asarray(u_max if u_max is not None else d["u_max"], dtype=float).reshape(-1),
        state_domain=np.asarray(state_domain if state_domain is not None else d["domain"], dtype=float),
        wrap_mask=np.array(d["wrap"], dtype=bool),
        positive_mask=np.array([k in d["positive"] for k in names]),
        perturb_mask=np.array([k not in d["fixed"] for k in names]),
        start_state=np.array(d["start"], dtype=float),
        angle_index=d["angle"],
        velocity_index=d["velocity"],
        dt_sim=float(dt_sim),
        state_names=d["states"],
    )


def system_from_dict(cfg: dict) -> SystemSpec:
    cfg = dict(cfg)
    return make_system(
        cfg.pop("name"),
        params=cfg.pop("params", None),
        state_domain=cfg.pop("state_domain", None),
        u_max=cfg.pop("u_max", None),
        dt_sim=cfg.pop("dt_sim", DT_SIM),
    )


def load_system(path) -> SystemSpec:
    """Load a system definition from JSON (``name``, ``params``, ``state_domain``, ``u_max``, ``dt_sim``)."""
    with open(path) as fh:
        cfg = json.load(fh)
    return system_from_dict(cfg.get("system", cfg))


# --------------------------------------------------------------------------
# evaluation


def check_params(spec: SystemSpec, theta) -> None:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise DomainError("non-finite parameter vector")
    if np.any(theta[..., spec.positive_mask] <= 0.0):
        bad = [n for n, ok in zip(spec.param_names, spec.positive_mask) if ok]
        raise ParameterError(f"{spec.name}: parameters {bad} must stay strictly positive")


def eval_dynamics(spec: SystemSpec, x, theta=None):
    """Drift ``a(x; theta)`` with shape (..., n) and control matrix ``B`` with shape (..., n, m)."""
    x = np.asarray(x, dtype=float)
    theta = spec.theta if theta is None else np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite state")
    check_params(spec, theta)
    return _MODELS[spec.name](x, theta)


def _pendulum_jacobians(x, th):
    mass, length, damping, gravity = (th[..., i] for i in range(4))
    q, qd = x[..., 0], x[..., 1]
    inertia = mass * length**2
    shape = np.broadcast_shapes(q.shape, mass.shape)
    da_dx = np.zeros(shape + (2, 2))
    da_dx[..., 0, 1] = 1.0
    da_dx[..., 1, 0] = gravity / length * np.cos(q)
    da_dx[..., 1, 1] = -damping / inertia
    dB_dx = np.zeros(shape + (2, 1, 2))
    da_dth = np.zeros(shape + (2, 4))
    da_dth[..., 1, 0] = damping * qd / (mass * inertia)
    da_dth[..., 1, 1] = -gravity * np.sin(q) / length**2 + 2.0 * damping * qd / (inertia * length)
    da_dth[..., 1, 2] = -qd / inertia
    da_dth[..., 1, 3] = np.sin(q) / length
    dB_dth = np.zeros(shape + (2, 1, 4))
    dB_dth[..., 1, 0, 0] = -1.0 / (mass * inertia)
    dB_dth[..., 1, 0, 1] = -2.0 / (inertia * length)
    return JacobianBundle(da_dx, dB_dx, da_dth, dB_dth)


class JacobianBundle(NamedTuple):
    da_dx: np.ndarray  # (..., n, n)
    dB_dx: np.ndarray  # (..., n, m, n)
    da_dtheta: np.ndarray  # (..., n, p)
    dB_dtheta: np.ndarray  # (..., n, m, p)


def _central_diff(fun, v, rel_step):
    """Central differences of ``fun`` (returning (a, B)) along the last axis of ``v``."""
    v = np.asarray(v, dtype=float)
    da, dB = [], []
    for j in range(v.shape[-1]):
        h = rel_step * np.maximum(np.abs(v[..., j]), 1.0)
        vp = v.copy()
        vm = v.copy()
        vp[..., j] += h
        vm[..., j] -= h
        step = vp[..., j] - vm[..., j]  # representable step
        ap, Bp = fun(vp)
        am, Bm = fun(vm)
        da.append((ap - am) / step[..., None])
        dB.append((Bp - Bm) / step[..., None, None])
    return np.stack(da, axis=-1), np.stack(dB, axis=-1)


def eval_jacobians(spec: SystemSpec, x, theta=None, method: str = "auto", rel_step: float = 1e-6):
    """All four Jacobians of the dynamics.

    ``method="fd"`` forces central finite differences (relative step ``rel_step``);
    ``"analytic"`` is only available for the pendulum; ``"auto"`` picks the
    analytic path when it exists.
    """
    x = np.asarray(x, dtype=float)
    theta = spec.theta if theta is None else np.asarray(theta, dtype=float)
    if method not in ("auto", "fd", "analytic"):
        raise ValueError(f"unknown jacobian method {method!r}")
    if method == "analytic" and spec.name != "pendulum":
        raise ValueError(f"no analytic jacobians for {spec.name}")
    if spec.name == "pendulum" and method != "fd":
        return _pendulum_jacobians(x, theta)
    model = _MODELS[spec.name]
    da_dx, dB_dx = _central_diff(lambda v: model(v, theta), x, rel_step)
    th_full = np.broadcast_to(theta, x.shape[:-1] + theta.shape[-1:])
    da_dth, dB_dth = _central_diff(lambda v: model(x, v), th_full, rel_step)
    return JacobianBundle(da_dx, dB_dx, da_dth, dB_dth)


def perturbed_derivative(spec: SystemSpec, x, u, xi_x=0.0, xi_u=0.0, xi_o=0.0, xi_theta=0.0, theta=None, check=True):
    """``a(x + xi_o; theta + xi_theta) + B(x + xi_o; theta + xi_theta)(u + xi_u) + xi_x``."""
    theta = spec.theta if theta is None else np.asarray(theta, dtype=float)
    th = theta + xi_theta
    if check:
        a, B = eval_dynamics(spec, np.asarray(x, dtype=float) + xi_o, th)
    else:
        a, B = _MODELS[spec.name](x + xi_o, th)
    return a + np.einsum("...ij,...j->...i", B, np.asarray(u, dtype=float) + xi_u) + xi_x


def wrap_angles(spec: SystemSpec, x):
    """Map continuous joints into (-pi, pi]."""
    x = np.array(x, dtype=float, copy=True)
    w = spec.wrap_mask
    if w.any():
        x[..., w] = np.pi - np.mod(np.pi - x[..., w], 2.0 * np.pi)
    return x


def inflated_domain(spec: SystemSpec, factor: float = DIVERGENCE_INFLATION) -> np.ndarray:
    center = spec.state_domain.mean(axis=1)
    half = 0.5 * (spec.state_domain[:, 1] - spec.state_domain[:, 0])
    return np.stack([center - factor * half, center + factor * half], axis=1)


def diverged(spec: SystemSpec, x) -> np.ndarray:
    """Rows of ``x`` outside the 10x inflated domain (wrapped joints never diverge)."""
    box = inflated_domain(spec)
    x = np.asarray(x)
    out = (x < box[:, 0]) | (x > box[:, 1]) | ~np.isfinite(x)
    out[..., spec.wrap_mask] = ~np.isfinite(x[..., spec.wrap_mask])
    return out.any(axis=-1)


def _rk4(spec, x, c: Controls, theta, h):
    def f(y):
        return perturbed_derivative(spec, y, c.u, c.xi_x, c.xi_u, c.xi_o, c.xi_theta, theta, check=False)

    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def advance(spec: SystemSpec, x, controls: Controls, dt: float, theta=None, max_substep=None):
    """RK4 over ``dt`` with the controls held; returns ``(x_next, diverged_mask)``.

    Rows that diverge are returned as-is (possibly non-finite); callers decide.
    """
    theta = spec.theta if theta is None else np.asarray(theta, dtype=float)
    check_params(spec, theta + controls.xi_theta)
    h_max = spec.dt_sim if max_substep is None else max_substep
    n_sub = max(1, math.ceil(dt / h_max - 1e-9))
    h = dt / n_sub
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_sub):
            x = wrap_angles(spec, _rk4(spec, x, controls, theta, h))
    return x, diverged(spec, x)


def integrate_step(spec: SystemSpec, x, control_law, dt: float, theta=None, max_substep=None):
    """Integrate one control interval with zero-order hold.

    ``control_law`` is either a :class:`Controls` tuple or a callable
    ``x -> Controls`` evaluated once at the start of the interval.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    controls = control_law(x) if callable(control_law) else control_law
    if not isinstance(controls, Controls):
        controls = Controls(*controls)
    x_next, bad = advance(spec, x, controls, dt, theta, max_substep)
    if np.any(bad):
        raise DivergenceError(f"{spec.name}: state left the {DIVERGENCE_INFLATION:g}x inflated domain")
    return x_next

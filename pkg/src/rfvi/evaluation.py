"""Policy evaluation, parameter sweeps and independent oracles.

The grid oracle solves the pendulum max-min problem by semi-Lagrangian value
iteration on a regular grid; it shares only the dynamics and reward with the
learning code and is used to cross-check trained value functions.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import adversary as adv
from .dynamics import SystemSpec, eval_dynamics, eval_jacobians, perturbed_derivative
from .reward import RewardSpec, action_cost, conjugate_policy, reward, state_reward
from .solver import STREAM_EVAL, SolverConfig, greedy_action, rollout_adversarial, rollout_params, stream
from .value_net import ValueParams, value_and_gradient

EVAL_DURATION = 10.0
DEFAULT_MULTIPLIERS = (0.7, 0.85, 1.0, 1.15, 1.3)
SWEEP_PARAMETER = {"pendulum": "mass", "cartpole": "pole_mass", "furuta": "pend_mass"}


@dataclass(frozen=True)
class SuccessCriterion:
    angle_tol_deg: float = 5.0
    velocity_tol: float = 0.5
    window: float = 1.0


@dataclass
class EvalReport:
    state_reward: np.ndarray  # undiscounted, per rollout
    action_reward: np.ndarray
    discounted_state: np.ndarray
    discounted_action: np.ndarray
    success: np.ndarray
    label: str = ""
    multiplier: float = 1.0

    @property
    def count(self) -> int:
        return len(self.success)

    @property
    def total(self) -> np.ndarray:
        return self.state_reward + self.action_reward

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success))

    @property
    def median_state(self) -> float:
        return float(np.median(self.state_reward))

    @property
    def median_action(self) -> float:
        return float(np.median(self.action_reward))

    @property
    def percentiles(self) -> tuple[float, float, float]:
        p25, p50, p75 = np.percentile(self.total, [25, 50, 75])
        return float(p25), float(p50), float(p75)

    def summary(self) -> dict:
        p25, p50, p75 = self.percentiles
        return {
            "label": self.label,
            "multiplier": self.multiplier,
            "count": self.count,
            "success_rate": self.success_rate,
            "state_reward_mean": float(self.state_reward.mean()),
            "state_reward_2std": float(2 * self.state_reward.std()),
            "action_reward_mean": float(self.action_reward.mean()),
            "action_reward_2std": float(2 * self.action_reward.std()),
            "median_state": self.median_state,
            "median_action": self.median_action,
            "total_p25": p25,
            "total_p50": p50,
            "total_p75": p75,
            "discounted_state_mean": float(self.discounted_state.mean()),
            "discounted_action_mean": float(self.discounted_action.mean()),
        }


def start_states(system: SystemSpec, count: int, seed: int, noise: float = 0.05) -> np.ndarray:
    rng = stream(seed, STREAM_EVAL)
    return system.start_state + noise * rng.standard_normal((count, system.n))


def success_mask(system: SystemSpec, times, states, valid_until, criterion: SuccessCriterion) -> np.ndarray:
    t_end = times[-1]
    window = times >= t_end - criterion.window - 1e-9
    ang = states[window][..., system.angle_index] - system.x_des[system.angle_index]
    ang = np.pi - np.mod(np.pi - ang, 2 * np.pi)
    vel = states[window][..., system.velocity_index]
    ok = (np.abs(ang) <= np.deg2rad(criterion.angle_tol_deg)) & (np.abs(vel) < criterion.velocity_tol)
    return ok.all(axis=0) & (valid_until == len(times) - 1)


def evaluate(
    psi: ValueParams,
    system: SystemSpec,
    reward_spec: RewardSpec,
    config: SolverConfig | None = None,
    theta_eval=None,
    n_rollouts: int = 32,
    seed: int = 0,
    duration: float = EVAL_DURATION,
    criterion: SuccessCriterion = SuccessCriterion(),
    label: str = "",
    multiplier: float = 1.0,
) -> EvalReport:
    """Greedy closed-loop rollouts from the hanging state, no adversary."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    config = config or SolverConfig()
    x0 = start_states(system, n_rollouts, seed)
    ro = rollout_adversarial(
        x0, rollout_params(psi, config), config, system, reward_spec, None, horizon=duration, plant_theta=theta_eval
    )
    h = np.diff(ro.times)[:, None]
    live = np.arange(len(ro.times) - 1)[:, None] < ro.valid_until[None, :]
    q = state_reward(reward_spec, ro.states[:-1]) * h * live
    g = -action_cost(reward_spec, ro.actions[:-1]) * h * live
    disc = np.exp(-config.rho * ro.times[:-1])[:, None]
    return EvalReport(
        state_reward=q.sum(axis=0),
        action_reward=g.sum(axis=0),
        discounted_state=(disc * q).sum(axis=0),
        discounted_action=(disc * g).sum(axis=0),
        success=success_mask(system, ro.times, ro.states, ro.valid_until, criterion),
        label=label,
        multiplier=multiplier,
    )


# --------------------------------------------------------------------------
# mass sweep


@dataclass
class MassSweepSpec:
    parameter: str
    multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS
    rollouts: int = 32

    def __post_init__(self):
        if any(m <= 0 for m in self.multipliers):
            raise ValueError("multipliers must be positive")


@dataclass
class SweepResult:
    reports: dict[str, list[EvalReport]] = field(default_factory=dict)

    def nominal(self, label: str) -> EvalReport:
        return min(self.reports[label], key=lambda r: abs(r.multiplier - 1.0))

    def degradation(self, label: str, multiplier: float) -> float:
        """Loss of median state reward relative to nominal (positive means worse)."""
        rep = next(r for r in self.reports[label] if math.isclose(r.multiplier, multiplier))
        return self.nominal(label).median_state - rep.median_state

    def rows(self) -> list[dict]:
        out = []
        for label, reps in self.reports.items():
            base = self.nominal(label).median_state
            for r in reps:
                row = r.summary()
                row["delta_state"] = r.median_state - base
                row["degradation"] = base - r.median_state
                out.append(row)
        return out


def mass_sweep(
    policies: dict[str, ValueParams],
    system: SystemSpec,
    reward_spec: RewardSpec,
    config: SolverConfig | None = None,
    sweep: MassSweepSpec | None = None,
    seed: int = 0,
) -> SweepResult:
    """Evaluate each policy with the swept parameter scaled by every multiplier."""
    sweep = sweep or MassSweepSpec(SWEEP_PARAMETER[system.name])
    idx = system.param_index(sweep.parameter)
    result = SweepResult()
    for label, psi in policies.items():
        reps = []
        for mult in sweep.multipliers:
            theta = system.theta.copy()
            theta[idx] *= mult
            reps.append(evaluate(psi, system, reward_spec, config, theta, sweep.rollouts, seed, label=label, multiplier=mult))
        result.reports[label] = reps
    return result


# --------------------------------------------------------------------------
# grid oracle


@dataclass(frozen=True)
class GridSpec:
    n_angle: int = 101
    n_velocity: int = 101
    n_actions: int = 41
    n_directions: int = 17
    dt: float = 0.05
    rho: float = 0.5
    tol: float = 1e-6
    max_sweeps: int = 5000
    eval_sweeps: int = 30  # fixed-policy sweeps between greedy sweeps
    energy_amplitude: float = 1.0  # fraction of the energy budgets the oracle adversary may use

    def __post_init__(self):
        if self.n_angle > 101 or self.n_velocity > 101 or self.n_actions > 41 or self.n_directions > 17:
            raise ValueError("grid limited to 101x101 states, 41 actions, 17 directions")


@dataclass
class GridResult:
    angles: np.ndarray
    velocities: np.ndarray
    V: np.ndarray  # (n_angle, n_velocity)
    policy: np.ndarray  # greedy action per cell
    residual: float
    sweeps: int
    converged: bool


class _Interp:
    """Bilinear interpolation on the (periodic angle, clamped velocity) grid."""

    def __init__(self, angles, velocities):
        self.a0, self.da = angles[0], angles[1] - angles[0]
        self.v0, self.dv = velocities[0], velocities[1] - velocities[0]
        self.na, self.nv = len(angles), len(velocities)

    def weights(self, q, qd):
        """(flat index of the lower corner, angle fraction, velocity fraction)."""
        q = np.mod(q - self.a0, 2 * np.pi)  # in [0, 2pi)
        fa = q / self.da
        ia = np.minimum(np.floor(fa).astype(np.int64), self.na - 2)
        ta = fa - ia
        fv = np.clip((qd - self.v0) / self.dv, 0.0, self.nv - 1)
        iv = np.minimum(np.floor(fv).astype(np.int64), self.nv - 2)
        tv = fv - iv
        return (ia * self.nv + iv).astype(np.int32), ta, tv

    def apply(self, V, w):
        flat, ta, tv = w
        v = V.reshape(-1)
        nv = self.nv
        return (
            (1 - ta) * (1 - tv) * v[flat]
            + ta * (1 - tv) * v[flat + nv]
            + (1 - ta) * tv * v[flat + 1]
            + ta * tv * v[flat + nv + 1]
        )


def _axis(lo, hi, n, anchor=0.0):
    """``linspace`` with the node nearest ``anchor`` snapped onto it when within round-off."""
    g = np.linspace(lo, hi, n)
    g[np.abs(g - anchor) <= 1e-12 * (hi - lo)] = anchor
    return g


def _circle(n):
    ang = 2 * np.pi * np.arange(n) / n
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def _candidates(system: SystemSpec, sets: adv.AdmissibleSets | None, spec: GridSpec):
    """Per-channel disturbance candidates; each list starts with the zero disturbance."""
    n, p = system.n, system.p
    zero = {"xi_x": np.zeros(n), "xi_u": np.zeros(system.m), "xi_o": np.zeros(n), "xi_theta": np.zeros(p)}
    chans = {}
    if sets is None:
        return zero, chans
    ax, au, ao = (spec.energy_amplitude * a for a in sets.scaled_alpha)
    if ax > 0:
        chans["xi_x"] = ax * _circle(spec.n_directions)
    if au > 0:
        chans["xi_u"] = np.array([[au], [-au]])
    if ao > 0:
        chans["xi_o"] = ao * _circle(spec.n_directions)
    free = np.flatnonzero(sets.delta > 0)
    if len(free) or np.any(sets.mu):
        corners = []
        for bits in range(2 ** len(free)):
            c = sets.mu.copy()
            for j, k in enumerate(free):
                c[k] += sets.delta[k] if (bits >> j) & 1 else -sets.delta[k]
            corners.append(c)
        chans["xi_theta"] = np.array(corners)
    return zero, chans


def grid_oracle_pendulum(
    system: SystemSpec,
    reward_spec: RewardSpec,
    sets: adv.AdmissibleSets | None = None,
    spec: GridSpec = GridSpec(),
    reward_fn=None,
) -> GridResult:
    """Tabular max-min value iteration for the pendulum.

    Each sweep maximises over a grid of interior actions and, per action,
    minimises over a fixed disturbance set: the candidates of every channel
    with the other channels at zero, plus one joint disturbance per push
    direction ``e`` on a circle, where each channel plays its best response
    to ``e`` taken as the value gradient. The set does not depend on V, so
    each greedy sweep is a contraction. Successors come from one midpoint
    step of length ``dt``; values are interpolated bilinearly. Between greedy
    sweeps the current actions are held fixed for ``eval_sweeps`` sweeps in
    which only the disturbance is re-minimised (modified policy iteration
    for the maximiser).
    """
    if system.name != "pendulum":
        raise ValueError("grid oracle is implemented for the pendulum only")
    lo, hi = system.state_domain[1]
    angles = _axis(-np.pi, np.pi, spec.n_angle)
    vels = _axis(lo, hi, spec.n_velocity)
    Q, QD = np.meshgrid(angles, vels, indexing="ij")
    X = np.stack([Q, QD], axis=-1).reshape(-1, 2)
    N = len(X)
    interp = _Interp(angles, vels)
    gamma = math.exp(-spec.rho * spec.dt)
    us = system.u_max[0] * np.linspace(-1.0, 1.0, spec.n_actions + 2)[1:-1]
    rfun = reward_fn or (lambda x, u: reward(reward_spec, x, u))

    def successor(u, d):
        def f(x):
            return perturbed_derivative(system, x, u, d["xi_x"], d["xi_u"], d["xi_o"], d["xi_theta"], check=False)

        k1 = f(X)
        xn = X + spec.dt * f(X + 0.5 * spec.dt * k1)
        return interp.weights(xn[:, 0], xn[:, 1])

    zero, chans = _candidates(system, sets, spec)
    if chans:
        bundle = eval_jacobians(system, X)
        _, Bx = eval_dynamics(system, X)
        ax, au, ao = (spec.energy_amplitude * a for a in sets.scaled_alpha)

    # per action: stage reward and stacked successor weights of every candidate
    stage, tables = [], []
    for u_val in us:
        u = np.full((N, 1), u_val)
        stage.append(rfun(X, u) * spec.dt)
        cands = [zero] + [{**zero, ch: c} for ch, vals in chans.items() for c in vals]
        if chans:
            for e in _circle(spec.n_directions):
                g = np.broadcast_to(e, (N, 2))
                cands.append({
                    "xi_x": adv.state_disturbance(g, ax),
                    "xi_u": adv.action_disturbance(Bx, g, au),
                    "xi_o": adv.observation_disturbance(bundle, u, g, ao),
                    "xi_theta": adv.model_disturbance(bundle, u, g, sets),
                })
        ws = [successor(u, d) for d in cands]
        tables.append(tuple(np.stack([w[k] for w in ws]) for k in range(3)))

    stage = np.stack(stage)  # (A, N)
    flat, ta, tv = (np.stack([t[k] for t in tables]) for k in range(3))  # (A, E, N)
    del tables
    cols = np.arange(N)

    def worst_case(V):
        """(A, N) value of every action against its worst candidate."""
        return np.stack([
            (stage[a] + gamma * interp.apply(V, (flat[a], ta[a], tv[a]))).min(axis=0) for a in range(len(us))
        ])

    def worst_case_at(V, act):
        w = (flat[act, :, cols].T, ta[act, :, cols].T, tv[act, :, cols].T)
        return (stage[act, cols] + gamma * interp.apply(V, w)).min(axis=0)

    V = np.zeros((spec.n_angle, spec.n_velocity))
    residual, sweeps = np.inf, 0
    while sweeps < spec.max_sweeps:
        q = worst_case(V)
        best_a = q.argmax(axis=0)
        new = q[best_a, cols].reshape(V.shape)
        residual = float(np.max(np.abs(new - V)))
        V = new
        sweeps += 1
        if residual < spec.tol:
            break
        # actions frozen, the adversary keeps responding: freezing both can cycle
        for _ in range(spec.eval_sweeps):
            V = worst_case_at(V, best_a).reshape(V.shape)
    policy = us[best_a].reshape(V.shape)
    return GridResult(angles, vels, V, policy, residual, sweeps, residual < spec.tol)


def compare_to_grid(psi: ValueParams, system: SystemSpec, reward_spec: RewardSpec, grid: GridResult, margin: float = 0.1):
    """Pearson correlation and greedy-action sign agreement on interior cells.

    Interior excludes ``margin`` of the velocity range at each end; the angle
    is periodic and fully used. Cells where either action is essentially zero
    are left out of the sign comparison.
    """
    Q, QD = np.meshgrid(grid.angles, grid.velocities, indexing="ij")
    lo, hi = grid.velocities[0], grid.velocities[-1]
    span = hi - lo
    mask = (QD >= lo + margin * span) & (QD <= hi - margin * span)
    X = np.stack([Q[mask], QD[mask]], axis=-1)
    u, V, _, _ = greedy_action(psi, system, reward_spec, X)
    corr = float(np.corrcoef(V, grid.V[mask])[0, 1])
    ug = grid.policy[mask]
    levels = np.unique(grid.policy)
    step = float(np.min(np.diff(levels))) if len(levels) > 1 else 0.0  # one action-grid spacing
    sig = (np.abs(ug) > step) & (np.abs(u[:, 0]) > 1e-3 * system.u_max[0])
    agree = float(np.mean(np.sign(u[sig, 0]) == np.sign(ug[sig]))) if sig.any() else 1.0
    return {"pearson": corr, "sign_agreement": agree, "cells": int(mask.sum()), "sign_cells": int(sig.sum())}


# --------------------------------------------------------------------------
# spot checks


def sample_energy_ball(alpha: float, dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((count, dim))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return alpha * rng.random((count, 1)) ** (1.0 / dim) * d


def sample_box(lo, hi, count: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lo + (hi - lo) * rng.random((count, len(lo)))


def minimax_spot_check(
    psi: ValueParams,
    system: SystemSpec,
    reward_spec: RewardSpec,
    x,
    sets: adv.AdmissibleSets,
    n_actions: int = 41,
    n_samples: int = 10_000,
    seed: int = 0,
) -> dict:
    """Compare analytic action and disturbances with brute force at one state.

    The objective is ``grad V . f(x, u, xi) + r(x, u)``. Returns the action
    margin (analytic minus best grid action on the action-dependent part),
    and the gap between the analytic joint disturbance and the best of the
    sampled admissible disturbances at the analytic action.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    V, grad = value_and_gradient(psi, x)
    a, B = eval_dynamics(system, x)
    w = B.T @ grad
    u_star = conjugate_policy(reward_spec, w)

    def h(u):
        return u @ w - action_cost(reward_spec, u)

    u_grid = system.u_max * np.linspace(-1.0, 1.0, n_actions + 2)[1:-1, None]
    action_margin = float(h(u_star) - np.max(h(u_grid)))

    ax, au, ao = sets.scaled_alpha
    bundle = eval_jacobians(system, x)
    xi = {
        "xi_x": adv.state_disturbance(grad, ax),
        "xi_u": adv.action_disturbance(B, grad, au),
        "xi_o": adv.observation_disturbance(bundle, u_star, grad, ao),
        "xi_theta": adv.model_disturbance(bundle, u_star, grad, sets),
    }

    def objective(d, count=None):
        f = perturbed_derivative(system, x if count is None else np.broadcast_to(x, (count, system.n)),
                                 u_star, d["xi_x"], d["xi_u"], d["xi_o"], d["xi_theta"], check=False)
        return f @ grad + reward(reward_spec, x, u_star)

    samples = {
        "xi_x": sample_energy_ball(ax, system.n, n_samples, rng),
        "xi_u": sample_energy_ball(au, system.m, n_samples, rng),
        "xi_o": sample_energy_ball(ao, system.n, n_samples, rng),
        "xi_theta": sample_box(sets.mu - sets.delta, sets.mu + sets.delta, n_samples, rng),
    }
    analytic = float(objective(xi))
    sampled = objective(samples, n_samples)
    return {
        "u_star": u_star,
        "action_margin": action_margin,
        "analytic_value": analytic,
        "sampled_min": float(np.min(sampled)),
        "saddle_gap": float(analytic - np.min(sampled)),
        "disturbances": xi,
    }


# --------------------------------------------------------------------------
# export


def export_slice(psi: ValueParams, system: SystemSpec, reward_spec: RewardSpec, dims=(0, 1), shape=(101, 101), base=None):
    """Value and greedy policy on a 2-D slice through ``base`` (default the goal)."""
    i, j = dims
    if not (0 <= i < system.n and 0 <= j < system.n) or i == j:
        raise ValueError(f"slice dims {dims} out of range for a {system.n}-dimensional state")
    base = system.x_des if base is None else np.asarray(base, dtype=float)
    gi = _axis(*system.state_domain[i], shape[0], base[i])
    gj = _axis(*system.state_domain[j], shape[1], base[j])
    X = np.broadcast_to(base, shape + (system.n,)).copy()
    X[..., i] = gi[:, None]
    X[..., j] = gj[None, :]
    u, V, _, _ = greedy_action(psi, system, reward_spec, X.reshape(-1, system.n))
    return gi, gj, V.reshape(shape), u.reshape(shape + (system.m,))


def write_matrix_csv(path, row_axis, col_axis, M, row_name="row", col_name="col") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{row_name}\\{col_name}"] + [repr(float(c)) for c in col_axis])
        for r, vals in zip(row_axis, M):
            w.writerow([repr(float(r))] + [repr(float(v)) for v in vals])


def read_matrix_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    cols = np.array([float(c) for c in rows[0][1:]])
    r = np.array([float(row[0]) for row in rows[1:]])
    M = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return r, cols, M


def write_reports(path_json, path_csv, rows: list[dict]) -> None:
    with open(path_json, "w") as fh:
        json.dump(rows, fh, indent=2)
    if rows:
        with open(path_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

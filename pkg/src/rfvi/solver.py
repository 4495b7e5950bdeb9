"""Robust fitted value iteration: adversarial rollouts, n-step targets, DP and RTDP loops."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import adversary as adv
from .dynamics import Controls, SystemSpec, advance, eval_dynamics, eval_jacobians, wrap_angles
from .reward import RewardSpec, conjugate_policy, reward
from .value_net import FitConfig, NetworkShape, ValueParams, default_input_scale, fit, init_params, save_checkpoint
from .value_net import value_and_gradient, value_forward

log = logging.getLogger(__name__)

TARGET_WEIGHT_FLOOR = 1e-4
METRIC_COLUMNS = ("iteration", "mean_target", "fit_loss", "eval_reward_state", "eval_reward_action", "success_rate")

# independent random streams, keyed through SeedSequence spawn keys
STREAM_INIT, STREAM_DATA, STREAM_WIENER, STREAM_FIT, STREAM_EXPLORE, STREAM_EVAL = range(6)


class TrainingAborted(RuntimeError):
    """Too many rollouts diverged within one iteration."""


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def stream_int(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


@dataclass
class SolverConfig:
    rho: float = 0.5
    beta_target: float = math.log(1e4) / 0.5
    dt_ctrl: float = 0.01
    iterations: int = 50
    dataset_size: int = 10_000
    mode: str = "dp"
    fifo_rollouts: int = 32
    buffer_capacity: int = 100_000
    explore_horizon: float = 5.0
    explore_sigma: float = 0.5  # exploration noise, fraction of u_max
    start_sigma: float = 0.1
    sigma_w: float = adv.DEFAULT_SIGMA_W
    hidden_widths: tuple[int, ...] = (64, 64)
    ensemble_size: int = 4
    fit: FitConfig = field(default_factory=FitConfig)
    chunk_size: int = 1024
    threads: int = 1
    jacobians: str = "auto"
    network_dtype: str = "float64"  # arithmetic of value-network evaluation inside rollouts
    eval_every: int = 5
    eval_rollouts: int = 8
    checkpoint_every: int = 10
    abort_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (self.rho >= 0 and self.beta_target > 0 and self.dt_ctrl > 0):
            raise ValueError("need rho >= 0, beta_target > 0, dt_ctrl > 0")
        if self.mode not in ("dp", "rtdp"):
            raise ValueError("mode must be 'dp' or 'rtdp'")
        if self.iterations < 1 or self.dataset_size < 1 or self.chunk_size < 1:
            raise ValueError("iterations, dataset_size and chunk_size must be >= 1")
        self.hidden_widths = tuple(self.hidden_widths)

    @property
    def T_horizon(self) -> float:
        """Horizon at which the n-step weight ``exp(-beta T)`` drops to 1e-4."""
        return math.log(1.0 / TARGET_WEIGHT_FLOOR) / self.beta_target

    @property
    def gamma(self) -> float:
        return math.exp(-self.rho * self.dt_ctrl)


def control_grid(horizon: float, dt: float) -> np.ndarray:
    """Node times ``0, dt, 2dt, ...`` ending exactly at ``horizon`` (short last step if needed)."""
    k = max(1, math.ceil(horizon / dt - 1e-9))
    t = np.arange(k + 1) * dt
    t[-1] = horizon
    return t


# --------------------------------------------------------------------------
# datasets


def sample_domain(spec: SystemSpec, count: int, seed) -> np.ndarray:
    """Uniform draws from the training box; ``seed`` may be an int or a Generator."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = spec.state_domain[:, 0], spec.state_domain[:, 1]
    return lo + (hi - lo) * rng.random((count, spec.n))


class FifoBuffer:
    """Fixed-capacity ring buffer of states; the oldest rows are evicted first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data = np.empty((capacity, dim))
        self._head = 0  # next write position
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, states) -> None:
        states = np.asarray(states, dtype=float).reshape(-1, self._data.shape[1])
        if len(states) >= self.capacity:
            self._data[:] = states[-self.capacity :]
            self._head, self._size = 0, self.capacity
            return
        idx = (self._head + np.arange(len(states))) % self.capacity
        self._data[idx] = states
        self._head = (self._head + len(states)) % self.capacity
        self._size = min(self.capacity, self._size + len(states))

    def states(self) -> np.ndarray:
        """Contents ordered oldest to newest."""
        if self._size < self.capacity:
            return self._data[: self._size].copy()
        return np.roll(self._data, -self._head, axis=0)


# --------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, B, n)
    actions: np.ndarray  # (K+1, B, m), greedy action at every node
    values: np.ndarray  # (K+1, B)
    rewards: np.ndarray  # (K+1, B)
    xi_x: np.ndarray | None  # (K, B, n)
    xi_u: np.ndarray | None
    xi_o: np.ndarray | None
    xi_theta: np.ndarray | None
    valid_until: np.ndarray  # (B,) last node index with a valid state
    diverged: np.ndarray  # (B,)

    @property
    def batch(self) -> int:
        return self.states.shape[1]


def greedy_action(psi: ValueParams, system: SystemSpec, reward_spec: RewardSpec, x):
    """Value, value gradient, control matrix and the analytic greedy action at ``x``."""
    V, grad = value_and_gradient(psi, x)
    _, B = eval_dynamics(system, x)
    u = conjugate_policy(reward_spec, np.einsum("...ij,...i->...j", B, grad))
    return u, V, grad, B


def rollout_adversarial(
    x0,
    psi: ValueParams,
    config: SolverConfig,
    system: SystemSpec,
    reward_spec: RewardSpec,
    sets: adv.AdmissibleSets | None = None,
    rng: np.random.Generator | None = None,
    horizon: float | None = None,
    plant_theta=None,
    explore_rng: np.random.Generator | None = None,
    explore_sigma: float = 0.0,
) -> Rollout:
    """Closed-loop rollout of the greedy policy against the optimal adversary.

    ``sets=None`` skips every adversary computation. ``plant_theta`` changes
    the simulated physics while the policy keeps the nominal model. With an
    ``explore_rng`` an independent reflected Wiener noise of amplitude
    ``explore_sigma * u_max`` is added to the applied action (not to the
    recorded one).
    """
    x = np.array(x0, dtype=float, ndmin=2)
    Bn = x.shape[0]
    times = control_grid(config.T_horizon if horizon is None else horizon, config.dt_ctrl)
    K = len(times) - 1
    theta = system.theta if plant_theta is None else np.asarray(plant_theta, dtype=float)

    states = np.empty((K + 1, Bn, system.n))
    actions = np.empty((K + 1, Bn, system.m))
    values = np.empty((K + 1, Bn))
    rewards = np.empty((K + 1, Bn))
    adversarial = sets is not None
    if adversarial:
        if rng is None:
            raise ValueError("an adversarial rollout needs a generator for the Wiener modulation")
        wiener = adv.WienerState((Bn, 3), rng, config.sigma_w)
        xs = {k: np.zeros((K, Bn, d)) for k, d in (("x", system.n), ("u", system.m), ("o", system.n), ("th", system.p))}
        ax, au, ao = sets.scaled_alpha
    if explore_rng is not None:
        noise = adv.WienerState((Bn, system.m), explore_rng, config.sigma_w)
        inner = np.nextafter(system.u_max, 0.0)

    valid_until = np.full(Bn, K)
    dead = np.zeros(Bn, dtype=bool)
    for k in range(K + 1):
        u, V, grad, B = greedy_action(psi, system, reward_spec, x)
        states[k], actions[k], values[k] = x, u, V
        rewards[k] = reward(reward_spec, x, u)
        if k == K:
            break
        dt = times[k + 1] - times[k]
        u_apply = u
        if explore_rng is not None:
            w = noise.modulate(dt)
            u_apply = np.clip(u + explore_sigma * system.u_max * (2.0 * w - 1.0), -inner, inner)
        if adversarial:
            w = wiener.modulate(dt)
            xi_x = adv.state_disturbance(grad, ax * w[:, 0])
            xi_u = adv.action_disturbance(B, grad, au * w[:, 1])
            bundle = eval_jacobians(system, x, system.theta, method=config.jacobians)
            xi_o = adv.observation_disturbance(bundle, u, grad, ao * w[:, 2])
            xi_th = adv.model_disturbance(bundle, u, grad, sets)
            for key, val in (("x", xi_x), ("u", xi_u), ("o", xi_o), ("th", xi_th)):
                xs[key][k] = val
            controls = Controls(u_apply, xi_x, xi_u, xi_o, xi_th)
        else:
            controls = Controls(u_apply)
        x_next, bad = advance(system, x, controls, dt, theta)
        new_bad = bad & ~dead
        valid_until[new_bad] = k
        dead |= bad
        # frozen rows keep their last valid state so nothing non-finite propagates
        x = np.where(dead[:, None], x, x_next)

    return Rollout(
        times, states, actions, values, rewards,
        xs["x"] if adversarial else None,
        xs["u"] if adversarial else None,
        xs["o"] if adversarial else None,
        xs["th"] if adversarial else None,
        valid_until, dead,
    )


def rollout_params(psi: ValueParams, config: SolverConfig) -> ValueParams:
    """Parameters cast to the configured rollout arithmetic."""
    dt = np.dtype(config.network_dtype)
    return psi if psi.weights[0].dtype == dt else psi.astype(dt)


# --------------------------------------------------------------------------
# n-step target


def exp_interval_weights(rate: float, h) -> tuple[np.ndarray, np.ndarray]:
    """Exact weights for ``int_0^h e^{-rate s} f(s) ds`` with ``f`` linear on the interval.

    Returns ``(c0, c1)`` such that the integral equals ``c0 f(0) + c1 (f(h) - f(0))``.
    """
    h = np.asarray(h, dtype=float)
    z = rate * h
    zero = z == 0.0
    zs = np.where(zero, 1.0, z)
    c0 = np.where(zero, h, h * (-np.expm1(-zs) / zs))
    # the closed form for c1 cancels as z^2 / eps for small z; use the series there
    small = np.abs(z) < 0.1
    zb = np.where(small, 1.0, z)
    series = sum(((-z) ** k) * (k + 1) / math.factorial(k + 2) for k in range(9))
    c1 = np.where(small, h * series, h * (1.0 - np.exp(-zb) * (1.0 + zb)) / (zb * zb))
    return c0, c1


def exponential_target(times, rewards, values, rho: float, beta: float, valid_until=None) -> np.ndarray:
    """Exponentially weighted n-step target from node samples.

    ``R(t) = int_0^t e^{-rho s} r ds + e^{-rho t} V(x_t)`` and
    ``V_tar = int_0^T beta e^{-beta t} R(t) dt + e^{-beta T} R(T)``. Both
    integrals use exact exponential weights against the piecewise-linear
    interpolant of the node values. After ``valid_until`` the return is held
    at its last valid value (bootstrap at the truncation state).
    """
    t = np.asarray(times, dtype=float)
    r = np.asarray(rewards, dtype=float)
    V = np.asarray(values, dtype=float)
    if r.ndim == 1:
        r, V = r[:, None], V[:, None]
    h = np.diff(t)
    c0, c1 = exp_interval_weights(rho, h)
    disc = np.exp(-rho * t)[:, None]
    inc = disc[:-1] * (c0[:, None] * r[:-1] + c1[:, None] * (r[1:] - r[:-1]))
    cum = np.concatenate([np.zeros((1, r.shape[1])), np.cumsum(inc, axis=0)])
    R = cum + disc * V
    if valid_until is not None:
        vu = np.broadcast_to(np.asarray(valid_until), (R.shape[1],))
        idx = np.minimum(np.arange(len(t))[:, None], vu[None, :])
        R = np.take_along_axis(R, idx, axis=0)
    b0, b1 = exp_interval_weights(beta, h)
    w = beta * np.exp(-beta * t[:-1])[:, None]
    body = np.sum(w * (b0[:, None] * R[:-1] + b1[:, None] * (R[1:] - R[:-1])), axis=0)
    out = body + math.exp(-beta * (t[-1] - t[0])) * R[-1]
    return out if np.ndim(rewards) > 1 else out[0]


def n_step_target(rollout: Rollout, config: SolverConfig) -> np.ndarray:
    return exponential_target(
        rollout.times, rollout.rewards, rollout.values, config.rho, config.beta_target, rollout.valid_until
    )


def compute_targets(x, psi, config, system, reward_spec, sets, seed_key):
    """Targets for every row of ``x``; chunking is fixed so threading cannot change results."""
    x = np.asarray(x, dtype=float)
    psi = rollout_params(psi, config)
    chunks = [(i, x[i : i + config.chunk_size]) for i in range(0, len(x), config.chunk_size)]

    def job(item):
        i, xc = item
        rng = stream(config.seed, STREAM_WIENER, *seed_key, i) if sets is not None else None
        ro = rollout_adversarial(xc, psi, config, system, reward_spec, sets, rng)
        return n_step_target(ro, config), ro.diverged

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(job, chunks))
    else:
        results = [job(c) for c in chunks]
    return np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results])


# --------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: ValueParams
    history: list[dict]
    config: SolverConfig
    aborted: str | None = None


def initial_params(config: SolverConfig, system: SystemSpec) -> ValueParams:
    shape = NetworkShape(system.n, config.hidden_widths, config.ensemble_size)
    psi = init_params(
        shape,
        stream_int(config.seed, STREAM_INIT),
        x_des=system.x_des,
        wrap_mask=system.wrap_mask,
        input_scale=default_input_scale(system.wrap_mask, system.state_domain),
    )
    psi.meta = {"system": system.to_dict()}
    return psi


def _write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def _train(config, system, reward_spec, sets, psi, out_dir, evaluator, rtdp: bool) -> TrainResult:
    if sets is not None and len(sets.nu_min) != system.p:
        raise ValueError("admissible model bounds do not match the parameter dimension")
    psi = initial_params(config, system) if psi is None else psi.copy()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if evaluator is None:
        from .evaluation import evaluate

        def evaluator(p):
            return evaluate(p, system, reward_spec, config, n_rollouts=config.eval_rollouts, seed=config.seed)

    buffer = FifoBuffer(config.buffer_capacity, system.n) if rtdp else None
    history: list[dict] = []
    aborted = None
    for it in range(config.iterations):
        t0 = time.perf_counter()
        if rtdp:
            erng = stream(config.seed, STREAM_EXPLORE, it)
            x0 = system.start_state + config.start_sigma * erng.standard_normal((config.fifo_rollouts, system.n))
            x0 = wrap_angles(system, x0)
            wrng = stream(config.seed, STREAM_WIENER, it, 1 << 20) if sets is not None else None
            ro = rollout_adversarial(
                x0, rollout_params(psi, config), config, system, reward_spec, sets, wrng,
                horizon=config.explore_horizon, explore_rng=erng, explore_sigma=config.explore_sigma,
            )
            keep = np.arange(len(ro.times))[:, None] <= ro.valid_until[None, :]
            buffer.add(ro.states[keep])
            pool = buffer.states()
            drng = stream(config.seed, STREAM_DATA, it)
            take = min(config.dataset_size, len(pool))
            x = pool[np.sort(drng.choice(len(pool), size=take, replace=False))]
        else:
            x = sample_domain(system, config.dataset_size, stream(config.seed, STREAM_DATA, it))

        targets, div = compute_targets(x, psi, config, system, reward_spec, sets, (it,))
        frac = float(div.mean())
        if frac > config.abort_fraction:
            aborted = f"iteration {it}: {frac:.0%} of target rollouts diverged"
            log.warning(aborted)
            break
        fcfg = FitConfig(**{**asdict(config.fit), "seed": stream_int(config.seed, STREAM_FIT, it)})
        res = fit(psi, x, targets, fcfg)
        psi = res.params

        row = {
            "iteration": it,
            "mean_target": float(np.mean(targets[np.isfinite(targets)])),
            "fit_loss": res.loss_after,
            "eval_reward_state": float("nan"),
            "eval_reward_action": float("nan"),
            "success_rate": float("nan"),
            "n_rejected": res.n_rejected,
            "diverged_fraction": frac,
        }
        last = it == config.iterations - 1
        if config.eval_every > 0 and ((it + 1) % config.eval_every == 0 or last):
            rep = evaluator(psi)
            row.update(
                eval_reward_state=rep.median_state, eval_reward_action=rep.median_action, success_rate=rep.success_rate
            )
        row["seconds"] = time.perf_counter() - t0
        history.append(row)
        log.info(
            "it %3d  target %.3f  loss %.4g  success %s  (%.1fs)",
            it, row["mean_target"], row["fit_loss"], row["success_rate"], row["seconds"],
        )
        if out is not None:
            _write_metrics(out / "metrics.csv", history)
            if config.checkpoint_every > 0 and ((it + 1) % config.checkpoint_every == 0 or last):
                save_checkpoint(psi, out / "value.ckpt")
    if out is not None:
        _write_metrics(out / "metrics.csv", history)
        save_checkpoint(psi, out / "value.ckpt")
    return TrainResult(psi, history, config, aborted)


def dp_rfvi(config: SolverConfig, system: SystemSpec, reward_spec: RewardSpec, sets=None, psi=None, out_dir=None, evaluator=None):
    """Offline value iteration on fresh uniform draws from the state domain each iteration."""
    return _train(config, system, reward_spec, sets, psi, out_dir, evaluator, rtdp=False)


def rtdp_rfvi(config: SolverConfig, system: SystemSpec, reward_spec: RewardSpec, sets=None, psi=None, out_dir=None, evaluator=None):
    """Value iteration on states visited by exploratory rollouts, kept in a FIFO buffer."""
    return _train(config, system, reward_spec, sets, psi, out_dir, evaluator, rtdp=True)


def train(config: SolverConfig, system, reward_spec, sets=None, **kw) -> TrainResult:
    fn = rtdp_rfvi if config.mode == "rtdp" else dp_rfvi
    return fn(config, system, reward_spec, sets, **kw)


def probe_mean_value(psi: ValueParams, system: SystemSpec, count: int = 2048, seed: int = 12345) -> float:
    return float(np.mean(value_forward(psi, sample_domain(system, count, seed))))

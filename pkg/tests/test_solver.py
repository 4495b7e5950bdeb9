import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from rfvi import adversary as adv
from rfvi.dynamics import make_system
from rfvi.reward import make_reward
from rfvi.solver import (
    FifoBuffer,
    SolverConfig,
    compute_targets,
    control_grid,
    dp_rfvi,
    exp_interval_weights,
    exponential_target,
    initial_params,
    probe_mean_value,
    rollout_adversarial,
    rtdp_rfvi,
    sample_domain,
    stream,
)
from rfvi.value_net import FitConfig


def trapezoid(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def tiny_config(**kw):
    base = dict(
        iterations=2, dataset_size=64, chunk_size=32, hidden_widths=(8,), ensemble_size=2,
        beta_target=math.log(1e4) / 0.1, eval_every=0, fit=FitConfig(epochs=1, batch_size=32),
    )
    base.update(kw)
    return SolverConfig(**base)


@pytest.fixture(scope="module")
def pendulum():
    s = make_system("pendulum")
    return s, make_reward(s)


# ---------------------------------------------------------------- config


def test_horizon_and_discount():
    cfg = SolverConfig()
    assert math.exp(-cfg.beta_target * cfg.T_horizon) == pytest.approx(1e-4, rel=1e-12)
    assert cfg.T_horizon == pytest.approx(math.log(1e4) / cfg.beta_target, rel=0, abs=1e-15)
    assert 0 < cfg.gamma < 1
    assert cfg.gamma == pytest.approx(math.exp(-cfg.rho * cfg.dt_ctrl))
    with pytest.raises(ValueError):
        SolverConfig(beta_target=0.0)
    with pytest.raises(ValueError):
        SolverConfig(mode="mc")


def test_control_grid_ends_on_horizon():
    t = control_grid(0.5, 0.01)
    assert len(t) == 51 and t[-1] == 0.5
    t = control_grid(0.505, 0.01)
    assert t[-1] == 0.505 and np.all(np.diff(t) > 0)


# ---------------------------------------------------------------- target


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 0), st.floats(0.5, 100))
def test_constant_value_fixpoint(c, beta):
    t = control_grid(math.log(1e4) / beta, 0.01)
    out = exponential_target(t, np.zeros_like(t), np.full_like(t, c), 0.0, beta)
    assert abs(out - c) <= 1e-10


def test_unit_cost_matches_fine_quadrature():
    beta = 18.42
    T = math.log(1e4) / beta
    t = control_grid(T, 0.01)
    out = exponential_target(t, -np.ones_like(t), np.zeros_like(t), 0.0, beta)
    fine = np.linspace(0, T, 1_000_001)
    ref = trapezoid(beta * np.exp(-beta * fine) * -fine, fine) + math.exp(-beta * T) * -T
    assert out == pytest.approx(ref, rel=1e-6)
    assert out == pytest.approx(-(1 - math.exp(-beta * T)) / beta, rel=1e-10)


def test_discounted_target_converges_at_second_order():
    # with rho > 0 the return is curved between nodes, so the node scheme is O(dt^2)
    rho, beta, T = 1.0, 5.0, math.log(1e4) / 5.0
    c, v = -1.5, -2.0
    fine = np.linspace(0, T, 1_000_001)
    R = c * (1 - np.exp(-rho * fine)) / rho + np.exp(-rho * fine) * v
    ref = trapezoid(beta * np.exp(-beta * fine) * R, fine) + math.exp(-beta * T) * R[-1]

    def err(dt):
        t = control_grid(T, dt)
        return abs(exponential_target(t, np.full_like(t, c), np.full_like(t, v), rho, beta) - ref)

    assert err(0.01) / abs(ref) <= 1e-5
    assert err(0.02) / err(0.01) == pytest.approx(4.0, rel=0.05)


def test_large_beta_collapses_to_first_value():
    t = control_grid(0.5, 0.01)
    rng = np.random.default_rng(0)
    R = -3.0 + rng.uniform(-1, 0, len(t)) * (t > 0)
    out = exponential_target(t, np.zeros_like(t), R, 0.0, 1e6)
    # the weight lives within ~1/beta of t=0, where R is interpolated from the first two nodes
    assert abs(out - R[0]) <= abs(R[1] - R[0]) / (1e6 * 0.01) * 1.01
    assert out == pytest.approx(R[0], abs=1e-3)


def test_smooth_reward_second_order_in_step():
    rho, beta, T = 0.5, 6.0, 1.5

    def errs(dt):
        t = control_grid(T, dt)
        r = -np.sin(3 * t) ** 2
        out = exponential_target(t, r, np.zeros_like(t), rho, beta)
        fine = np.linspace(0, T, 400_001)
        inner = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(fine) * ((np.exp(-rho * fine) * -np.sin(3 * fine) ** 2)[1:] + (np.exp(-rho * fine) * -np.sin(3 * fine) ** 2)[:-1]))])
        ref = trapezoid(beta * np.exp(-beta * fine) * inner, fine) + math.exp(-beta * T) * inner[-1]
        return abs(out - ref)

    e1, e2 = errs(0.05), errs(0.025)
    assert e1 / e2 > 3.5


@pytest.mark.parametrize("rate", [0.0, 1e-7, 1e-3, 0.7, 40.0])
def test_interval_weights_exact_for_linear(rate):
    h = np.array([0.01, 0.3, 1.0])
    c0, c1 = exp_interval_weights(rate, h)
    for k, hk in enumerate(h):
        ref0 = integrate.quad(lambda u: math.exp(-rate * u), 0, hk, epsabs=0, epsrel=1e-13)[0]
        ref1 = integrate.quad(lambda u: math.exp(-rate * u) * u / hk, 0, hk, epsabs=0, epsrel=1e-13)[0]
        assert c0[k] == pytest.approx(ref0, rel=1e-11)
        assert c1[k] == pytest.approx(ref1, rel=1e-11)


def test_truncation_holds_return():
    t = control_grid(0.5, 0.01)
    r = -np.ones((len(t), 2))
    V = np.zeros((len(t), 2))
    r[30:, 1] = np.nan  # garbage after divergence must not leak
    V[30:, 1] = np.nan
    out = exponential_target(t, r, V, 0.0, 18.42, valid_until=np.array([50, 20]))
    assert np.all(np.isfinite(out))
    # the truncated row stops accumulating cost after t=0.2
    assert out[1] > out[0]


# ---------------------------------------------------------------- data


def test_sample_domain(pendulum):
    s, _ = pendulum
    x = sample_domain(s, 100_000, 3)
    lo, hi = s.state_domain[:, 0], s.state_domain[:, 1]
    assert np.all((x >= lo) & (x <= hi))
    assert np.array_equal(x, sample_domain(s, 100_000, 3))
    sigma = (hi - lo) / math.sqrt(12) / math.sqrt(len(x))
    assert np.all(np.abs(x.mean(axis=0) - 0.5 * (lo + hi)) <= 3 * sigma)
    with pytest.raises(ValueError):
        sample_domain(s, 0, 0)


def test_fifo_evicts_oldest():
    buf = FifoBuffer(5, 1)
    buf.add(np.arange(3.0))
    assert len(buf) == 3
    buf.add(np.arange(3.0, 7.0))
    assert len(buf) == 5
    assert sorted(buf.states()[:, 0]) == [2.0, 3.0, 4.0, 5.0, 6.0]
    buf.add(np.arange(10.0, 20.0))
    assert sorted(buf.states()[:, 0]) == list(np.arange(15.0, 20.0))


def test_streams_independent_and_repeatable():
    a = stream(1, 2, 3).random(4)
    assert np.array_equal(a, stream(1, 2, 3).random(4))
    assert not np.array_equal(a, stream(1, 2, 4).random(4))


# ---------------------------------------------------------------- rollouts


def test_goal_is_held_without_adversary(pendulum):
    s, rs = pendulum
    psi = initial_params(SolverConfig(hidden_widths=(8,)), s)
    ro = rollout_adversarial(np.zeros((1, 2)), psi, SolverConfig(), s, rs, None, horizon=1.0)
    assert np.max(np.abs(ro.states)) <= 1e-3
    assert np.all(ro.rewards == 0.0)


def test_zero_budget_rollout_bit_exact(pendulum):
    s, rs = pendulum
    cfg = SolverConfig(hidden_widths=(8,))
    psi = initial_params(cfg, s)
    x0 = sample_domain(s, 16, 0)
    plain = rollout_adversarial(x0, psi, cfg, s, rs, None)
    zero = rollout_adversarial(x0, psi, cfg, s, rs, adv.default_sets(s, global_scale=0.0), np.random.default_rng(0))
    assert np.array_equal(plain.states, zero.states)
    assert np.array_equal(plain.rewards, zero.rewards)
    assert np.all(zero.xi_x == 0) and np.all(zero.xi_theta == 0)


def test_adversarial_rollout_bounds(pendulum):
    s, rs = pendulum
    cfg = SolverConfig(hidden_widths=(8,))
    psi = initial_params(cfg, s)
    sets = adv.default_sets(s)
    ro = rollout_adversarial(sample_domain(s, 32, 1), psi, cfg, s, rs, sets, np.random.default_rng(1))
    ax, au, ao = sets.scaled_alpha
    assert np.all(np.abs(ro.actions) < s.u_max)
    assert np.all(np.linalg.norm(ro.xi_x, axis=-1) <= ax + 1e-12)
    assert np.all(np.linalg.norm(ro.xi_u, axis=-1) <= au + 1e-12)
    assert np.all(np.linalg.norm(ro.xi_o, axis=-1) <= ao + 1e-12)
    assert np.all((ro.xi_theta >= sets.nu_min - 1e-12) & (ro.xi_theta <= sets.nu_max + 1e-12))
    assert ro.states.shape == (len(ro.times), 32, 2) and not ro.diverged.any()
    with pytest.raises(ValueError):
        rollout_adversarial(np.zeros((1, 2)), psi, cfg, s, rs, sets, None)


def test_diverging_rollout_is_truncated_and_target_finite(pendulum):
    s, rs = pendulum
    cfg = SolverConfig(hidden_widths=(8,))
    psi = initial_params(cfg, s)
    huge = adv.AdmissibleSets(alpha_x=1e5, nu_min=np.zeros(s.p), nu_max=np.zeros(s.p))
    targets, div = compute_targets(sample_domain(s, 8, 2), psi, cfg, s, rs, huge, (0,))
    assert div.all()
    assert np.all(np.isfinite(targets))


def test_thread_count_does_not_change_targets(pendulum):
    s, rs = pendulum
    psi = initial_params(SolverConfig(hidden_widths=(8,)), s)
    x = sample_domain(s, 96, 4)
    sets = adv.default_sets(s)
    a = compute_targets(x, psi, SolverConfig(chunk_size=32, threads=1), s, rs, sets, (0,))[0]
    b = compute_targets(x, psi, SolverConfig(chunk_size=32, threads=3), s, rs, sets, (0,))[0]
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- loops


def test_dp_training_is_bit_reproducible(pendulum, tmp_path):
    s, rs = pendulum
    sets = adv.default_sets(s)
    a = dp_rfvi(tiny_config(), s, rs, sets, out_dir=tmp_path / "a")
    b = dp_rfvi(tiny_config(), s, rs, sets)
    assert all(np.array_equal(u, v) for u, v in zip(a.params.arrays(), b.params.arrays()))
    rows = list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))
    assert [int(r["iteration"]) for r in rows] == [0, 1]
    assert (tmp_path / "a" / "value.ckpt").exists()


def test_zero_scale_matches_adversary_free_path(pendulum):
    s, rs = pendulum
    a = dp_rfvi(tiny_config(), s, rs, adv.default_sets(s, global_scale=0.0))
    b = dp_rfvi(tiny_config(), s, rs, None)
    assert all(np.array_equal(u, v) for u, v in zip(a.params.arrays(), b.params.arrays()))
    assert [h["mean_target"] for h in a.history] == [h["mean_target"] for h in b.history]


def test_training_improves_mean_value(pendulum):
    s, rs = pendulum
    cfg = tiny_config(iterations=6, dataset_size=512, chunk_size=256)
    psi0 = initial_params(cfg, s)
    res = dp_rfvi(cfg, s, rs, None)
    assert probe_mean_value(res.params, s) > probe_mean_value(psi0, s)


def test_abort_on_mass_divergence(pendulum):
    s, rs = pendulum
    huge = adv.AdmissibleSets(alpha_x=1e5, nu_min=np.zeros(s.p), nu_max=np.zeros(s.p))
    res = dp_rfvi(tiny_config(), s, rs, huge)
    assert res.aborted is not None and res.history == []


def test_rtdp_runs_and_fills_buffer(pendulum):
    s, rs = pendulum
    cfg = tiny_config(mode="rtdp", fifo_rollouts=4, explore_horizon=0.5, buffer_capacity=100)
    res = rtdp_rfvi(cfg, s, rs, adv.default_sets(s, global_scale=0.5))
    assert len(res.history) == 2 and res.aborted is None


def test_mismatched_model_bounds_rejected(pendulum):
    s, rs = pendulum
    bad = adv.AdmissibleSets(nu_min=np.zeros(2), nu_max=np.zeros(2))
    with pytest.raises(ValueError):
        dp_rfvi(tiny_config(), s, rs, bad)

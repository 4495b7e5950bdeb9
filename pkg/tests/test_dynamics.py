import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfvi.dynamics import (
    SYSTEM_NAMES,
    Controls,
    DivergenceError,
    DomainError,
    ParameterError,
    advance,
    eval_dynamics,
    eval_jacobians,
    integrate_step,
    load_system,
    make_system,
    perturbed_derivative,
    wrap_angles,
)

G = 9.81


def domain_states(spec, count, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = spec.state_domain[:, 0], spec.state_domain[:, 1]
    return lo + (hi - lo) * rng.random((count, spec.n))


# ---------------------------------------------------------------- reference values


def test_pendulum_hanging_and_upright_are_equilibria():
    p = make_system("pendulum")
    a, _ = eval_dynamics(p, [math.pi, 0.0])
    assert np.allclose(a, 0.0, atol=1e-12)
    a, _ = eval_dynamics(p, [0.0, 0.0])
    assert np.array_equal(a, [0.0, 0.0])


def test_pendulum_horizontal_drift():
    a, B = eval_dynamics(make_system("pendulum"), [math.pi / 2, 0.0])
    assert a == pytest.approx([0.0, G], abs=1e-12)
    assert B[:, 0] == pytest.approx([0.0, 1.0])


def test_pendulum_linearisation_at_upright():
    J = eval_jacobians(make_system("pendulum"), np.zeros(2))
    assert np.allclose(J.da_dx, [[0.0, 1.0], [G, 0.0]])
    assert np.all(J.dB_dx == 0.0)


def test_damped_linearisation_has_damping_term():
    p = make_system("pendulum", params={"damping": 0.3, "mass": 2.0, "length": 0.5})
    J = eval_jacobians(p, np.zeros(2))
    assert J.da_dx[1, 1] == pytest.approx(-0.3 / (2.0 * 0.25))
    assert J.da_dx[1, 0] == pytest.approx(G / 0.5)


@pytest.mark.parametrize("name", SYSTEM_NAMES)
def test_every_system_finite_on_domain(name):
    s = make_system(name)
    x = domain_states(s, 500, seed=1)
    a, B = eval_dynamics(s, x)
    J = eval_jacobians(s, x[:50])
    assert a.shape == (500, s.n) and B.shape == (500, s.n, s.m)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(B))
    assert all(np.all(np.isfinite(j)) for j in J)
    assert s.dt_sim == 0.002
    assert np.array_equal(s.x_des, np.zeros(s.n))


@pytest.mark.parametrize("name", SYSTEM_NAMES)
def test_upright_is_an_equilibrium(name):
    s = make_system(name)
    a, _ = eval_dynamics(s, np.zeros(s.n))
    assert np.allclose(a, 0.0, atol=1e-12)


def test_pendulum_analytic_jacobians_match_finite_differences():
    p = make_system("pendulum", params={"damping": 0.2})
    x = domain_states(p, 200, seed=3)
    A = eval_jacobians(p, x, method="analytic")
    F = eval_jacobians(p, x, method="fd")
    for ja, jf in zip(A, F):
        scale = np.maximum(np.abs(ja), 1.0)
        assert np.max(np.abs(ja - jf) / scale) <= 1e-5


def test_fd_jacobians_first_order_taylor():
    s = make_system("cartpole")
    x = domain_states(s, 1, seed=5)[0]
    a0, _ = eval_dynamics(s, x)
    J = eval_jacobians(s, x, method="fd")
    errs = []
    for eps in (1e-3, 1e-4):
        e = []
        for i in range(s.n):
            xp = x.copy()
            xp[i] += eps
            a1, _ = eval_dynamics(s, xp)
            e.append(np.linalg.norm(a1 - a0 - eps * J.da_dx[:, i]))
        errs.append(max(e))
    # quadratic decay: a tenfold smaller step cuts the remainder ~100x
    assert errs[1] < errs[0] / 30


def test_analytic_method_rejected_for_other_systems():
    with pytest.raises(ValueError):
        eval_jacobians(make_system("furuta"), np.zeros(4), method="analytic")


# ---------------------------------------------------------------- perturbed derivative


@pytest.mark.parametrize("name", SYSTEM_NAMES)
def test_zero_disturbance_is_bit_identical_to_nominal(name):
    s = make_system(name)
    x = domain_states(s, 64, seed=7)
    u = np.random.default_rng(0).uniform(-1, 1, (64, s.m)) * s.u_max
    a, B = eval_dynamics(s, x)
    ref = a + np.einsum("...ij,...j->...i", B, u)
    assert np.array_equal(perturbed_derivative(s, x, u), ref)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.floats(-3, 3),
    st.floats(-2, 2),
)
def test_linear_in_state_and_action_disturbance(v1, v2, u, xu):
    p = make_system("pendulum")
    x = np.array([0.3, -1.2])
    v1, v2 = np.array(v1), np.array(v2)
    f12 = perturbed_derivative(p, x, [u], xi_x=v1 + v2)
    f1 = perturbed_derivative(p, x, [u], xi_x=v1)
    assert np.allclose(f12, f1 + v2, atol=1e-12)
    assert np.allclose(perturbed_derivative(p, x, [u], xi_u=[xu]), perturbed_derivative(p, x, [u + xu]), atol=1e-12)


def test_mass_perturbation_equals_reparametrised_system():
    p = make_system("pendulum")
    x, u = np.array([1.0, 0.5]), np.array([0.7])
    xi = np.zeros(p.p)
    xi[p.param_index("mass")] = 0.15 * p.theta[p.param_index("mass")]
    heavy = p.with_params(mass=1.15)
    a, B = eval_dynamics(heavy, x)
    assert np.allclose(perturbed_derivative(p, x, u, xi_theta=xi), a + B @ u, rtol=0, atol=1e-14)


def test_observation_disturbance_shifts_evaluation_point():
    p = make_system("pendulum")
    x, u, d = np.array([0.4, 0.1]), np.array([0.2]), np.array([0.05, -0.02])
    a, B = eval_dynamics(p, x + d)
    assert np.allclose(perturbed_derivative(p, x, u, xi_o=d), a + B @ u)


def test_invalid_inputs():
    p = make_system("pendulum")
    with pytest.raises(DomainError):
        eval_dynamics(p, [np.nan, 0.0])
    with pytest.raises(ParameterError):
        eval_dynamics(p, [0.0, 0.0], theta=[-1.0, 1.0, 0.0, G])
    with pytest.raises(KeyError):
        make_system("acrobot")
    with pytest.raises(ValueError):
        make_system("pendulum", u_max=[0.0])
    with pytest.raises(ValueError):
        make_system("pendulum", state_domain=[[1, -1], [-8, 8]])


# ---------------------------------------------------------------- integration


def test_energy_conserved_over_ten_seconds():
    p = make_system("pendulum")
    m, l = 1.0, 1.0

    def energy(x):
        # angle from upright: potential m g l cos(q)
        return 0.5 * m * l**2 * x[1] ** 2 + m * G * l * math.cos(x[0])

    x = np.array([2.0, 0.0])
    e0 = energy(x)
    for _ in range(100):
        x = integrate_step(p, x, Controls(np.zeros(1)), 0.1)
    assert abs(energy(x) - e0) / abs(e0) <= 1e-5


def test_rk4_is_fourth_order():
    p = make_system("pendulum")
    x0 = np.array([2.5, 1.0])
    c = Controls(np.array([0.5]))
    ref, _ = advance(p, x0, c, 0.2, max_substep=0.2 / 100)
    e1 = np.linalg.norm(advance(p, x0, c, 0.2, max_substep=0.2)[0] - ref)
    e2 = np.linalg.norm(advance(p, x0, c, 0.2, max_substep=0.1)[0] - ref)
    assert e1 / e2 >= 8.0


def test_wrap_convention():
    p = make_system("pendulum")
    assert wrap_angles(p, [math.pi + 0.1, 3.0])[0] == pytest.approx(-math.pi + 0.1)
    assert wrap_angles(p, [math.pi, 0.0])[0] == pytest.approx(math.pi)
    assert wrap_angles(p, [-math.pi, 0.0])[0] == pytest.approx(math.pi)
    # velocities are never wrapped
    assert wrap_angles(p, [0.0, 20.0])[1] == 20.0


def test_step_wraps_angle():
    p = make_system("pendulum")
    x = integrate_step(p, [math.pi - 0.01, 5.0], Controls(np.zeros(1)), 0.01)
    assert -math.pi < x[0] < 0


def test_divergence_raises():
    p = make_system("pendulum")
    with pytest.raises(DivergenceError):
        integrate_step(p, [0.0, 79.0], Controls(np.zeros(1), xi_x=np.array([0.0, 1e4])), 0.1)


def test_callable_control_law_and_bad_dt():
    p = make_system("pendulum")
    x = integrate_step(p, [0.1, 0.0], lambda x: Controls(np.array([0.0])), 0.01)
    assert np.all(np.isfinite(x))
    with pytest.raises(ValueError):
        integrate_step(p, [0.1, 0.0], Controls(np.zeros(1)), 0.0)


def test_load_system_from_json(tmp_path):
    path = tmp_path / "sys.json"
    path.write_text(json.dumps({"system": {"name": "pendulum", "params": {"mass": 2.0}, "u_max": [3.0]}}))
    s = load_system(path)
    assert s.theta[s.param_index("mass")] == 2.0 and s.u_max[0] == 3.0

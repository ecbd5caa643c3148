import math

import numpy as np
import pytest

from safe_lyapunov.experiment import discounted_lqr
from safe_lyapunov.gp import ObservationSet
from safe_lyapunov.policy import CostSpec, NeuralPolicy
from safe_lyapunov.pendulum import (
    PendulumParams,
    PendulumSystem,
    Toy1DSystem,
    observe,
    rollout,
    step_prior,
    step_true,
    true_roa_oracle,
)


def energy(p, s):
    # the upright position is the potential maximum
    return 0.5 * p.inertia * s[..., 1] ** 2 + p.mass * p.gravity * p.length * np.cos(s[..., 0])


def lqr_policy(system, bound=None):
    A, B = system.true_linearization()
    K, _ = discounted_lqr(A, B, np.eye(2), np.eye(1), 0.98)
    return NeuralPolicy.from_linear_gain(K, bound or system.action_bound, hidden=(4, 4), rng=0)


# -- ground truth -----------------------------------------------------------


def test_equilibrium_is_fixed():
    nxt, clipped = step_true(PendulumParams(), np.zeros(2), 0.0)
    np.testing.assert_array_equal(nxt, [0.0, 0.0])
    assert not clipped


def test_torque_is_clipped():
    p = PendulumParams()
    a, clipped = step_true(p, np.zeros(2), 10.0)
    b, _ = step_true(p, np.zeros(2), p.u_max)
    assert clipped
    np.testing.assert_array_equal(a, b)


def test_default_saturation_angle_is_thirty_degrees():
    assert PendulumParams().saturation_angle == pytest.approx(math.pi / 6)


def test_energy_drift_over_ten_seconds():
    p = PendulumParams(friction=0.0)
    s = np.array([2.0, 0.5])
    e0 = energy(p, s)
    for _ in range(int(round(10.0 / p.dt))):
        s, _ = step_true(p, s, 0.0)
    assert abs(energy(p, s) - e0) / abs(e0) < 1e-4


def test_small_oscillation_period():
    # small swings around the hanging position
    p = PendulumParams(friction=0.0)
    s = np.array([math.pi + 0.01, 0.0])
    expected = 2 * math.pi * math.sqrt(p.length / p.gravity)
    t, prev, crossings = 0.0, s[0] - math.pi, []
    while len(crossings) < 3:
        s, _ = step_true(p, s, 0.0)
        t += p.dt
        cur = s[0] - math.pi
        if prev < 0 <= cur or prev > 0 >= cur:
            crossings.append(t - p.dt * cur / (cur - prev))
        prev = cur
    period = crossings[2] - crossings[0]
    assert period == pytest.approx(expected, rel=0.01)


def test_falls_beyond_saturation_angle():
    p = PendulumParams()
    s = np.array([p.saturation_angle + 0.05, 0.0])
    for _ in range(300):
        s, _ = step_true(p, s, -p.u_max * np.sign(s[0]))
    assert abs(s[0]) > 1.0


def test_holds_inside_saturation_angle():
    # maximal torque can at least slow the fall just inside the limit
    p = PendulumParams()
    s = np.array([p.saturation_angle - 0.05, 0.0])
    nxt, _ = step_true(p, s, -p.u_max)
    assert nxt[0] < s[0]


def test_params_validation():
    with pytest.raises(ValueError):
        PendulumParams(mass=0.0)
    with pytest.raises(ValueError):
        PendulumParams(friction=-1.0)


# -- prior ------------------------------------------------------------------


def test_prior_fixed_point():
    np.testing.assert_array_equal(step_prior(PendulumParams(mass=0.1), np.zeros(2), 0.0), [0.0, 0.0])


def test_prior_error_is_second_order_without_mass_error():
    p = PendulumParams(friction=0.0)
    ratios = []
    for r in (0.2, 0.1, 0.05, 0.025):
        s = np.array([r, r])
        err = np.abs(step_true(p, s, 0.0)[0] - step_prior(p, s, 0.0)).sum()
        ratios.append(err / r**2)
    assert all(b <= a * 1.01 for a, b in zip(ratios, ratios[1:]))


def test_prior_error_grows_with_angle():
    p = PendulumParams()
    prior = PendulumParams(mass=0.10)
    err = lambda psi: np.abs(step_true(p, np.array([psi, 0.0]), 0.0)[0] - step_prior(prior, np.array([psi, 0.0]), 0.0)).sum()
    assert err(1.0) > 5 * err(0.1)


def test_residual_decomposition_at_zero_noise():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.5, 0.5, size=(20, 2))
    U = rng.uniform(-0.25, 0.25, size=(20, 1))
    nxt = system.step(X, U)
    prior = system.prior_mean()
    obs = ObservationSet.from_transitions(prior, np.hstack([X, U]), nxt, 1e-3)
    np.testing.assert_allclose(prior(np.hstack([X, U])) + obs.residual_targets, nxt, atol=1e-15)


# -- measurement noise ------------------------------------------------------


def test_observe_zero_noise_is_exact():
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(observe(x, 0.0, np.random.default_rng(0)), x)
    with pytest.raises(ValueError):
        observe(x, -1.0, np.random.default_rng(0))


def test_observe_is_seeded():
    x = np.zeros(2)
    a = observe(x, 0.1, np.random.default_rng(5))
    b = observe(x, 0.1, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_observe_truncated_standard_deviation():
    sigma = 0.2
    draws = observe(np.zeros(100_000), sigma, np.random.default_rng(1))
    assert np.all(np.abs(draws) <= 3 * sigma)
    # variance of a standard normal truncated to [-3, 3]
    phi = math.exp(-4.5) / math.sqrt(2 * math.pi)
    mass = math.erf(3 / math.sqrt(2))
    expected = sigma * math.sqrt(1 - 6 * phi / mass)
    assert draws.std() == pytest.approx(expected, rel=0.05)


# -- normalized systems -----------------------------------------------------


def test_normalization_round_trip():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    X = np.random.default_rng(2).uniform(-1, 1, size=(5, 2))
    np.testing.assert_allclose(system.to_normalized(system.to_physical(X)), X)
    assert system.angle_range == pytest.approx(2 * system.params.saturation_angle)


def test_normalized_step_matches_physical():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    x = np.array([[0.3, -0.4]])
    s = system.to_physical(x)[0]
    torque = 0.1 * system.torque_per_action
    for _ in range(system.substeps):
        s, _ = step_true(system.params, s, torque)
    np.testing.assert_allclose(system.step(x, [[0.1]]), system.to_normalized(s), atol=1e-14)


def test_prior_matrices_match_true_linearization_up_to_mass():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25, prior_mass=0.15, prior_friction=0.05)
    A, B = system.prior_matrices()
    At, Bt = system.true_linearization()
    np.testing.assert_allclose(A, At)
    np.testing.assert_allclose(B, Bt)


def test_toy_system():
    toy = Toy1DSystem()
    nxt, ok = toy.step([[0.5]], [[0.0]], inside_box=True)
    assert nxt[0, 0] == pytest.approx(0.5 + 0.1 * (0.5 + 0.125))
    assert ok[0]
    A, B = toy.true_linearization()
    prior = toy.prior_mean()
    assert prior.A[0, 0] == A[0, 0] and prior.B[0, 0] < B[0, 0]


# -- rollouts and oracle ----------------------------------------------------


def test_rollout_from_origin():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    states, actions, cost = rollout(system, lqr_policy(system), np.zeros(2), 20, CostSpec(np.eye(2), np.eye(1)))
    assert np.all(states == 0.0) and np.all(actions == 0.0) and cost == 0.0


def test_zero_policy_falls():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    zero = NeuralPolicy((np.zeros((1, 2)),), (np.zeros(1),), np.array([0.25]))
    x0 = system.to_normalized(np.array([0.2, 0.0]))[0]
    states, _, _ = rollout(system, zero, x0, 50, CostSpec(np.eye(2), np.eye(1)))
    assert np.max(np.abs(system.to_physical(states)[:, 0])) > system.params.saturation_angle


def test_oracle_stabilizing_policy_on_small_box():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    pol = lqr_policy(system)
    g = np.linspace(-0.1, 0.1, 9)
    X = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    assert true_roa_oracle(system, pol, X, 300).all()


def test_oracle_zero_policy_keeps_only_origin():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    zero = NeuralPolicy((np.zeros((1, 2)),), (np.zeros(1),), np.array([0.25]))
    g = np.linspace(-1, 1, 21)
    X = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    roa = true_roa_oracle(system, zero, X, 300)
    assert roa.sum() == 1 and np.all(X[roa] == 0.0)


def test_oracle_rejects_states_outside_box():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    assert not true_roa_oracle(system, lqr_policy(system), np.array([[1.5, 0.0]]), 10)[0]


def test_oracle_monotone_in_horizon():
    system = PendulumSystem(velocity_range=4.0, action_bound=0.25)
    pol = lqr_policy(system)
    g = np.linspace(-1, 1, 31)
    X = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    short = true_roa_oracle(system, pol, X, 150)
    long = true_roa_oracle(system, pol, X, 300)
    assert np.all(~short | long)
    assert short.any()

"""Inverted pendulum ground truth, its mismatched linear prior, and a 1-D toy.

Physical quantities are in SI units. The learning code works on normalized
coordinates in which the verification box is ``[-1, 1]^d`` and actions lie
in ``[-a, a]``; :class:`PendulumSystem` converts between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.stats

from .gp import LinearPriorMean

__all__ = [
    "PendulumParams",
    "step_true",
    "step_prior",
    "observe",
    "PendulumSystem",
    "Toy1DSystem",
    "rollout",
    "true_roa_oracle",
]


@dataclass(frozen=True)
class PendulumParams:
    mass: float = 0.15
    length: float = 0.5
    gravity: float = 9.81
    friction: float = 0.05
    u_max: float = float("nan")  # defaults to half the gravity torque
    dt: float = 0.02

    def __post_init__(self):
        if math.isnan(self.u_max):
            object.__setattr__(self, "u_max", 0.5 * self.mass * self.gravity * self.length)
        for name in ("mass", "length", "gravity", "u_max", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")

    @property
    def inertia(self) -> float:
        return self.mass * self.length**2

    @property
    def saturation_angle(self) -> float:
        """Angle beyond which the maximal torque cannot hold the pendulum."""
        ratio = self.u_max / (self.mass * self.gravity * self.length)
        return math.asin(min(1.0, ratio))


def _ode(p: PendulumParams, s, u):
    psi, dpsi = s[..., 0], s[..., 1]
    acc = p.gravity / p.length * np.sin(psi) - p.friction / p.inertia * dpsi + u / p.inertia
    return np.stack([dpsi, acc], axis=-1)


def _rk4(p: PendulumParams, s, u, dt):
    psi, dpsi = _rk4_split(p, s[..., 0], s[..., 1], u, dt)
    return np.stack([psi, dpsi], axis=-1)


def _rk4_split(p: PendulumParams, psi, dpsi, u, dt):
    """RK4 step on separate angle and rate arrays (same arithmetic as ``_ode``).

    Written with in-place updates; the operation order matches the textbook
    form, so results equal the straightforward expression bit for bit.
    """
    g = p.gravity / p.length
    fr = p.friction / p.inertia
    b = u / p.inertia
    h = 0.5 * dt

    def acc(a, w):
        out = np.sin(a)
        out *= g
        out -= fr * w
        out += b
        return out

    def shift(x, k, c):
        y = c * k
        y += x
        return y

    k1a, k1w = dpsi, acc(psi, dpsi)
    k2a = shift(dpsi, k1w, h)
    k2w = acc(shift(psi, k1a, h), k2a)
    k3a = shift(dpsi, k2w, h)
    k3w = acc(shift(psi, k2a, h), k3a)
    k4a = shift(dpsi, k3w, dt)
    k4w = acc(shift(psi, k3a, dt), k4a)

    def combine(x, k1, k2, k3, k4):
        s = 2.0 * k2
        s += k1
        s += 2.0 * k3
        s += k4
        s *= dt / 6.0
        s += x
        return s

    return combine(psi, k1a, k2a, k3a, k4a), combine(dpsi, k1w, k2w, k3w, k4w)


def step_true(params: PendulumParams, state, u):
    """One RK4 step of length ``params.dt`` under constant torque.

    Torques beyond ``u_max`` are clipped; returns ``(next_state, clipped)``.
    Works on batches of shape ``(n, 2)`` with torques of shape ``(n,)``.
    """
    s = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    uc = np.clip(u, -params.u_max, params.u_max)
    clipped = bool(np.any(uc != u))
    return _rk4(params, s, uc.reshape(s.shape[:-1]), params.dt), clipped


def linearized_discrete(params: PendulumParams, period: float):
    """Zero-order-hold discretization of the linearization at the origin."""
    A = np.array([[0.0, 1.0], [params.gravity / params.length, -params.friction / params.inertia]])
    B = np.array([[0.0], [1.0 / params.inertia]])
    M = np.zeros((3, 3))
    M[:2, :2] = A
    M[:2, 2:] = B
    E = scipy.linalg.expm(M * period)
    return E[:2, :2], E[:2, 2:]


def step_prior(prior_params: PendulumParams, state, u):
    """Linear ZOH prior model over ``prior_params.dt``."""
    Ad, Bd = linearized_discrete(prior_params, prior_params.dt)
    s = np.atleast_2d(np.asarray(state, dtype=float))
    u = np.asarray(u, dtype=float).reshape(-1, 1)
    out = s @ Ad.T + u @ Bd.T
    return out[0] if np.ndim(state) == 1 else out


def observe(true_next, noise_sigma: float, rng):
    """Add independent Gaussian noise truncated at three standard deviations."""
    x = np.asarray(true_next, dtype=float)
    if noise_sigma == 0:
        return x.copy()
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    z = scipy.stats.truncnorm.rvs(-3.0, 3.0, size=x.shape, random_state=rng)
    return x + noise_sigma * z


@dataclass(frozen=True, eq=False)
class PendulumSystem:
    """Pendulum in normalized coordinates.

    ``x = (psi / psi_range, psi_dot / velocity_range)`` and the normalized
    action ``a`` maps to torque ``a * u_max / action_bound``. One control
    step holds the torque for ``substeps`` integrator steps.
    """

    params: PendulumParams = field(default_factory=PendulumParams)
    prior_mass: float = 0.10
    prior_friction: float = 0.0
    substeps: int = 5
    angle_range: float = float("nan")  # defaults to twice the saturation angle
    velocity_range: float = 2.0
    action_bound: float = 1.0

    def __post_init__(self):
        if math.isnan(self.angle_range):
            object.__setattr__(self, "angle_range", 2.0 * self.params.saturation_angle)
        if self.substeps < 1 or not self.action_bound > 0 or not self.velocity_range > 0:
            raise ValueError("invalid pendulum normalization")

    state_dim = 2
    action_dim = 1

    @property
    def period(self) -> float:
        return self.substeps * self.params.dt

    @property
    def scale(self) -> np.ndarray:
        return np.array([self.angle_range, self.velocity_range])

    @property
    def torque_per_action(self) -> float:
        return self.params.u_max / self.action_bound

    def to_physical(self, X):
        return np.atleast_2d(X) * self.scale

    def to_normalized(self, S):
        return np.atleast_2d(S) / self.scale

    def _prior_params(self) -> PendulumParams:
        return PendulumParams(
            mass=self.prior_mass,
            length=self.params.length,
            gravity=self.params.gravity,
            friction=self.prior_friction,
            u_max=self.params.u_max,
            dt=self.period,
        )

    def prior_matrices(self, params: PendulumParams = None):
        p = self._prior_params() if params is None else params
        Ad, Bd = linearized_discrete(p, self.period)
        T = np.diag(self.scale)
        Ti = np.diag(1.0 / self.scale)
        return Ti @ Ad @ T, Ti @ Bd * self.torque_per_action

    def prior_mean(self) -> LinearPriorMean:
        A, B = self.prior_matrices()
        return LinearPriorMean(A, B)

    def true_linearization(self):
        p = PendulumParams(**{**self.params.__dict__, "dt": self.period})
        return self.prior_matrices(p)

    def step(self, X, U, inside_box=False):
        """True normalized transition; with ``inside_box`` also reports whether
        every integrator substep stayed within ``[-1, 1]^2``."""
        S = self.to_physical(X)
        torque = np.clip(np.asarray(U, dtype=float).reshape(-1), -self.action_bound, self.action_bound)
        torque = torque * self.torque_per_action
        ok = np.ones(len(S), dtype=bool)
        psi, dpsi = S[:, 0], S[:, 1]
        s0, s1 = self.scale
        for _ in range(self.substeps):
            psi, dpsi = _rk4_split(self.params, psi, dpsi, torque, self.params.dt)
            if inside_box:
                ok &= (np.abs(psi) <= s0) & (np.abs(dpsi) <= s1)
        nxt = self.to_normalized(np.stack([psi, dpsi], axis=1))
        return (nxt, ok) if inside_box else nxt


@dataclass(frozen=True, eq=False)
class Toy1DSystem:
    """Scalar system that is linear near the origin but unstable far out.

    ``x+ = x + h (x + c x^3 + b u)`` with ``|u| <= action_bound``. The prior
    keeps only the linear part with a wrong input gain, so the error grows
    with the state.
    """

    h: float = 0.1
    cubic: float = 1.0
    gain: float = 1.0
    prior_gain: float = 0.8
    action_bound: float = 1.0

    state_dim = 1
    action_dim = 1

    def step(self, X, U, inside_box=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.clip(np.asarray(U, dtype=float).reshape(-1, 1), -self.action_bound, self.action_bound)
        nxt = X + self.h * (X + self.cubic * X**3 + self.gain * U)
        if inside_box:
            return nxt, np.all(np.abs(nxt) <= 1.0, axis=1)
        return nxt

    def prior_mean(self) -> LinearPriorMean:
        return LinearPriorMean(np.array([[1.0 + self.h]]), np.array([[self.h * self.prior_gain]]))

    def true_linearization(self):
        return np.array([[1.0 + self.h]]), np.array([[self.h * self.gain]])


def rollout(system, policy, x0, steps: int, cost):
    """Closed-loop trajectory under the true dynamics.

    Returns ``(states, actions, discounted_cost)`` with ``steps + 1`` states.
    """
    if steps < 1:
        raise ValueError("steps must be at least one")
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    states, actions = [x[0]], []
    total = 0.0
    for t in range(steps):
        u = np.atleast_2d(policy(x)).reshape(1, -1)
        total += cost.gamma**t * float(cost(x, u)[0])
        x = system.step(x, u)
        states.append(x[0])
        actions.append(u[0])
    return np.array(states), np.array(actions), total


def true_roa_oracle(system, policy, states, horizon_steps: int, ball_radius: float = 1e-2, batch=20000):
    """Simulate every state; True where the trajectory never leaves the box
    and ends within ``ball_radius`` (Euclidean, normalized) of the origin."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    result = np.zeros(len(states), dtype=bool)
    for start in range(0, len(states), batch):
        x = states[start : start + batch].copy()
        live = np.flatnonzero(np.all(np.abs(x) <= 1.0, axis=1))
        x = x[live]
        for _ in range(int(horizon_steps)):
            if not len(live):
                break
            u = np.atleast_2d(policy(x)).reshape(len(x), -1)
            x, inside = system.step(x, u, inside_box=True)
            live, x = live[inside], x[inside]  # drop failed runs
        result[start + live] = np.linalg.norm(x, axis=1) <= ball_radius
    return result

"""Safe learning loop, standalone verification and the baseline suite.

Every run writes its artifacts under ``run.output_dir``:

``runlog.csv``          one row per iteration (deterministic)
``timing.csv``          wall-clock seconds per iteration (not deterministic)
``certificates/``       certified level sets every ``certificate_every`` iterations
``safe_set_final.csv``  the last safe set ``S_n`` with its intervals
``observations.csv``    measured transitions
``trajectory_*.csv``    closed-loop rollouts of the prior and learned policies
``policy_*.txt``        policy checkpoints; ``lyapunov_value.csv`` for ``v``
``summary.json``        headline numbers
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from . import baseline as bl
from .config import ExperimentConfig, dump_config
from .gp import (
    FixedBeta,
    Linear,
    Matern32,
    ObservationSet,
    TheoreticalBeta,
    beta as beta_value,
    fit_posterior,
    info_capacity_greedy,
)
from .lyapunov import (
    POLICY_ACTION,
    CalibrationWarning,
    ConfidenceTable,
    LevelResult,
    QuadraticLyapunov,
    ValueLyapunov,
    build_grid,
    decrease_mask,
    largest_level_lazy,
    write_certificate_csv,
    write_columns,
)
from .pendulum import PendulumParams, PendulumSystem, Toy1DSystem, observe, rollout, true_roa_oracle
from .policy import (
    CostSpec,
    NeuralPolicy,
    PiecewiseLinearValue,
    adp_solve,
    lagrangian_gradient,
    load_policy,
    policy_lipschitz_bound,
    save_policy,
    save_value,
    sgd_update,
)
from .safe_sets import (
    ActionGrid,
    NoSafeSampleError,
    PairSet,
    dec_set_direct,
    restrict_actions,
    safe_set_direct,
    select_sample,
)

__all__ = [
    "Setup",
    "build_setup",
    "RunResult",
    "run_experiment",
    "verify_only",
    "baseline_suite",
    "RUNLOG_COLUMNS",
]

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = [
    "n",
    "c_n",
    "certified_cells",
    "safe_pairs",
    "decrease_pairs",
    "sample_state",
    "sample_action",
    "sample_x",
    "sample_u",
    "sample_in_level",
    "width",
    "successor_v",
    "violations",
    "backup_steps",
    "backup_ok",
    "policy_updated",
    "policy_reverted",
    "lipschitz_pi",
    "beta",
    "oracle_failures",
    "property_failures",
    "calibration_warnings",
    "note",
]


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------


def make_system(cfg: ExperimentConfig):
    if cfg.run.environment == "toy_1d":
        t = cfg.toy_1d
        return Toy1DSystem(h=t.h, cubic=t.cubic, gain=t.gain, prior_gain=t.prior_gain, action_bound=t.action_bound)
    p = cfg.pendulum
    params = PendulumParams(
        mass=p.mass, length=p.length, gravity=p.gravity, friction=p.friction, u_max=p.u_max, dt=p.dt
    )
    return PendulumSystem(
        params=params,
        prior_mass=p.prior_mass,
        prior_friction=p.prior_friction,
        substeps=p.substeps,
        angle_range=p.angle_range,
        velocity_range=p.velocity_range,
        action_bound=p.action_bound,
    )


def discounted_lqr(A, B, Q, R, gamma):
    """Gain ``K`` (``u = -K x``) and cost matrix for the discounted LQR problem."""
    sg = math.sqrt(gamma)
    P = scipy.linalg.solve_discrete_are(sg * A, sg * B, Q, R / gamma)
    K = np.linalg.solve(R + gamma * B.T @ P @ B, gamma * B.T @ P @ A)
    return K, P


def estimate_model_error_lipschitz(system, prior, samples=20000, step=1e-6):
    """Finite-difference estimate of the 1-norm Lipschitz constant of ``f - h``.

    Uses a fixed sample of the state-action box, so the value does not
    depend on the run seed. This is an estimate, not a bound.
    """
    rng = np.random.default_rng(12345)
    d = system.state_dim
    ab = system.action_bound
    A = np.hstack([rng.uniform(-1, 1, (samples, d)), rng.uniform(-ab, ab, (samples, system.action_dim))])

    def g(a):
        return system.step(a[:, :d], a[:, d:]) - prior(a)

    cols = []
    for j in range(A.shape[1]):
        e = np.zeros(A.shape[1])
        e[j] = step
        cols.append(np.abs((g(A + e) - g(A - e)) / (2 * step)).sum(axis=1))
    return float(np.max(cols))


def _zero_output_at_origin(policy: NeuralPolicy) -> NeuralPolicy:
    """Shift the output bias so that ``pi(0) = 0`` exactly (for the
    pre-activation; the saturation is odd)."""
    x0 = np.zeros((1, policy.state_dim))
    z0 = policy._forward(x0)[2][-1][0]
    biases = list(policy.biases)
    biases[-1] = biases[-1] - z0
    return NeuralPolicy(policy.weights, tuple(biases), policy.action_bound)


def _project_lipschitz(policy: NeuralPolicy, cap: float) -> NeuralPolicy:
    """Scale the output layer so that the Lipschitz bound is at most ``cap``."""
    L = policy_lipschitz_bound(policy)
    if L <= cap:
        return policy
    W = list(policy.weights)
    W[-1] = W[-1] * (cap / L)
    return _zero_output_at_origin(NeuralPolicy(tuple(W), policy.biases, policy.action_bound))


@dataclass(eq=False)
class Setup:
    """Everything that is fixed for the duration of a run."""

    cfg: ExperimentConfig
    system: object
    prior: object
    kernel: object
    cost: CostSpec
    grid: object
    points: np.ndarray
    actions: ActionGrid
    policy0: NeuralPolicy
    lyap: object
    value_grid: object
    v_all: np.ndarray
    order: np.ndarray
    v_sorted: np.ndarray
    L_v: np.ndarray
    L_h: float
    L_g: float
    L_pi_cap: float
    l_dv_tau: np.ndarray
    s0_states: np.ndarray
    s0_level: float
    s0_pairs: PairSet
    horizon_steps: int
    lyapunov_values: Optional[PiecewiseLinearValue] = None

    @property
    def L_f(self) -> float:
        return self.L_h + self.L_g

    @property
    def state_dim(self) -> int:
        return self.points.shape[1]

    def s0_window(self, states) -> np.ndarray:
        """Half-width of the policy window around ``pi_0``, ``tol * max(||x||_1, r0 / 2)``."""
        X = self.points[np.asarray(states, dtype=int)]
        floor = 0.5 * self.cfg.lyapunov.s0_radius
        return self.cfg.lyapunov.s0_policy_tol * np.maximum(np.abs(X).sum(axis=1), floor)

    def s0_policy_mask(self, states, U) -> np.ndarray:
        """States of ``S_0^x`` whose action lies within the policy window."""
        states = np.asarray(states, dtype=int)
        U0 = self.policy0(self.points[states]).reshape(len(states), -1)
        dev = np.abs(np.asarray(U).reshape(U0.shape) - U0).max(axis=1)
        return self.s0_states[states] & (dev <= self.s0_window(states) + 1e-12)


def build_setup(cfg: ExperimentConfig, lipschitz_cap: Optional[float] = None) -> Setup:
    system = make_system(cfg)
    prior = system.prior_mean()
    d = system.state_dim
    k = cfg.kernel
    kernel = Linear(np.asarray(k.linear_variances, float)) + Matern32(
        np.asarray(k.matern_lengthscales, float), k.matern_variance
    )
    cost = CostSpec(np.diag(cfg.cost.q_diag), np.diag(cfg.cost.r_diag), cfg.cost.gamma, cfg.cost.lagrange)
    K0, P0 = discounted_lqr(prior.A, prior.B, cost.Q, cost.R, cost.gamma)
    ab = system.action_bound
    seeds = np.random.SeedSequence(cfg.run.seed).spawn(4)
    policy0 = NeuralPolicy.from_linear_gain(
        K0, ab, hidden=tuple(cfg.policy.hidden), rng=np.random.default_rng(seeds[0]), noise=cfg.policy.init_noise
    )
    policy0 = _zero_output_at_origin(policy0)

    bounds = [(-1.0, 1.0)] * d
    value_grid = build_grid(bounds, cfg.grid.value_cells_per_axis)
    values = None
    if cfg.lyapunov.candidate == "value":
        V, _ = adp_solve(PiecewiseLinearValue(value_grid), policy0, prior, cost, tol=cfg.lyapunov.adp_tol)
        values = V.with_values(V.values - V.values[value_grid.origin_index()])
        lyap = ValueLyapunov(values)
    else:
        lyap = QuadraticLyapunov(P0)

    grid = build_grid(bounds, cfg.grid.cells_per_axis)
    points = grid.all_points()
    v_all = lyap(points)
    order = np.argsort(v_all, kind="stable")
    L_v = lyap.local_lipschitz(grid)
    if not cfg.lyapunov.local_lipschitz:
        L_v = np.full_like(L_v, L_v.max())
    L_h = prior.lipschitz()
    L_g = cfg.lyapunov.model_error_lipschitz
    if math.isnan(L_g):
        L_g = 1.1 * estimate_model_error_lipschitz(system, prior)
    cap = cfg.policy.lipschitz_cap if lipschitz_cap is None else float(lipschitz_cap)
    L_pi0 = policy_lipschitz_bound(policy0)
    if L_pi0 > cap:
        raise ValueError(f"initial policy Lipschitz bound {L_pi0:.4g} exceeds the cap {cap:.4g}")
    l_dv_tau = (L_v * (L_h + L_g) * (cap + 1.0) + L_v) * grid.tau

    outside = np.max(np.abs(points), axis=1) >= cfg.lyapunov.s0_radius
    s0_level = float(v_all[outside].min()) if np.any(outside) else float(v_all.max())
    s0_states = v_all < s0_level
    s0_level = float(v_all[s0_states].max())
    actions = ActionGrid.uniform(-ab, ab, cfg.actions.count)
    s0_idx = np.flatnonzero(s0_states)
    P0 = policy0(points[s0_idx]).reshape(len(s0_idx), -1)
    window = cfg.lyapunov.s0_action_tol * np.abs(points[s0_idx]).sum(axis=1)
    dev = np.abs(actions.actions[None, :, :] - P0[:, None, :]).max(axis=2)
    mask = dev <= window[:, None] + 1e-12
    mask[np.arange(len(s0_idx)), np.argmin(dev, axis=1)] = True
    si, ai = np.nonzero(mask)
    s0_pairs = PairSet(s0_idx[si], ai, len(actions))
    period = system.period if hasattr(system, "period") else 1.0
    horizon = int(round(cfg.run.oracle_horizon / period))
    return Setup(
        cfg=cfg,
        system=system,
        prior=prior,
        kernel=kernel,
        cost=cost,
        grid=grid,
        points=points,
        actions=actions,
        policy0=policy0,
        lyap=lyap,
        value_grid=value_grid,
        v_all=v_all,
        order=order,
        v_sorted=v_all[order],
        L_v=L_v,
        L_h=L_h,
        L_g=float(L_g),
        L_pi_cap=cap,
        l_dv_tau=l_dv_tau,
        s0_states=s0_states,
        s0_level=s0_level,
        s0_pairs=s0_pairs,
        horizon_steps=horizon,
        lyapunov_values=values,
    )


# ---------------------------------------------------------------------------
# confidence intervals and certification
# ---------------------------------------------------------------------------


def model_bounds(setup: Setup, model, beta: float, X, U):
    """Interval on ``v(f(x, u))`` from the model.

    ``L_v`` is bounded over the box ``mu +- beta sigma`` that contains the
    true successor under the calibration assumption. Successor boxes that
    leave the verification domain get the uninformative interval.
    """
    a = np.hstack([np.atleast_2d(X), np.atleast_2d(U)])
    if len(a) > 8192:  # blockwise for cache locality
        parts = [model_bounds(setup, model, beta, a[i : i + 8192, : X.shape[1]], a[i : i + 8192, X.shape[1] :])
                 for i in range(0, len(a), 8192)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    mean, sig_sum, per_dim = model.predict(a)
    half = beta * per_dim
    L = setup.lyap.box_lipschitz(mean, half)
    centre = setup.lyap(mean)
    lo = centre - L * beta * sig_sum
    up = centre + L * beta * sig_sum
    escape = np.any(np.abs(mean) + half > 1.0, axis=1)
    lo[escape] = -np.inf
    up[escape] = np.inf
    return lo, up


def _intersect(table: ConfidenceTable, rows, lo, up, counter: list) -> None:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CalibrationWarning)
        table.intersect(rows, lo, up)
    for w in caught:
        if issubclass(w.category, CalibrationWarning):
            counter[0] += 1
            log.warning("%s", w.message)


def certify(setup: Setup, policy, table: ConfidenceTable, model, beta: float, warn_counter: list) -> LevelResult:
    """Largest certified level of ``v`` for ``policy``; rows live in ``table``.

    The initial policy inherits the initial safe set as given. Any other
    policy only inherits a state of ``S_0^x`` if its action stays in the
    policy window around ``pi_0`` and the model certifies that the successor stays
    inside ``S_0^x`` (with the discretization margin).
    """
    initial = policy is setup.policy0

    def check(start, stop):
        s = setup.order[start:stop]
        X = setup.points[s]
        U = policy(X).reshape(len(s), -1)
        lo, up = model_bounds(setup, model, beta, X, U)
        s0 = setup.s0_policy_mask(s, U)
        if not initial:
            s0 &= up + setup.l_dv_tau[s] <= setup.s0_level
        rows = table.track(s, POLICY_ACTION, U, s0, setup.v_all[s], setup.l_dv_tau[s])
        _intersect(table, rows, lo, up, warn_counter)
        return decrease_mask(table.upper[rows], setup.v_all[s], setup.l_dv_tau[s])

    return largest_level_lazy(setup.v_sorted, check)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RunResult:
    rows: list
    summary: dict
    policy: NeuralPolicy
    model: object
    setup: Setup
    certified_history: list = field(default_factory=list)


def _fmt(x) -> str:
    if isinstance(x, float):  # includes numpy float64
        x = float(x)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(round(x, 12))
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    if isinstance(x, (list, tuple, np.ndarray)):
        return " ".join(_fmt(float(v)) for v in np.ravel(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(round(x, 12))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _beta(setup: Setup, model, rng_info) -> float:
    b = setup.cfg.beta
    if b.mode == "fixed":
        return beta_value(FixedBeta(b.value))
    n = model.num_data
    if n == 0:
        gamma_n = 0.0
    else:
        d = setup.state_dim
        ab = setup.system.action_bound
        C = np.hstack([rng_info.uniform(-1, 1, (b.info_candidates, d)), rng_info.uniform(-ab, ab, (b.info_candidates, 1))])
        gamma_n = info_capacity_greedy(setup.kernel, C, min(n * model.output_dim, len(C)), model.noise_sigma)
    return beta_value(TheoreticalBeta(b.rkhs_bound, b.delta), gamma_n, model.noise_sigma)


class _Learner:
    def __init__(self, setup: Setup, out: Optional[Path]):
        cfg = setup.cfg
        self.setup = setup
        self.cfg = cfg
        self.out = out
        seeds = np.random.SeedSequence(cfg.run.seed).spawn(4)
        self.rng_noise = np.random.default_rng(seeds[1])
        self.rng_sgd = np.random.default_rng(seeds[2])
        self.rng_info = np.random.default_rng(seeds[3])
        d = setup.state_dim
        obs = ObservationSet.empty(d + 1, d, cfg.kernel.noise_sigma)
        self.model = fit_posterior(setup.prior, setup.kernel, obs)
        self.policy = setup.policy0
        self.warnings = [0]
        self.violations = 0
        self.oracle_failures = 0
        self.property_failures = 0
        self.beta = _beta(setup, self.model, self.rng_info)
        self.J = PiecewiseLinearValue(setup.value_grid)
        self.exp_table = ConfidenceTable(1)
        s0 = setup.s0_pairs
        st = s0.states
        self.exp_table.track(st, s0.actions, setup.actions.actions[s0.actions], True, setup.v_all[st], setup.l_dv_tau[st])
        self.pol_table = ConfidenceTable(1)
        self.level = certify(setup, self.policy, self.pol_table, self.model, self.beta, self.warnings)
        self.verified = np.zeros(setup.grid.num_points, dtype=bool)
        self.S_prev = None
        self.D_prev = None

    # -- soundness ------------------------------------------------------
    def check_soundness(self) -> int:
        if not self.cfg.run.check_soundness:
            return 0
        s = self.setup
        cert = s.order[: self.level.count]
        new = cert[~self.verified[cert]]
        if new.size == 0:
            return 0
        ok = true_roa_oracle(s.system, self.policy, s.points[new], s.horizon_steps, s.cfg.run.ball_radius)
        self.verified[new] = True
        bad = int(np.sum(~ok))
        if bad:
            log.error("%d certified states are outside the true region of attraction", bad)
        return bad

    # -- policy optimization -----------------------------------------------
    def improve_policy(self):
        s = self.setup
        p = self.cfg.policy
        if p.sgd_steps == 0:
            return False, False
        model = self.model

        def mean_fn(a):
            return model.predict(a)[0]

        self.J, _ = adp_solve(self.J, self.policy, mean_fn, s.cost, tol=1e-6, max_sweeps=2000)
        c = self.level.c if not self.level.empty else s.s0_level
        pool = int(np.searchsorted(s.v_sorted, p.level_factor * c, side="right"))
        pool = max(pool, 1)
        cand = self.policy
        for _ in range(p.sgd_steps):
            idx = s.order[self.rng_sgd.integers(0, pool, size=p.batch_size)]
            X = s.points[idx]
            _, grad = lagrangian_gradient(
                cand, self.J, s.lyap, model, X, s.cost, s.l_dv_tau[idx], self.beta, s.L_v[idx]
            )
            cand, skipped = sgd_update(cand, grad / p.batch_size, p.learning_rate)
            if skipped:
                break
            cand = _project_lipschitz(_zero_output_at_origin(cand), s.L_pi_cap)
        table = ConfidenceTable(1)
        level = certify(s, cand, table, model, self.beta, self.warnings)
        if level.c >= self.level.c and not level.empty:
            self.policy = cand
            self.pol_table = table
            self.level = level
            self.verified[:] = False
            return True, False
        return False, True

    # -- safe sets ---------------------------------------------------------
    def update_sets(self, generation: int):
        s = self.setup
        c = self.level.c if not self.level.empty else s.s0_level
        inV = s.order[: int(np.searchsorted(s.v_sorted, c, side="right"))]
        if inV.size:
            P = self.policy(s.points[inV]).reshape(len(inV), -1)
            mask, _ = restrict_actions(s.actions, P, self.cfg.actions.u_bar)
            si, ai = np.nonzero(mask)
            st = inV[si]
            self.exp_table.track(st, ai, s.actions.actions[ai])
        t = self.exp_table
        before_lo, before_up = t.lower.copy(), t.upper.copy()
        rows = np.arange(len(t))
        lo, up = model_bounds(s, self.model, self.beta, s.points[t.states], t.actions)
        _intersect(t, rows, lo, up, self.warnings)
        nested = np.all(t.lower >= before_lo) and np.all(t.upper <= before_up)
        m = len(s.actions)
        D = dec_set_direct(t, s.v_all, s.l_dv_tau / s.grid.tau, s.grid.tau, m, generation)
        S = safe_set_direct(c, t, s.v_all, s.s0_pairs, generation)
        fails = 0 if nested else 1
        if self.D_prev is None:
            fails += 0 if s.s0_pairs.issubset(D) else 1
        else:
            fails += 0 if self.D_prev.issubset(D) else 1
            fails += 0 if self.S_prev.issubset(S) else 1
        self.property_failures += fails
        self.S_prev, self.D_prev = S, D
        return S, D, c

    # -- measurement -------------------------------------------------------
    def measure(self, pair, c):
        s = self.setup
        x = s.points[pair[0]][None, :]
        u = s.actions.actions[pair[1]][None, :]
        nxt = s.system.step(x, u)
        v_next = float(s.lyap(nxt)[0])
        inside = bool(np.all(np.abs(nxt) <= 1.0))
        if v_next > c or not inside:
            self.violations += 1
            log.error("safety violation: successor value %.6g exceeds level %.6g", v_next, c)
        # backup: the certified policy drives the successor back inside
        steps, ok, z = 0, True, nxt
        for _ in range(self.cfg.run.backup_steps):
            if float(s.lyap(z)[0]) <= 0.5 * c:
                break
            z = s.system.step(z, self.policy(z).reshape(1, -1))
            steps += 1
            ok &= bool(float(s.lyap(z)[0]) <= c and np.all(np.abs(z) <= 1.0))
        y = observe(nxt, self.cfg.kernel.noise_sigma, self.rng_noise)
        self.model = self.model.add_observation(np.hstack([x, u]), y)
        return nxt[0], v_next, steps, ok


def run_experiment(cfg: ExperimentConfig, output_dir=None, write=True) -> RunResult:
    """Run the safe learning loop; see the module docstring for artifacts."""
    out = Path(output_dir if output_dir is not None else cfg.run.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "certificates").mkdir(exist_ok=True)
        dump_config(cfg, out / "config.toml")
    setup = build_setup(cfg)
    lr = _Learner(setup, out)
    rows, timing, history = [], [], []
    t0 = time.perf_counter()
    lr.oracle_failures += lr.check_soundness()
    S, D, c = lr.update_sets(0)
    initial_cells = lr.level.count
    history.append(initial_cells)
    rows.append(_row(lr, 0, c, S, D, note="initial certificate"))
    timing.append((0, time.perf_counter() - t0))
    if write:
        _write_certificate(lr, out, 0)
    for n in range(1, cfg.run.iterations + 1):
        t0 = time.perf_counter()
        updated = reverted = False
        lr.beta = _beta(setup, lr.model, lr.rng_info)
        if n % cfg.policy.update_every == 0:
            updated, reverted = lr.improve_policy()
        if not updated:
            # refresh the certificate with the current model
            level = certify(setup, lr.policy, lr.pol_table, lr.model, lr.beta, lr.warnings)
            if level.c >= lr.level.c:
                lr.level = level
        lr.oracle_failures += lr.check_soundness()
        S, D, c = lr.update_sets(n)
        try:
            pair, width = select_sample(S, lr.exp_table)
        except NoSafeSampleError:
            rows.append(_row(lr, n, c, S, D, updated=updated, reverted=reverted, note="no safe sample"))
            break
        in_level = bool(setup.v_all[pair[0]] <= c)
        _, v_next, steps, ok = lr.measure(pair, c)
        history.append(lr.level.count)
        rows.append(
            _row(
                lr, n, c, S, D, pair=pair, width=width, in_level=in_level, v_next=v_next,
                backup=(steps, ok), updated=updated, reverted=reverted,
            )
        )
        timing.append((n, time.perf_counter() - t0))
        if write and (n % cfg.run.certificate_every == 0 or n == cfg.run.iterations):
            _write_certificate(lr, out, n)

    summary = _summarize(lr, initial_cells)
    if write:
        _write_csv(out / "runlog.csv", RUNLOG_COLUMNS, [[r[k] for k in RUNLOG_COLUMNS] for r in rows])
        _write_csv(out / "timing.csv", ["n", "seconds"], timing)
        _write_artifacts(lr, out, S, summary)
    if lr.warnings[0]:
        log.warning("%d calibration warning(s) during the run", lr.warnings[0])
    return RunResult(rows, summary, lr.policy, lr.model, setup, history)


def _row(lr: _Learner, n, c, S, D, pair=None, width=None, in_level=None, v_next=None, backup=None,
         updated=False, reverted=False, note=""):
    s = lr.setup
    return {
        "n": n,
        "c_n": c,
        "certified_cells": lr.level.count,
        "safe_pairs": len(S),
        "decrease_pairs": len(D),
        "sample_state": None if pair is None else pair[0],
        "sample_action": None if pair is None else pair[1],
        "sample_x": None if pair is None else s.points[pair[0]],
        "sample_u": None if pair is None else s.actions.actions[pair[1]],
        "sample_in_level": in_level,
        "width": width,
        "successor_v": v_next,
        "violations": lr.violations,
        "backup_steps": None if backup is None else backup[0],
        "backup_ok": None if backup is None else backup[1],
        "policy_updated": updated,
        "policy_reverted": reverted,
        "lipschitz_pi": policy_lipschitz_bound(lr.policy),
        "beta": lr.beta,
        "oracle_failures": lr.oracle_failures,
        "property_failures": lr.property_failures,
        "calibration_warnings": lr.warnings[0],
        "note": note,
    }


def _write_certificate(lr: _Learner, out: Path, n: int) -> None:
    s = lr.setup
    t = lr.pol_table
    rows = np.flatnonzero(t.action_ids == POLICY_ACTION)
    st = t.states[rows]
    in_level = s.v_all[st] <= (lr.level.c if not lr.level.empty else -np.inf)
    write_certificate_csv(
        out / "certificates" / f"certificate_{n:03d}.csv",
        s.grid, s.v_all[st], t.lower[rows], t.upper[rows], in_level, indices=st,
    )


def _rollout_costs(setup: Setup, policy):
    cfg = setup.cfg
    x0 = np.asarray(cfg.run.rollout_start, dtype=float)
    learned = rollout(setup.system, policy, x0, cfg.run.rollout_steps, setup.cost)
    prior = rollout(setup.system, setup.policy0, x0, cfg.run.rollout_steps, setup.cost)
    return learned, prior


def _summarize(lr: _Learner, initial_cells: int) -> dict:
    learned, prior = _rollout_costs(lr.setup, lr.policy)
    return {
        "iterations": len(lr.model.observations),
        "violations": lr.violations,
        "oracle_failures": lr.oracle_failures,
        "property_failures": lr.property_failures,
        "calibration_warnings": lr.warnings[0],
        "initial_certified_cells": int(initial_cells),
        "final_certified_cells": int(lr.level.count),
        "final_level": float(lr.level.c),
        "s0_level": float(lr.setup.s0_level),
        "rollout_cost_learned": float(learned[2]),
        "rollout_cost_prior": float(prior[2]),
        "lipschitz_pi": policy_lipschitz_bound(lr.policy),
        "lipschitz_cap": lr.setup.L_pi_cap,
        "L_h": lr.setup.L_h,
        "L_g": lr.setup.L_g,
        "tau": lr.setup.grid.tau,
    }


def _write_trajectory(path, setup: Setup, result) -> None:
    states, actions, _ = result
    g = setup.cost.gamma
    rows = []
    for t in range(len(states)):
        x = states[t]
        u = actions[t] if t < len(actions) else np.full(setup.policy0.action_dim, np.nan)
        r = float(setup.cost(x[None, :], u[None, :])[0]) if t < len(actions) else float("nan")
        rows.append([t] + list(x) + list(u) + [r, g**t * r if t < len(actions) else float("nan")])
    d = setup.state_dim
    header = ["t"] + [f"x{i}" for i in range(d)] + ["u0", "r", "discounted_r"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if not (isinstance(v, float) and math.isnan(v)) else "" for v in r])


def _write_artifacts(lr: _Learner, out: Path, S: PairSet, summary: dict) -> None:
    s = lr.setup
    save_policy(out / "policy_final.txt", lr.policy)
    save_policy(out / "policy_initial.txt", s.policy0)
    if s.lyapunov_values is not None:
        save_value(out / "lyapunov_value.csv", s.lyapunov_values)
    obs = lr.model.observations
    d = s.state_dim
    meas = obs.residual_targets + s.prior(obs.inputs) if len(obs) else np.zeros((0, d))
    _write_csv(
        out / "observations.csv",
        [f"x{i}" for i in range(d)] + ["u0"] + [f"y{i}" for i in range(d)],
        [list(a) + list(y) for a, y in zip(obs.inputs, meas)],
    )
    t = lr.exp_table
    rows = t.rows(S.states, S.actions) if len(S) else np.zeros(0, dtype=int)
    P = s.points[S.states]
    write_columns(
        out / "safe_set_final.csv",
        ["state", "action", *[f"x{i}" for i in range(d)], "u0", "v", "l_n", "u_n", "in_s0"],
        [S.states, S.actions, *P.T, s.actions.actions[S.actions, 0], s.v_all[S.states], t.lower[rows],
         t.upper[rows], t.in_s0[rows].astype(bool)],
    )
    learned, prior = _rollout_costs(s, lr.policy)
    _write_trajectory(out / "trajectory_learned.csv", s, learned)
    _write_trajectory(out / "trajectory_prior.csv", s, prior)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verification without learning
# ---------------------------------------------------------------------------


def _load_observations(path, setup: Setup):
    d = setup.state_dim
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if len(header) != 2 * d + 1:
            raise ValueError(f"{path}: expected {2 * d + 1} columns for a {d}-dimensional system")
        data = np.array([[float(v) for v in row] for row in r if row], dtype=float).reshape(-1, 2 * d + 1)
    return data[:, : d + 1], data[:, d + 1 :]


def verify_only(cfg: ExperimentConfig, checkpoint=None, observations=None, output_dir=None, check_oracle=False):
    """Certify a stored policy without learning.

    ``checkpoint`` is a policy file or a :class:`NeuralPolicy`; ``None``
    uses the prior-optimal policy. ``observations`` optionally conditions
    the model on a run's ``observations.csv``. Returns a dict with the
    certified level, cell count and (optionally) oracle failures.
    """
    if checkpoint is None:
        policy = None
    elif isinstance(checkpoint, NeuralPolicy):
        policy = checkpoint
    else:
        policy = load_policy(checkpoint)
    cap = cfg.policy.lipschitz_cap
    if policy is not None:
        if policy.state_dim != cfg.state_dim or policy.action_dim != 1:
            raise ValueError(
                f"checkpoint maps {policy.state_dim} states to {policy.action_dim} actions; "
                f"the config expects {cfg.state_dim} to 1"
            )
        cap = max(cap, policy_lipschitz_bound(policy))
    setup = build_setup(cfg, lipschitz_cap=cap)
    policy = setup.policy0 if policy is None else policy
    d = setup.state_dim
    obs = ObservationSet.empty(d + 1, d, cfg.kernel.noise_sigma)
    if observations is not None:
        inputs, nxt = _load_observations(observations, setup)
        if len(inputs):
            obs = ObservationSet.from_transitions(setup.prior, inputs, nxt, cfg.kernel.noise_sigma)
    model = fit_posterior(setup.prior, setup.kernel, obs)
    b = _beta(setup, model, np.random.default_rng(np.random.SeedSequence(cfg.run.seed).spawn(4)[3]))
    table = ConfidenceTable(1)
    warn = [0]
    level = certify(setup, policy, table, model, b, warn)
    report = {
        "level": float(level.c),
        "certified_cells": int(level.count),
        "empty": bool(level.empty),
        "lipschitz_pi": policy_lipschitz_bound(policy),
        "calibration_warnings": warn[0],
    }
    if check_oracle:
        cert = setup.order[: level.count]
        ok = true_roa_oracle(setup.system, policy, setup.points[cert], setup.horizon_steps, cfg.run.ball_radius)
        report["oracle_failures"] = int(np.sum(~ok))
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = np.flatnonzero(table.action_ids == POLICY_ACTION)
        st = table.states[rows]
        in_level = setup.v_all[st] <= (level.c if not level.empty else -np.inf)
        write_certificate_csv(
            out / "certificate_verify.csv", setup.grid, setup.v_all[st], table.lower[rows], table.upper[rows],
            in_level, indices=st,
        )
        (out / "verify.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# ---------------------------------------------------------------------------
# baseline suite
# ---------------------------------------------------------------------------


def baseline_suite(seed: int = 0, random_instances: int = 100, instance=None) -> dict:
    """Sandwich check and set-property suite on toy instances.

    Runs the shipped instance (or ``instance``) to convergence plus
    ``random_instances`` random ones. Returns per-check pass flags, the
    failure count and a list of failure descriptions.
    """
    rng = np.random.default_rng(seed)
    failures = []
    inst = bl.shipped_instance() if instance is None else instance
    trace = bl.run_theory_algorithm(inst)
    rep = bl.sandwich_check(trace, inst)
    if not rep["ok"]:
        failures.append(f"shipped instance: sandwich {rep['violations'][:3]}")
    props = bl.set_property_report(inst, rng)
    failures += [f"shipped instance: property {k}" for k, ok in props.items() if not ok]
    for i in range(random_instances):
        r_inst = bl.random_instance(rng)
        tr = bl.run_theory_algorithm(r_inst)
        rp = bl.sandwich_check(tr, r_inst)
        if not rp["ok"]:
            failures.append(f"random instance {i}: sandwich {rp['violations'][:3]}")
        pr = bl.set_property_report(r_inst, rng, trials=2)
        failures += [f"random instance {i}: property {k}" for k, ok in pr.items() if not ok]
    return {
        "shipped_sandwich": bool(rep["ok"]),
        "shipped_properties": props,
        "random_instances": random_instances,
        "failures": failures,
        "ok": not failures,
    }

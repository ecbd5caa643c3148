"""Oracle set operators on finite instances and the exploration sandwich check.

A :class:`ToyInstance` knows ``v(f(x, u))`` exactly. The operators below
describe what any safe algorithm with ``eps``-accurate knowledge could
certify; :func:`run_theory_algorithm` runs the Lipschitz-propagated safe
learning loop on the same instance so that both can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .lyapunov import STRICT_MARGIN, ConfidenceTable, largest_level
from .safe_sets import (
    ActionGrid,
    PairSet,
    dec_set_lipschitz,
    safe_set_lipschitz,
    select_sample,
)

__all__ = [
    "ToyInstance",
    "r_dec",
    "r_level",
    "r_eps",
    "rbar",
    "n_star",
    "NOT_FOUND",
    "TheoryTrace",
    "run_theory_algorithm",
    "sandwich_check",
    "random_instance",
    "shipped_instance",
    "dump_instance",
    "parse_instance",
    "set_property_report",
]

NOT_FOUND = None  # returned by n_star when the scan cap is hit


@dataclass(frozen=True, eq=False)
class ToyInstance:
    """Finite instance with exact successor values.

    ``states`` is ``(N, d_x)``, ``actions`` an :class:`ActionGrid`, ``v``
    the Lyapunov values at the states and ``vf[i, j] = v(f(x_i, u_j))``.
    ``s0_level`` defines ``S_0^x = {v <= s0_level}`` and ``s0_actions``
    the action index used by the initial policy at each state.
    """

    states: np.ndarray
    actions: ActionGrid
    v: np.ndarray
    vf: np.ndarray
    L_v: float
    L_f: float
    L_pi: float
    tau: float
    eps: float
    s0_level: float
    s0_actions: np.ndarray

    def __post_init__(self):
        N = len(self.states)
        if self.vf.shape != (N, len(self.actions)):
            raise ValueError("vf must have one row per state and one column per action")
        if self.s0_level < 0 or not np.any(self.v <= self.s0_level):
            raise ValueError("S_0 must not be empty")

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def L_dv(self) -> float:
        return self.L_v * self.L_f * (self.L_pi + 1.0) + self.L_v

    @property
    def s0(self) -> PairSet:
        idx = np.flatnonzero(self.v <= self.s0_level)
        return PairSet(idx, self.s0_actions[idx], self.n_actions)

    def coordinates(self, states, actions) -> np.ndarray:
        return np.hstack([self.states[states], self.actions.actions[actions]])

    def all_pairs(self):
        S, A = np.meshgrid(np.arange(len(self.states)), np.arange(self.n_actions), indexing="ij")
        return S.ravel(), A.ravel()


def _distances(inst: ToyInstance, S: PairSet):
    """1-norm distances ``(|S|, N*m)`` from each pair of S to every pair."""
    cs, ca = inst.all_pairs()
    cand = inst.coordinates(cs, ca)
    seeds = inst.coordinates(S.states, S.actions)
    return np.abs(seeds[:, None, :] - cand[None, :, :]).sum(axis=2), cs, ca


def r_dec(S: PairSet, inst: ToyInstance) -> PairSet:
    """``S_0`` plus pairs certified to decrease by Lipschitz generalization."""
    out = inst.s0
    if len(S) == 0:
        return out
    d, cs, ca = _distances(inst, S)
    t = inst.vf[S.states, S.actions] - inst.v[S.states] + inst.eps
    lhs = t[:, None] + inst.L_dv * d
    hit = np.any(lhs < -inst.L_dv * inst.tau - STRICT_MARGIN, axis=0)
    return out.union(PairSet(cs[hit], ca[hit], inst.n_actions))


def r_level(D: PairSet, inst: ToyInstance):
    """Largest level whose grid states all have some action in ``D``.

    Returns ``(c, state_mask)``. On a finite instance the existence of a
    policy reduces to the existence of an action per state.
    """
    has_action = np.zeros(len(inst.states), dtype=bool)
    has_action[D.states] = True
    res = largest_level(inst.v, has_action)
    mask = np.zeros(len(inst.states), dtype=bool)
    if res.count:
        mask = inst.v <= res.c
    return res.c, mask


def r_eps(S: PairSet, inst: ToyInstance) -> PairSet:
    """One expansion step of the oracle safe set."""
    c, mask = r_level(r_dec(S, inst), inst)
    if len(S) == 0 or not mask.any():
        return S
    d, cs, ca = _distances(inst, S)
    t = inst.vf[S.states, S.actions] + inst.eps
    ok = np.any(t[:, None] + inst.L_v * inst.L_f * d <= c, axis=0) & mask[cs]
    return S.union(PairSet(cs[ok], ca[ok], inst.n_actions))


def rbar(S0: PairSet, inst: ToyInstance, eps: Optional[float] = None) -> PairSet:
    """Least fixpoint of :func:`r_eps` starting from ``S0``."""
    if eps is not None and eps != inst.eps:
        inst = _with_eps(inst, eps)
    S = S0
    for _ in range(len(inst.states) * inst.n_actions + 1):
        nxt = r_eps(S, inst)
        if nxt == S:
            return S
        S = nxt
    raise RuntimeError("fixpoint iteration did not terminate")


def _with_eps(inst: ToyInstance, eps: float) -> ToyInstance:
    kw = {k: getattr(inst, k) for k in inst.__dataclass_fields__}
    kw["eps"] = float(eps)
    return ToyInstance(**kw)


def n_star(B_g: float, sigma: float, delta: float, L_v: float, eps: float, q: int, rbar_size: int,
           gamma_schedule: Callable[[int], float], beta_schedule: Optional[Callable[[int], float]] = None,
           cap: int = 10**7):
    """Smallest ``n`` with ``n / (beta_n^2 gamma_n) >= C q (|R| + 1) / (L_v^2 eps^2)``.

    ``C = 8 / log(1 + sigma^-2)``. ``beta_n`` defaults to the RKHS-based
    scaling ``B_g + 4 sigma sqrt(gamma_n + 1 + ln(1/delta))``. Returns
    :data:`NOT_FOUND` if no ``n <= cap`` qualifies.
    """
    if sigma <= 0 or eps <= 0 or L_v <= 0:
        raise ValueError("sigma, eps and L_v must be positive")
    C = 8.0 / math.log1p(sigma**-2)
    rhs = C * q * (rbar_size + 1) / (L_v**2 * eps**2)
    for n in range(1, int(cap) + 1):
        g = gamma_schedule(n)
        if beta_schedule is None:
            b = B_g + 4.0 * sigma * math.sqrt(g + 1.0 + math.log(1.0 / delta))
        else:
            b = beta_schedule(n)
        if n >= rhs * b * b * g:
            return n
    return NOT_FOUND


# ---------------------------------------------------------------------------
# the learning loop on a toy instance
# ---------------------------------------------------------------------------


@dataclass
class TheoryTrace:
    safe_sets: List[PairSet] = field(default_factory=list)
    dec_sets: List[PairSet] = field(default_factory=list)
    levels: List[float] = field(default_factory=list)
    samples: list = field(default_factory=list)
    lower: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    converged: bool = False


def run_theory_algorithm(inst: ToyInstance, max_iter: int = 1000) -> TheoryTrace:
    """Lipschitz-propagated safe exploration with exact ``eps`` intervals.

    Measuring a pair sets its interval to ``[v(f) - eps, v(f) + eps]``
    intersected with the running interval. The loop stops once the safe set
    stops growing and every safe pair has been measured.
    """
    table = ConfidenceTable(inst.actions.actions.shape[1])
    cs, ca = inst.all_pairs()
    s0 = inst.s0
    s0_mask = s0.contains(cs, ca)
    table.track(cs, ca, inst.actions.actions[ca], s0_mask, inst.v[cs], inst.L_dv * inst.tau)
    measured = np.zeros(len(cs), dtype=bool)
    trace = TheoryTrace(safe_sets=[s0])
    S = s0
    for n in range(1, max_iter + 1):
        D = dec_set_lipschitz(S, table, inst.v, inst.L_dv, inst.tau, inst.states, inst.actions, n)
        c, mask = r_level(D, inst)
        S_new = safe_set_lipschitz(S, table, c, inst.L_v, inst.L_f, inst.states, inst.actions, inst.v, n)
        trace.dec_sets.append(D)
        trace.levels.append(c)
        trace.safe_sets.append(S_new)
        trace.lower.append(table.lower.copy())
        trace.upper.append(table.upper.copy())
        rows = table.rows(S_new.states, S_new.actions)
        pending = ~measured[rows]
        if not pending.any():
            if S_new == S:
                trace.converged = True
                break
            S = S_new
            continue
        pair, _ = select_sample(S_new, table)
        row = table.row(*pair)
        t = inst.vf[pair]
        table.intersect([row], t - inst.eps, t + inst.eps, warn=False)
        measured[row] = True
        trace.samples.append(pair)
        S = S_new
    return trace


def sandwich_check(trace: TheoryTrace, inst: ToyInstance) -> dict:
    """Check ``S_n`` inside the exact-knowledge fixpoint at every ``n`` and the
    ``eps`` fixpoint inside the final safe set once the run has converged."""
    upper_set = rbar(inst.s0, inst, eps=0.0)
    lower_set = rbar(inst.s0, inst)
    report = {"upper_ok": True, "lower_ok": None, "violations": []}
    for n, S in enumerate(trace.safe_sets):
        extra = S.difference(upper_set)
        if len(extra):
            report["upper_ok"] = False
            report["violations"].append(("upper", n, next(iter(extra))))
    if trace.converged:
        missing = lower_set.difference(trace.safe_sets[-1])
        report["lower_ok"] = len(missing) == 0
        if len(missing):
            report["violations"].append(("lower", len(trace.safe_sets) - 1, next(iter(missing))))
    report["ok"] = report["upper_ok"] and report["lower_ok"] is not False
    return report


def set_property_report(inst: ToyInstance, rng=None, trials: int = 5) -> dict:
    """Check the set properties (i)-(x) on one instance.

    Operator monotonicity (iii)-(vi) uses random nested pairs of sets; the
    run properties use :func:`run_theory_algorithm`.
    """
    rng = np.random.default_rng(rng)
    res = {}
    trace = run_theory_algorithm(inst)
    U, L = trace.upper, trace.lower
    res["i"] = all(np.all(U[k + 1] <= U[k]) for k in range(len(U) - 1))
    res["ii"] = all(np.all(L[k + 1] >= L[k]) for k in range(len(L) - 1))
    cs, ca = inst.all_pairs()
    ok = {"iii": True, "iv": True, "v": True, "vi": True}
    for _ in range(trials):
        big = rng.random(len(cs)) < rng.uniform(0.2, 0.9)
        small = big & (rng.random(len(cs)) < 0.5)
        R = PairSet(cs[big], ca[big], inst.n_actions).union(inst.s0)
        S = PairSet(cs[small], ca[small], inst.n_actions).union(inst.s0)
        ok["iii"] &= bool(np.all(~r_level(S, inst)[1] | r_level(R, inst)[1]))
        ok["iv"] &= r_dec(S, inst).issubset(r_dec(R, inst))
        ok["v"] &= r_eps(S, inst).issubset(r_eps(R, inst))
        ok["vi"] &= rbar(S, inst).issubset(rbar(R, inst))
    res.update(ok)
    Ss, Ds = trace.safe_sets, trace.dec_sets
    # (vii): S_n growing implies D_{n+1} growing; Ds[k] is D_{k+1}, Ss[k] is S_k
    res["vii"] = all(
        Ds[k].issubset(Ds[k + 1]) for k in range(len(Ds) - 1) if Ss[k].issubset(Ss[k + 1])
    )
    res["viii"] = inst.s0.issubset(Ds[0]) if Ds else True
    res["ix"] = all(Ss[k].issubset(Ss[k + 1]) for k in range(len(Ss) - 1))
    res["x"] = all(Ds[k].issubset(Ds[k + 1]) for k in range(len(Ds) - 1))
    return res


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


def random_instance(rng=None, n_states: int = 8, n_actions: int = 3) -> ToyInstance:
    """Random 1-D instance with ``v(x) = x^2`` on states away from the origin.

    The initial pairs are made to satisfy the decrease condition with the
    true values, since the initial safe set is assumed to be safe.
    """
    rng = np.random.default_rng(rng)
    xs = np.linspace(1.0 / n_states, 1.0, n_states)[:, None]
    v = xs[:, 0] ** 2
    acts = ActionGrid.uniform(-0.5, 0.5, n_actions)
    L_v, L_f, L_pi = float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.0, 0.5))
    L_dv = L_v * L_f * (L_pi + 1.0) + L_v
    eps = float(rng.uniform(0.05, 0.3)) * v[0]
    tau = float(rng.uniform(0.05, 0.5)) * (v[0] - eps) / L_dv
    vf = v[:, None] * rng.uniform(0.0, 1.2, size=(n_states, n_actions))
    s0_actions = np.argmin(vf, axis=1)
    s0_level = float(v[rng.integers(0, 3)])
    s0 = np.flatnonzero(v <= s0_level)
    need = (v[s0] - L_dv * tau - eps) * rng.uniform(0.0, 1.0, size=len(s0))
    vf[s0, s0_actions[s0]] = np.minimum(vf[s0, s0_actions[s0]], need)
    return ToyInstance(xs, acts, v, vf, L_v, L_f, L_pi, tau, eps, s0_level, s0_actions)


def shipped_instance() -> ToyInstance:
    """Fixed 5-state, 3-action instance used by the tests and the CLI.

    The states ``0.2 .. 1.0`` carry ``v(x) = x^2``; with ``eps = 0.01`` the
    safe set grows in two stages to the three innermost states, while exact
    knowledge would reach all five.
    """
    xs = np.array([[0.2], [0.4], [0.6], [0.8], [1.0]])
    acts = ActionGrid(np.array([[-0.5], [0.0], [0.5]]), np.array([-0.5]), np.array([0.5]))
    vf = np.array(
        [
            [0.024, 0.005, 0.036],
            [0.119, 0.174, 0.129],
            [0.354, 0.394, 0.330],
            [0.449, 0.473, 0.697],
            [0.433, 0.771, 0.951],
        ]
    )
    return ToyInstance(
        states=xs, actions=acts, v=xs[:, 0] ** 2, vf=vf, L_v=0.08, L_f=0.25, L_pi=0.0,
        tau=0.01, eps=0.01, s0_level=0.05, s0_actions=np.ones(5, dtype=int),
    )


def dump_instance(inst: ToyInstance) -> str:
    """Plain-text table: a header of constants, then ``state action v vf`` rows."""
    lines = [
        "# toy instance",
        f"L_v {float(inst.L_v)!r}",
        f"L_f {float(inst.L_f)!r}",
        f"L_pi {float(inst.L_pi)!r}",
        f"tau {float(inst.tau)!r}",
        f"eps {float(inst.eps)!r}",
        f"s0_level {float(inst.s0_level)!r}",
        "s0_actions " + " ".join(str(int(a)) for a in inst.s0_actions),
        "actions " + " ".join(",".join(repr(float(c)) for c in a) for a in inst.actions.actions),
        "action_box " + ",".join(repr(float(c)) for c in inst.actions.lower) + " "
        + ",".join(repr(float(c)) for c in inst.actions.upper),
        "state action v(x) v(f(x,u))",
    ]
    for i in range(len(inst.states)):
        for j in range(inst.n_actions):
            lines.append(
                ",".join(repr(float(c)) for c in inst.states[i])
                + f" {j} {float(inst.v[i])!r} {float(inst.vf[i, j])!r}"
            )
    return "\n".join(lines) + "\n"


def parse_instance(text: str) -> ToyInstance:
    head, rows = {}, []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] in ("L_v", "L_f", "L_pi", "tau", "eps", "s0_level"):
            head[tok[0]] = float(tok[1])
        elif tok[0] in ("s0_actions", "actions", "action_box"):
            head[tok[0]] = tok[1:]
        elif tok[0] == "state":
            continue
        else:
            rows.append(tok)
    states, idx = [], {}
    for r in rows:
        key = r[0]
        if key not in idx:
            idx[key] = len(states)
            states.append([float(c) for c in key.split(",")])
    acts = np.array([[float(c) for c in a.split(",")] for a in head["actions"]])
    lo = np.array([float(c) for c in head["action_box"][0].split(",")])
    hi = np.array([float(c) for c in head["action_box"][1].split(",")])
    N, m = len(states), len(acts)
    v = np.zeros(N)
    vf = np.full((N, m), np.nan)
    for r in rows:
        i, j = idx[r[0]], int(r[1])
        v[i] = float(r[2])
        vf[i, j] = float(r[3])
    if np.any(np.isnan(vf)):
        raise ValueError("instance table is incomplete")
    return ToyInstance(
        np.array(states), ActionGrid(acts, lo, hi), v, vf, head["L_v"], head["L_f"], head["L_pi"],
        head["tau"], head["eps"], head["s0_level"], np.array([int(a) for a in head["s0_actions"]]),
    )

"""Decrease sets, safe sample sets and the exploration sampling rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lyapunov import STRICT_MARGIN, ConfidenceTable

__all__ = [
    "ActionGrid",
    "PairSet",
    "NoSafeSampleError",
    "dec_set_direct",
    "safe_set_direct",
    "dec_set_lipschitz",
    "safe_set_lipschitz",
    "select_sample",
    "restrict_actions",
]


class NoSafeSampleError(RuntimeError):
    """Raised when the safe set is empty and exploration must stop."""


@dataclass(frozen=True, eq=False)
class ActionGrid:
    """Finite action set inside the box ``[lower, upper]``."""

    actions: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def uniform(cls, lower, upper, count):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        count = np.broadcast_to(np.asarray(count, dtype=int), lower.shape)
        axes = [np.linspace(lo, hi, int(c)) for lo, hi, c in zip(lower, upper, count)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(np.stack([m.ravel() for m in mesh], axis=1), lower, upper)

    def __post_init__(self):
        A = np.asarray(self.actions, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        if len(A) == 0:
            raise ValueError("the action grid must not be empty")
        lo = np.broadcast_to(np.asarray(self.lower, float), A.shape[1:]).copy()
        hi = np.broadcast_to(np.asarray(self.upper, float), A.shape[1:]).copy()
        if np.any(A < lo - 1e-12) or np.any(A > hi + 1e-12):
            raise ValueError("actions must lie inside the action box")
        object.__setattr__(self, "actions", A)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def __len__(self) -> int:
        return len(self.actions)


class PairSet:
    """Immutable set of ``(state index, action index)`` pairs.

    Stored as sorted unique keys ``state * n_actions + action``, so that
    sorted order coincides with lexicographic order on the pairs.
    """

    def __init__(self, states, actions, n_actions: int, generation: int = 0):
        self.n_actions = int(n_actions)
        keys = np.asarray(states, dtype=np.int64) * self.n_actions + np.asarray(actions, dtype=np.int64)
        self.keys = np.unique(keys)
        self.generation = generation

    @classmethod
    def from_keys(cls, keys, n_actions, generation=0) -> "PairSet":
        out = cls.__new__(cls)
        out.n_actions = int(n_actions)
        out.keys = np.unique(np.asarray(keys, dtype=np.int64))
        out.generation = generation
        return out

    @classmethod
    def empty(cls, n_actions, generation=0) -> "PairSet":
        return cls.from_keys(np.zeros(0, dtype=np.int64), n_actions, generation)

    @property
    def states(self) -> np.ndarray:
        return self.keys // self.n_actions

    @property
    def actions(self) -> np.ndarray:
        return self.keys % self.n_actions

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self):
        return iter(zip(self.states.tolist(), self.actions.tolist()))

    def __contains__(self, pair) -> bool:
        key = int(pair[0]) * self.n_actions + int(pair[1])
        i = np.searchsorted(self.keys, key)
        return bool(i < len(self.keys) and self.keys[i] == key)

    def contains(self, states, actions) -> np.ndarray:
        keys = np.asarray(states, dtype=np.int64) * self.n_actions + np.asarray(actions, dtype=np.int64)
        i = np.searchsorted(self.keys, keys)
        ok = i < len(self.keys)
        ok[ok] = self.keys[i[ok]] == keys[ok]
        return ok

    def union(self, other: "PairSet", generation=None) -> "PairSet":
        gen = max(self.generation, other.generation) if generation is None else generation
        return PairSet.from_keys(np.union1d(self.keys, other.keys), self.n_actions, gen)

    def difference(self, other: "PairSet") -> "PairSet":
        return PairSet.from_keys(np.setdiff1d(self.keys, other.keys), self.n_actions, self.generation)

    def issubset(self, other: "PairSet") -> bool:
        return bool(np.all(other.contains(self.states, self.actions))) if len(self) else True

    def __eq__(self, other) -> bool:
        return isinstance(other, PairSet) and np.array_equal(self.keys, other.keys)

    def __repr__(self) -> str:
        return f"PairSet(n={len(self)}, generation={self.generation})"


def _table_pairs(table: ConfidenceTable, n_actions: int):
    """Rows of the table that refer to discrete actions."""
    rows = np.flatnonzero(table.action_ids >= 0)
    return rows, table.states[rows], table.action_ids[rows]


def dec_set_direct(table: ConfidenceTable, v_grid, L_dv, tau: float, n_actions: int, generation=0) -> PairSet:
    """Tracked discrete pairs with ``u_n(x, u) - v(x) < -L_dv tau``.

    ``v_grid`` holds ``v`` at every grid state and ``L_dv`` is either a
    scalar or a per-grid-state array.
    """
    rows, s, a = _table_pairs(table, n_actions)
    L = np.asarray(L_dv, dtype=float)
    L = L[s] if L.ndim else L
    ok = table.upper[rows] - np.asarray(v_grid)[s] < -L * tau - STRICT_MARGIN
    return PairSet(s[ok], a[ok], n_actions, generation)


def safe_set_direct(c_n: float, table: ConfidenceTable, v_grid, s0: PairSet, generation=0) -> PairSet:
    """``{(x, u) in V(c_n) x U : u_n(x, u) <= c_n}`` joined with ``S_0``."""
    rows, s, a = _table_pairs(table, s0.n_actions)
    ok = (np.asarray(v_grid)[s] <= c_n) & (table.upper[rows] <= c_n)
    return PairSet(s[ok], a[ok], s0.n_actions, generation).union(s0, generation)


def _pair_coordinates(grid_points, actions: ActionGrid, states, action_idx):
    return np.hstack([np.asarray(grid_points)[states], actions.actions[action_idx]])


def _candidate_pairs(n_states, n_actions, state_mask=None):
    s = np.arange(n_states) if state_mask is None else np.flatnonzero(state_mask)
    S, A = np.meshgrid(s, np.arange(n_actions), indexing="ij")
    return S.ravel(), A.ravel()


def dec_set_lipschitz(S_prev: PairSet, table: ConfidenceTable, v_grid, L_dv: float, tau: float,
                      grid_points, actions: ActionGrid, generation=0) -> PairSet:
    """Pairs ``a'`` with ``u_n(a) - v(x) + L_dv ||a' - a||_1 < -L_dv tau``
    for some seed ``a = (x, u)`` in ``S_prev``."""
    m = len(actions)
    if len(S_prev) == 0:
        return PairSet.empty(m, generation)
    rows = table.rows(S_prev.states, S_prev.actions)
    slack = -L_dv * tau - (table.upper[rows] - np.asarray(v_grid)[S_prev.states])
    seeds = _pair_coordinates(grid_points, actions, S_prev.states, S_prev.actions)
    cs, ca = _candidate_pairs(len(v_grid), m)
    cand = _pair_coordinates(grid_points, actions, cs, ca)
    hit = np.zeros(len(cs), dtype=bool)
    pos = slack > STRICT_MARGIN
    for i in np.flatnonzero(pos):
        d = np.abs(cand - seeds[i]).sum(axis=1)
        hit |= L_dv * d < slack[i] - STRICT_MARGIN
    return PairSet(cs[hit], ca[hit], m, generation)


def safe_set_lipschitz(S_prev: PairSet, table: ConfidenceTable, c_n: float, L_v: float, L_f: float,
                       grid_points, actions: ActionGrid, v_grid, generation=0) -> PairSet:
    """Pairs ``a'`` in ``V(c_n) x U`` with ``u_n(a) + L_v L_f ||a - a'||_1 <= c_n``
    for some ``a`` in ``S_prev``."""
    m = len(actions)
    if len(S_prev) == 0:
        return PairSet.empty(m, generation)
    rows = table.rows(S_prev.states, S_prev.actions)
    slack = c_n - table.upper[rows]
    seeds = _pair_coordinates(grid_points, actions, S_prev.states, S_prev.actions)
    cs, ca = _candidate_pairs(len(v_grid), m, np.asarray(v_grid) <= c_n)
    cand = _pair_coordinates(grid_points, actions, cs, ca)
    hit = np.zeros(len(cs), dtype=bool)
    for i in np.flatnonzero(slack >= 0):
        d = np.abs(cand - seeds[i]).sum(axis=1)
        hit |= L_v * L_f * d <= slack[i]
    return PairSet(cs[hit], ca[hit], m, generation)


def select_sample(S_n: PairSet, table: ConfidenceTable):
    """Pair of ``S_n`` with the widest interval ``u_n - l_n``.

    Ties go to the lexicographically smallest ``(state, action)``.
    """
    if len(S_n) == 0:
        raise NoSafeSampleError("the safe set is empty")
    rows = table.rows(S_n.states, S_n.actions)
    width = table.width(rows)
    j = int(np.argmax(width))  # first maximum = smallest key
    return (int(S_n.states[j]), int(S_n.actions[j])), float(width[j])


def restrict_actions(actions: ActionGrid, policy_actions, u_bar: float):
    """Per-state mask of actions within ``u_bar`` (inf-norm) of ``pi(x)``.

    Returns ``(mask, fallback)``; rows whose window holds no grid action
    fall back to the nearest grid action and are flagged in ``fallback``.
    """
    if not u_bar > 0:
        raise ValueError("u_bar must be positive")
    P = np.asarray(policy_actions, dtype=float).reshape(-1, actions.actions.shape[1])
    lo = np.maximum(P - u_bar, actions.lower)
    hi = np.minimum(P + u_bar, actions.upper)
    A = actions.actions[None, :, :]
    tol = 1e-12
    mask = np.all((A >= lo[:, None, :] - tol) & (A <= hi[:, None, :] + tol), axis=2)
    fallback = ~mask.any(axis=1)
    if np.any(fallback):
        d = np.abs(A - P[fallback][:, None, :]).sum(axis=2)
        mask[np.flatnonzero(fallback), np.argmin(d, axis=1)] = True
    return mask, fallback

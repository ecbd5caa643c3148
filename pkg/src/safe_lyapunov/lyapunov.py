"""Grid discretization, Lyapunov candidates and the discretized decrease test."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Discretization",
    "build_grid",
    "nearest_cell",
    "LipschitzConstants",
    "l_delta_v",
    "QuadraticLyapunov",
    "ValueLyapunov",
    "ConfidenceTable",
    "CalibrationWarning",
    "update_confidence",
    "decrease_ok",
    "decrease_mask",
    "LevelResult",
    "largest_level",
    "largest_level_lazy",
    "lyapunov_validate",
    "write_certificate_csv",
    "write_columns",
    "STRICT_MARGIN",
    "POLICY_ACTION",
    "confidence_bounds",
]

# the strict decrease inequality is evaluated with this extra slack
STRICT_MARGIN = 1e-12


class CalibrationWarning(UserWarning):
    """A fresh confidence interval did not intersect the running one."""


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Discretization:
    """Uniform axis-aligned grid with points enumerated in row-major order."""

    lower: np.ndarray
    upper: np.ndarray
    counts: tuple

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def num_points(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.asarray(self.counts) - 1)

    @property
    def tau(self) -> float:
        return 0.5 * float(np.sum(self.spacing))

    def axes(self):
        return [
            np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.counts)
        ]

    def unravel(self, index) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(index), self.counts), axis=-1)

    def ravel(self, multi_index) -> np.ndarray:
        mi = np.asarray(multi_index)
        return np.ravel_multi_index(tuple(mi[..., i] for i in range(self.ndim)), self.counts)

    def index_to_state(self, index) -> np.ndarray:
        return self.lower + self.unravel(index) * self.spacing

    def all_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def origin_index(self) -> Optional[int]:
        """Index of the grid point at the origin, or None if there is none."""
        idx, _ = nearest_cell(self, np.zeros(self.ndim))
        if np.allclose(self.index_to_state(idx), 0.0, atol=1e-12):
            return int(idx)
        return None


def build_grid(bounds, cells_per_axis) -> Discretization:
    """Build a grid from ``[(lo, hi), ...]`` and per-axis point counts.

    >>> build_grid([(-1, 1)], [3]).tau
    0.5
    """
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError("bounds must be a sequence of (lower, upper) pairs")
    counts = tuple(int(c) for c in np.atleast_1d(cells_per_axis))
    if len(counts) == 1 and bounds.shape[0] > 1:
        counts = counts * bounds.shape[0]
    if len(counts) != bounds.shape[0]:
        raise ValueError("one cell count per axis is required")
    if min(counts) < 2:
        raise ValueError("every axis needs at least two grid points")
    if not np.all(np.isfinite(bounds)) or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("bounds must be finite with lower < upper")
    return Discretization(bounds[:, 0].copy(), bounds[:, 1].copy(), counts)


def nearest_cell(grid: Discretization, x):
    """Return ``(index, clamped)`` of the grid point closest to ``x`` in 1-norm.

    Works on a single point or a batch of points. Coordinates are rounded
    per axis, which minimizes the 1-norm; exact ties round down, giving the
    lexicographically smallest index.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    clipped = np.clip(X, grid.lower, grid.upper)
    clamped = np.any(clipped != X, axis=1)
    pos = (clipped - grid.lower) / grid.spacing
    mi = np.ceil(pos - 0.5).astype(int)
    mi = np.clip(mi, 0, np.asarray(grid.counts) - 1)
    idx = grid.ravel(mi)
    if single:
        return int(idx[0]), bool(clamped[0])
    return idx, clamped


# ---------------------------------------------------------------------------
# Lipschitz constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzConstants:
    """1-norm Lipschitz constants used by the discretized decrease test."""

    L_h: float
    L_g: float
    L_pi: float
    L_v_global: float
    L_v_local: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("L_h", "L_g", "L_pi", "L_v_global"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.L_v_local is not None:
            loc = np.asarray(self.L_v_local, dtype=float)
            if np.any(loc < 0) or np.any(loc > self.L_v_global * (1 + 1e-12) + 1e-15):
                raise ValueError("local Lipschitz constants must lie in [0, L_v_global]")
            object.__setattr__(self, "L_v_local", loc)

    @property
    def L_f(self) -> float:
        return self.L_h + self.L_g


def l_delta_v(consts: LipschitzConstants, use_local: bool = False, cell=None):
    """``L_v L_f (L_pi + 1) + L_v`` with a global or per-cell ``L_v``.

    With ``use_local`` and ``cell=None`` the whole per-cell vector is returned.
    """
    if use_local:
        if consts.L_v_local is None:
            raise ValueError("no local Lipschitz constants available")
        L_v = consts.L_v_local if cell is None else consts.L_v_local[cell]
    else:
        L_v = consts.L_v_global
    return L_v * consts.L_f * (consts.L_pi + 1.0) + L_v


# ---------------------------------------------------------------------------
# Lyapunov candidates
# ---------------------------------------------------------------------------


class QuadraticLyapunov:
    """``v(x) = x^T P x`` for a symmetric positive-definite ``P``."""

    def __init__(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        self.P = 0.5 * (P + P.T)

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.einsum("ni,ij,nj->n", X, self.P, X)

    def gradient(self, X) -> np.ndarray:
        return 2.0 * np.atleast_2d(X) @ self.P

    def local_lipschitz(self, grid: Discretization, states=None) -> np.ndarray:
        """Max of ``||grad v||_inf`` over the cell box around each grid point.

        The gradient ``2 P x`` is affine, so each component is maximized in
        closed form over the box ``x +- spacing/2``.
        """
        X = grid.all_points() if states is None else np.atleast_2d(states)
        return self.box_lipschitz(X, 0.5 * grid.spacing)

    def box_lipschitz(self, X, half_width) -> np.ndarray:
        """Max of ``||grad v||_inf`` over the boxes ``X +- half_width``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        H = np.broadcast_to(np.asarray(half_width, dtype=float), X.shape)
        comp = 2.0 * (np.abs(X @ self.P) + H @ np.abs(self.P))
        return comp.max(axis=1)


class ValueLyapunov:
    """Lyapunov candidate backed by a piecewise-linear value function."""

    def __init__(self, value):
        self.value = value

    def __call__(self, X) -> np.ndarray:
        return self.value.evaluate(np.atleast_2d(X))

    def gradient(self, X) -> np.ndarray:
        return self.value.gradient(np.atleast_2d(X))

    def local_lipschitz(self, grid: Discretization, states=None) -> np.ndarray:
        X = grid.all_points() if states is None else np.atleast_2d(states)
        return self.value.box_gradient_bound(X, 0.5 * grid.spacing)

    def box_lipschitz(self, X, half_width) -> np.ndarray:
        return self.value.box_gradient_bound(X, half_width)


# ---------------------------------------------------------------------------
# confidence intervals
# ---------------------------------------------------------------------------


class ConfidenceTable:
    """Running intervals ``C_n = [l_n, u_n]`` on ``v(f(x, u))``.

    Rows are keyed by ``(state index, action id)``. Discrete actions use
    their index in the action grid; :data:`POLICY_ACTION` marks the row
    ``(x, pi(x))`` of the current policy, whose continuous action is stored
    alongside. Rows of the initial safe set start from
    ``(-inf, v(x) - L_dv tau - margin)``, all others from the real line.
    Row ids are positions in key order and change when rows are added.
    """

    def __init__(self, action_dim: int, margin: float = 1e-9):
        self.action_dim = int(action_dim)
        self.margin = float(margin)
        self._keys = np.zeros(0, dtype=np.int64)
        self._actions = np.zeros((0, self.action_dim))
        self._lower = np.zeros(0)
        self._upper = np.zeros(0)
        self._s0 = np.zeros(0, dtype=bool)

    _STRIDE = 1 << 20

    def __len__(self) -> int:
        return len(self._keys)

    def _encode(self, states, action_ids) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        ids = np.asarray(action_ids, dtype=np.int64) + 1
        if np.any(ids < 0) or np.any(ids >= self._STRIDE):
            raise ValueError("action id out of range")
        return states * self._STRIDE + ids

    def track(self, states, action_ids, actions, s0_mask=None, v_states=None, l_dv_tau=None):
        """Add rows (existing rows are left untouched) and return row ids."""
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        n = len(states)
        action_ids = np.broadcast_to(np.asarray(action_ids, dtype=np.int64), (n,))
        actions = np.asarray(actions, dtype=float).reshape(n, self.action_dim)
        keys = self._encode(states, action_ids)
        s0_mask = np.zeros(n, bool) if s0_mask is None else np.broadcast_to(np.asarray(s0_mask, bool), (n,))
        pos = np.searchsorted(self._keys, keys)
        known = pos < len(self._keys)
        known[known] = self._keys[pos[known]] == keys[known]
        new = ~known
        if np.any(new):
            uniq_keys, first = np.unique(keys[new], return_index=True)
            sel = np.flatnonzero(new)[first]
            up = np.full(len(sel), np.inf)
            s0 = s0_mask[sel]
            if np.any(s0):
                if v_states is None or l_dv_tau is None:
                    raise ValueError("initial safe set rows need v(x) and L_dv * tau")
                vs = np.broadcast_to(np.asarray(v_states, dtype=float), (n,))[sel]
                lt = np.broadcast_to(np.asarray(l_dv_tau, dtype=float), (n,))[sel]
                up[s0] = vs[s0] - lt[s0] - self.margin
            all_keys = np.concatenate([self._keys, uniq_keys])
            order = np.argsort(all_keys, kind="stable")
            self._keys = all_keys[order]
            self._actions = np.concatenate([self._actions, actions[sel]])[order]
            self._lower = np.concatenate([self._lower, np.full(len(sel), -np.inf)])[order]
            self._upper = np.concatenate([self._upper, up])[order]
            self._s0 = np.concatenate([self._s0, s0])[order]
        return np.searchsorted(self._keys, keys)

    def rows(self, states, action_ids) -> np.ndarray:
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        keys = self._encode(states, np.broadcast_to(action_ids, states.shape))
        pos = np.searchsorted(self._keys, keys)
        ok = pos < len(self._keys)
        ok[ok] = self._keys[pos[ok]] == keys[ok]
        if not np.all(ok):
            raise KeyError("pair is not tracked by the confidence table")
        return pos

    def row(self, state, action_id) -> int:
        return int(self.rows([state], [action_id])[0])

    def drop_action(self, action_id: int) -> None:
        """Forget every row with the given action id."""
        keep = (self._keys % self._STRIDE) != action_id + 1
        self._keys = self._keys[keep]
        self._actions = self._actions[keep]
        self._lower = self._lower[keep]
        self._upper = self._upper[keep]
        self._s0 = self._s0[keep]

    @property
    def states(self) -> np.ndarray:
        return self._keys // self._STRIDE

    @property
    def action_ids(self) -> np.ndarray:
        return self._keys % self._STRIDE - 1

    @property
    def actions(self) -> np.ndarray:
        return self._actions

    @property
    def lower(self) -> np.ndarray:
        return self._lower

    @property
    def upper(self) -> np.ndarray:
        return self._upper

    @property
    def in_s0(self) -> np.ndarray:
        return self._s0

    def width(self, rows=None) -> np.ndarray:
        rows = slice(None) if rows is None else rows
        return self._upper[rows] - self._lower[rows]

    def intersect(self, rows, lower, upper, warn=True) -> int:
        """Intersect rows with new intervals; empty results keep the old one.

        Rows of the initial safe set are the exception: their upper bound is
        an assumption rather than a measurement, so a model interval lying
        entirely above it collapses the row onto that bound (zero width)
        without a warning. Returns the number of warned rows.
        """
        rows = np.asarray(rows, dtype=int)
        lower = np.broadcast_to(np.asarray(lower, dtype=float), rows.shape)
        upper = np.broadcast_to(np.asarray(upper, dtype=float), rows.shape)
        lo = np.maximum(self._lower[rows], lower)
        up = np.minimum(self._upper[rows], upper)
        assumed = (lo > up) & self._s0[rows]
        lo = np.where(assumed, up, lo)
        empty = lo > up
        if np.any(empty):
            if warn:
                j = int(np.argmax(empty))
                r = int(rows[j])
                warnings.warn(
                    f"{int(empty.sum())} empty interval intersection(s); e.g. state "
                    f"{int(self.states[r])} action {self._actions[r].tolist()}: old "
                    f"[{self._lower[r]:.6g}, {self._upper[r]:.6g}] new "
                    f"[{lower[j]:.6g}, {upper[j]:.6g}]",
                    CalibrationWarning,
                    stacklevel=3,
                )
            lo = np.where(empty, self._lower[rows], lo)
            up = np.where(empty, self._upper[rows], up)
        self._lower[rows] = lo
        self._upper[rows] = up
        return int(np.sum(empty))


POLICY_ACTION = -1


def confidence_bounds(model, v, beta: float, L_v, states, actions):
    """``v(mu) -+ L_v beta sigma`` for a batch of state-action pairs."""
    a = np.hstack([np.atleast_2d(states), np.atleast_2d(actions)])
    mean, sigma, _ = model.predict(a)
    centre = v(mean)
    half = np.asarray(L_v) * beta * sigma
    return centre - half, centre + half


def update_confidence(table: ConfidenceTable, model, v, beta: float, pairs, states_xy, L_v):
    """Intersect the rows ``pairs`` with ``[v(mu) -+ L_v beta sigma]``.

    ``states_xy`` holds the continuous states of the rows and ``L_v`` the
    (scalar or per-row) Lipschitz constant of ``v``. Returns the table.
    """
    rows = np.asarray(pairs, dtype=int)
    if rows.size == 0:
        return table
    lo, up = confidence_bounds(model, v, beta, L_v, states_xy, table.actions[rows])
    table.intersect(rows, lo, up)
    return table


def decrease_mask(upper, v_x, l_dv_tau) -> np.ndarray:
    """Vectorized strict test ``u_n - v(x) < -L_dv tau``."""
    return np.asarray(upper) - np.asarray(v_x) < -np.asarray(l_dv_tau) - STRICT_MARGIN


def decrease_ok(table: ConfidenceTable, v_x: float, pair, L_dv: float, tau: float) -> bool:
    """Discretized decrease condition for one tracked pair ``(state, action id)``."""
    row = table.row(*pair)
    return bool(decrease_mask(table.upper[row], v_x, L_dv * tau))


# ---------------------------------------------------------------------------
# level sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelResult:
    c: float
    count: int
    empty: bool


def _level_from_sorted(v_sorted, passed_sorted) -> LevelResult:
    n = len(v_sorted)
    fails = np.flatnonzero(~passed_sorted)
    if fails.size == 0:
        c = float(v_sorted[-1]) if n else 0.0
        return LevelResult(c, n, n == 0 or c <= 0.0)
    first = fails[0]
    # every state sharing the failing value is excluded as well
    k = int(np.searchsorted(v_sorted, v_sorted[first], side="left"))
    if k == 0:
        return LevelResult(0.0, 0, True)
    c = float(v_sorted[k - 1])
    if c <= 0.0:
        return LevelResult(0.0, k, True)
    return LevelResult(c, k, False)


def largest_level(v_values, passed) -> LevelResult:
    """Largest grid value ``c`` such that every state with ``v <= c`` passed.

    ``passed`` is the per-state outcome of the decrease test for
    ``(x, pi(x))``. Returns ``c = 0`` and ``empty=True`` when not even the
    smallest positive level is certified.
    """
    v_values = np.asarray(v_values, dtype=float)
    passed = np.asarray(passed, dtype=bool)
    order = np.argsort(v_values, kind="stable")
    return _level_from_sorted(v_values[order], passed[order])


def largest_level_lazy(v_sorted, check_chunk: Callable, chunk: int = 4096) -> LevelResult:
    """Like :func:`largest_level`, but evaluates states in increasing ``v``.

    ``check_chunk(start, stop)`` returns pass flags for sorted positions
    ``start:stop``; evaluation stops at the first failing chunk, which is
    enough because the level only depends on the first failure.
    """
    v_sorted = np.asarray(v_sorted, dtype=float)
    n = len(v_sorted)
    start = 0
    while start < n:
        stop = min(n, start + chunk)
        # never split a group of equal values across chunks
        stop = int(np.searchsorted(v_sorted, v_sorted[stop - 1], side="right"))
        ok = np.asarray(check_chunk(start, stop), dtype=bool)
        if not ok.all():
            passed = np.ones(stop, dtype=bool)
            passed[start:stop] = ok
            return _level_from_sorted(v_sorted[:stop], passed)
        start = stop
        chunk *= 2
    return _level_from_sorted(v_sorted, np.ones(n, dtype=bool))


# ---------------------------------------------------------------------------
# validation and export
# ---------------------------------------------------------------------------


def lyapunov_validate(v, grid: Discretization, step=None, tol: float = 0.0) -> dict:
    """Check a Lyapunov candidate on the grid.

    Verifies ``v(0) = 0`` and ``v > 0`` at non-zero grid points. If ``step``
    (a closed-loop map on states) is given, also checks that ``v`` decreases
    along each grid-point transition whose successor stays inside the box.
    Returns a dict of violating indices; every list empty means valid.
    """
    X = grid.all_points()
    vals = v(X)
    report = {"origin": [], "positivity": [], "decrease": []}
    v0 = float(v(np.zeros((1, grid.ndim)))[0])
    if abs(v0) > tol:
        report["origin"].append(v0)
    nonzero = np.any(X != 0.0, axis=1)
    report["positivity"] = np.flatnonzero(nonzero & (vals <= 0.0)).tolist()
    if step is not None:
        nxt = step(X)
        inside = np.all((nxt >= grid.lower) & (nxt <= grid.upper), axis=1)
        bad = nonzero & inside & (v(nxt) >= vals - tol)
        report["decrease"] = np.flatnonzero(bad).tolist()
    return report


def write_certificate_csv(path, grid: Discretization, v_values, lower, upper, in_level, indices=None):
    """Certificate rows ``cell_index, x0.., v, l_n, u_n, in_level_set``."""
    idx = np.arange(grid.num_points) if indices is None else np.asarray(indices, dtype=int)
    X = grid.index_to_state(idx)
    header = ["cell_index"] + [f"x{i}" for i in range(grid.ndim)] + ["v", "l_n", "u_n", "in_level_set"]
    columns = [idx] + [X[:, i] for i in range(grid.ndim)]
    columns += [np.asarray(v_values, float), np.asarray(lower, float), np.asarray(upper, float)]
    columns.append(np.asarray(in_level, dtype=bool))
    write_columns(path, header, columns)


def format_column(col) -> list:
    """Strings for one CSV column: integers and flags as integers, floats
    rounded to 12 decimals in shortest round-trip form."""
    col = np.asarray(col)
    if col.dtype.kind in "biu":
        return [str(v) for v in col.astype(np.int64).tolist()]
    out = [repr(round(v, 12)) for v in col.astype(float).tolist()]
    for i in np.flatnonzero(np.isinf(col)).tolist():
        out[i] = "inf" if col[i] > 0 else "-inf"
    return out


def write_columns(path, header, columns) -> None:
    """Write equally long columns as an RFC-4180 CSV."""
    cols = [format_column(c) for c in columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(zip(*cols))

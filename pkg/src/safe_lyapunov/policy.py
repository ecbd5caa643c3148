"""Neural policy, piecewise-linear value function and the safety Lagrangian."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import product
from typing import Optional

import numpy as np
import scipy.ndimage
import scipy.sparse

from .lyapunov import Discretization

__all__ = [
    "NeuralPolicy",
    "policy_forward",
    "policy_lipschitz_bound",
    "PiecewiseLinearValue",
    "value_interpolate",
    "CostSpec",
    "adp_sweep",
    "adp_solve",
    "LagrangianTerms",
    "lagrangian_objective",
    "lagrangian_gradient",
    "sgd_update",
    "save_policy",
    "load_policy",
    "save_value",
    "load_value",
]


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NeuralPolicy:
    """ReLU network ``x -> u`` with an odd saturating output map.

    The output is ``a * tanh(z / a)`` per action dimension, where ``a`` is
    the action bound; its slope is at most one, so the saturation does not
    change the Lipschitz bound.
    """

    weights: tuple
    biases: tuple
    action_bound: np.ndarray

    @classmethod
    def random(cls, state_dim, action_dim, action_bound, hidden=(32, 32), rng=None, scale=0.1):
        rng = np.random.default_rng(rng)
        sizes = (state_dim,) + tuple(hidden) + (action_dim,)
        W = tuple(scale * rng.standard_normal((o, i)) for i, o in zip(sizes[:-1], sizes[1:]))
        b = tuple(np.zeros(o) for o in sizes[1:])
        return cls(W, b, np.broadcast_to(np.asarray(action_bound, float), (action_dim,)).copy())

    @classmethod
    def from_linear_gain(cls, K, action_bound, box_radius=1.0, hidden=(32, 32), rng=None, noise=1e-3):
        """Network whose output equals ``sat(-K x)`` on ``|x_i| <= box_radius``.

        The first hidden units compute ``relu(x_i + box_radius)``, which is
        affine on the box; the constant offset is undone in the output bias.
        The remaining units start with tiny weights and zero output weights,
        so the network computes the gain exactly; the layer-norm bound
        exceeds the gain norm only through those tiny weights.
        """
        K = np.atleast_2d(np.asarray(K, dtype=float))
        du, dx = K.shape
        h1, h2 = hidden
        if h1 < dx or h2 < dx:
            raise ValueError("hidden layers are too narrow to embed the gain")
        rng = np.random.default_rng(rng)
        W1 = noise * rng.standard_normal((h1, dx))
        W1[:dx] = np.eye(dx)
        b1 = np.zeros(h1)
        b1[:dx] = box_radius
        W2 = noise * rng.standard_normal((h2, h1))
        W2[:dx] = 0.0
        W2[:, :dx] = 0.0
        W2[:dx, :dx] = np.eye(dx)
        b2 = np.zeros(h2)
        W3 = np.zeros((du, h2))
        W3[:, :dx] = -K
        b3 = K @ np.full(dx, box_radius)
        bound = np.broadcast_to(np.asarray(action_bound, float), (du,)).copy()
        return cls((W1, W2, W3), (b1, b2, b3), bound)

    @property
    def state_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def action_dim(self) -> int:
        return self.weights[-1].shape[0]

    def __call__(self, X) -> np.ndarray:
        return policy_forward(self, X)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def with_flat(self, theta) -> "NeuralPolicy":
        theta = np.asarray(theta, dtype=float)
        W, b, k = [], [], 0
        for w0, b0 in zip(self.weights, self.biases):
            W.append(theta[k : k + w0.size].reshape(w0.shape))
            k += w0.size
            b.append(theta[k : k + b0.size].copy())
            k += b0.size
        return replace(self, weights=tuple(W), biases=tuple(b))

    def _forward(self, X):
        acts = [np.atleast_2d(np.asarray(X, dtype=float))]
        pre = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W.T + b
            pre.append(z)
            if i < len(self.weights) - 1:
                acts.append(np.maximum(z, 0.0))
        a = self.action_bound
        u = a * np.tanh(pre[-1] / a)
        return u, acts, pre

    def backward(self, X, grad_u) -> np.ndarray:
        """Vector-Jacobian product: flat gradient of ``sum(grad_u * u)``."""
        u, acts, pre = self._forward(X)
        a = self.action_bound
        delta = np.asarray(grad_u) * (1.0 - (u / a) ** 2)
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = delta.T @ acts[i]
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i]) * (pre[i - 1] > 0.0)
        return np.concatenate([p.ravel() for pair in zip(gW, gb) for p in pair])

    def jacobian(self, X) -> np.ndarray:
        """Input Jacobian ``du/dx`` with shape ``(n, d_u, d_x)``."""
        u, acts, pre = self._forward(X)
        a = self.action_bound
        J = self.weights[-1][None, :, :] * (1.0 - (u / a) ** 2)[:, :, None]
        for i in range(len(self.weights) - 2, -1, -1):
            J = (J * (pre[i] > 0.0)[:, None, :]) @ self.weights[i]
        return J


def _output(policy: NeuralPolicy, X) -> np.ndarray:
    # same arithmetic as NeuralPolicy._forward without keeping activations
    h = np.atleast_2d(X)
    last = len(policy.weights) - 1
    for i, (W, b) in enumerate(zip(policy.weights, policy.biases)):
        h = h @ W.T
        h += b
        if i < last:
            np.maximum(h, 0.0, out=h)
    a = policy.action_bound
    h /= a
    np.tanh(h, out=h)
    h *= a
    return h


def policy_forward(policy: NeuralPolicy, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2 and len(X) > _CHUNK:
        return np.concatenate([_output(policy, X[i : i + _CHUNK]) for i in range(0, len(X), _CHUNK)])
    u = _output(policy, X)
    return u[0] if X.ndim == 1 else u


_CHUNK = 8192


def _induced_one_norm(W) -> float:
    return float(np.abs(W).sum(axis=0).max()) if W.size else 0.0


def policy_lipschitz_bound(policy: NeuralPolicy) -> float:
    """Product of the per-layer induced 1-norms (maximum column sums)."""
    return float(np.prod([_induced_one_norm(W) for W in policy.weights]))


# ---------------------------------------------------------------------------
# piecewise-linear value function
# ---------------------------------------------------------------------------


class PiecewiseLinearValue:
    """Vertex values on a grid, interpolated on the Kuhn triangulation.

    Each grid cell with local coordinates ``t`` is split into the simplices
    ``t_{p1} >= t_{p2} >= ... >= t_{pd}`` for permutations ``p``.
    """

    def __init__(self, grid: Discretization, values=None):
        self.grid = grid
        n = grid.num_points
        self.values = np.zeros(n) if values is None else np.asarray(values, dtype=float).copy()
        if self.values.shape != (n,):
            raise ValueError(f"expected {n} vertex values, got {self.values.shape}")
        self._cell_bound = None
        self._pyramid = None

    def with_values(self, values) -> "PiecewiseLinearValue":
        return PiecewiseLinearValue(self.grid, values)

    def _locate(self, X):
        g = self.grid
        X = np.atleast_2d(np.asarray(X, dtype=float))
        clipped = np.clip(X, g.lower, g.upper)
        clamped = np.any(clipped != X, axis=1)
        pos = (clipped - g.lower) / g.spacing
        cell = np.clip(np.floor(pos).astype(int), 0, np.asarray(g.counts) - 2)
        t = np.clip(pos - cell, 0.0, 1.0)
        return cell, t, clamped

    def simplices(self, X):
        """Vertex indices ``(n, d+1)``, weights ``(n, d+1)``, axis order and clamp flags."""
        cell, t, clamped = self._locate(X)
        n, d = t.shape
        perm = np.argsort(-t, axis=1, kind="stable")
        ts = np.take_along_axis(t, perm, axis=1)
        weights = np.empty((n, d + 1))
        weights[:, 0] = 1.0 - ts[:, 0]
        if d > 1:
            weights[:, 1:d] = ts[:, :-1] - ts[:, 1:]
        weights[:, d] = ts[:, -1]
        corners = np.empty((n, d + 1, d), dtype=int)
        corners[:, 0] = cell
        rows = np.arange(n)
        cur = cell.copy()
        for k in range(d):
            cur = cur.copy()
            cur[rows, perm[:, k]] += 1
            corners[:, k + 1] = cur
        idx = self.grid.ravel(corners)
        return idx, weights, perm, clamped

    def evaluate(self, X) -> np.ndarray:
        idx, w, _, _ = self.simplices(X)
        return np.sum(self.values[idx] * w, axis=1)

    def __call__(self, X) -> np.ndarray:
        return self.evaluate(X)

    def gradient(self, X) -> np.ndarray:
        """Gradient of the active simplex (zero along clamped directions)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx, _, perm, _ = self.simplices(X)
        vals = self.values[idx]
        n, d = perm.shape
        grad = np.zeros((n, d))
        h = self.grid.spacing
        rows = np.arange(n)
        for k in range(d):
            ax = perm[:, k]
            grad[rows, ax] = (vals[:, k + 1] - vals[:, k]) / h[ax]
        outside = (X < self.grid.lower) | (X > self.grid.upper)
        grad[outside] = 0.0
        return grad

    def interpolation_matrix(self, X, outside_value_column=False):
        """Sparse matrix ``M`` with ``M @ values = evaluate(X)``."""
        idx, w, _, _ = self.simplices(X)
        n = idx.shape[0]
        rows = np.repeat(np.arange(n), idx.shape[1])
        return scipy.sparse.csr_matrix(
            (w.ravel(), (rows, idx.ravel())), shape=(n, self.grid.num_points)
        )

    def cell_gradient_bound(self) -> np.ndarray:
        """Per cell: the largest ``||grad||_inf`` over its Kuhn simplices.

        Every cube edge belongs to some Kuhn simplex and each simplex
        gradient component is an edge difference, so this is the maximum
        edge slope of the cell.
        """
        if self._cell_bound is None:
            g = self.grid
            V = self.values.reshape(g.counts)
            d = g.ndim
            bound = np.zeros(tuple(c - 1 for c in g.counts))
            for ax in range(d):
                slope = np.abs(np.diff(V, axis=ax)) / g.spacing[ax]
                # collapse the other axes: every edge touches the two
                # neighbouring cells along each remaining axis
                for other in range(d):
                    if other == ax:
                        continue
                    slope = np.maximum(
                        np.take(slope, range(0, slope.shape[other] - 1), axis=other),
                        np.take(slope, range(1, slope.shape[other]), axis=other),
                    )
                bound = np.maximum(bound, slope)
            self._cell_bound = bound
        return self._cell_bound

    def box_gradient_bound(self, X, half_width) -> np.ndarray:
        """Upper bound on the simplex gradient norm over ``X +- half_width``.

        Small boxes are scanned cell by cell, which is exact. Boxes spanning
        more than a few cells use max-filtered copies of the cell bounds with
        dyadic radii around the box centre, so the result may be loose by up
        to a factor of two in radius but is never below the exact value.
        """
        g = self.grid
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cb = self.cell_gradient_bound()
        top = np.asarray(g.counts) - 2
        lo = np.clip(np.floor((X - half_width - g.lower) / g.spacing).astype(int), 0, top)
        hi = np.clip(np.floor((X + half_width - g.lower) / g.spacing).astype(int), 0, top)
        out = np.zeros(len(X))
        if not len(X):
            return out
        span = (hi - lo).max(axis=1)
        small = span <= 2
        if np.any(small):
            ls, hs = lo[small], hi[small]
            acc = np.zeros(len(ls))
            for offs in product(range(3), repeat=g.ndim):
                c = np.minimum(ls + np.asarray(offs), hs)
                acc = np.maximum(acc, cb[tuple(c[:, i] for i in range(g.ndim))])
            out[small] = acc
        big = np.flatnonzero(~small)
        if big.size:
            centre = (lo[big] + hi[big]) // 2
            radius = np.max(hi[big] - centre, axis=1)
            level = np.ceil(np.log2(np.maximum(radius, 1))).astype(int)
            for k in np.unique(level):
                sel = level == k
                c = centre[sel]
                out[big[sel]] = self._dilated(int(k))[tuple(c[:, i] for i in range(g.ndim))]
        return out

    def _dilated(self, k: int) -> np.ndarray:
        if self._pyramid is None:
            self._pyramid = {}
        if k not in self._pyramid:
            size = 2 * (1 << k) + 1
            self._pyramid[k] = scipy.ndimage.maximum_filter(self.cell_gradient_bound(), size=size, mode="nearest")
        return self._pyramid[k]


def value_interpolate(V: PiecewiseLinearValue, x):
    """Value at one point with its simplex vertices and barycentric weights."""
    idx, w, _, clamped = V.simplices(np.atleast_2d(x))
    return float(np.dot(V.values[idx[0]], w[0])), idx[0], w[0], bool(clamped[0])


# ---------------------------------------------------------------------------
# cost and dynamic programming
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray
    gamma: float = 0.98
    lagrange: float = 1.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() <= 0 or np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
            raise ValueError("Q and R must be positive definite")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if self.lagrange < 0:
            raise ValueError("the Lagrange multiplier must be non-negative")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    def __call__(self, X, U) -> np.ndarray:
        X, U = np.atleast_2d(X), np.atleast_2d(U)
        return np.einsum("ni,ij,nj->n", X, self.Q, X) + np.einsum("ni,ij,nj->n", U, self.R, U)


def _successor_values(V: PiecewiseLinearValue, nxt):
    vals = V.evaluate(nxt)
    outside = np.any((nxt < V.grid.lower) | (nxt > V.grid.upper), axis=1)
    return np.where(outside, V.values.max(), vals)


def adp_sweep(V: PiecewiseLinearValue, policy, model_mean, cost: CostSpec):
    """One synchronous sweep ``J'(x) = r(x, pi(x)) + gamma J(mu(x, pi(x)))``.

    Successors that leave the grid are charged the largest vertex value.
    Returns the new value function and the max absolute change.
    """
    X = V.grid.all_points()
    U = np.atleast_2d(policy(X)).reshape(len(X), -1)
    nxt = model_mean(np.hstack([X, U]))
    new = cost(X, U) + cost.gamma * _successor_values(V, nxt)
    return V.with_values(new), float(np.max(np.abs(new - V.values)))


def adp_solve(V: PiecewiseLinearValue, policy, model_mean, cost: CostSpec, tol=1e-8, max_sweeps=5000):
    """Iterate :func:`adp_sweep` with a cached sparse transition matrix.

    Returns ``(V, residuals)``; the residual history is useful to check
    the contraction.
    """
    X = V.grid.all_points()
    U = np.atleast_2d(policy(X)).reshape(len(X), -1)
    nxt = model_mean(np.hstack([X, U]))
    outside = np.any((nxt < V.grid.lower) | (nxt > V.grid.upper), axis=1)
    M = V.interpolation_matrix(nxt)
    r = cost(X, U)
    J = V.values.copy()
    residuals = []
    for _ in range(int(max_sweeps)):
        succ = np.where(outside, J.max(), M @ J)
        new = r + cost.gamma * succ
        res = float(np.max(np.abs(new - J)))
        J = new
        residuals.append(res)
        if res < tol:
            break
    return V.with_values(J), residuals


# ---------------------------------------------------------------------------
# Lagrangian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LagrangianTerms:
    cost: float
    cost_to_go: float
    penalty: float
    violations: int

    @property
    def total(self) -> float:
        return self.cost + self.cost_to_go + self.penalty


def _lagrangian_parts(policy, J, v, model, X, cost, l_dv_tau, beta, L_v, with_grad):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = policy(X).reshape(len(X), -1)
    a = np.hstack([X, U])
    dx = X.shape[1]
    if with_grad:
        mean, dmean, sig, dsig = model.predict_with_grad(a)
    else:
        mean, sig, _ = model.predict(a)
    L_v = np.broadcast_to(np.asarray(L_v, dtype=float), (len(X),))
    l_dv_tau = np.broadcast_to(np.asarray(l_dv_tau, dtype=float), (len(X),))
    r = cost(X, U)
    jn = J.evaluate(mean)
    margin = v(mean) + L_v * beta * sig - v(X) + l_dv_tau
    terms = LagrangianTerms(
        float(r.sum()),
        float(cost.gamma * jn.sum()),
        float(cost.lagrange * margin.sum()),
        int(np.sum(margin >= 0.0)),
    )
    if not with_grad:
        return terms, None
    dmu_du = dmean[:, :, dx:]
    dsig_du = dsig[:, dx:]
    g_u = 2.0 * U @ cost.R
    g_u += cost.gamma * np.einsum("nq,nqk->nk", J.gradient(mean), dmu_du)
    g_u += cost.lagrange * (
        np.einsum("nq,nqk->nk", v.gradient(mean), dmu_du) + (L_v * beta)[:, None] * dsig_du
    )
    return terms, policy.backward(X, g_u)


def lagrangian_objective(policy, J, v, model, X, cost: CostSpec, l_dv_tau, beta: float, L_v) -> LagrangianTerms:
    """Safety Lagrangian summed over a batch of states.

    ``sum r(x, pi(x)) + gamma J(mu) + lambda (v(mu) + L_v beta sigma - v(x) + L_dv tau)``
    where ``mu, sigma`` are the model prediction at ``(x, pi(x))``. ``J``
    is the performance value and ``v`` the Lyapunov candidate.
    """
    return _lagrangian_parts(policy, J, v, model, X, cost, l_dv_tau, beta, L_v, False)[0]


def lagrangian_gradient(policy, J, v, model, X, cost: CostSpec, l_dv_tau, beta: float, L_v):
    """Objective terms and the flat gradient with respect to the weights."""
    return _lagrangian_parts(policy, J, v, model, X, cost, l_dv_tau, beta, L_v, True)


def sgd_update(policy: NeuralPolicy, grad, learning_rate: float):
    """Plain gradient step; returns ``(policy, skipped)``."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        return policy, True
    return policy.with_flat(policy.flat() - learning_rate * grad), False


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_policy(path, policy: NeuralPolicy) -> None:
    """Plain-text checkpoint.

    Line 1: ``shapes`` followed by ``rows x cols`` of each weight matrix.
    Line 2: ``action_bound`` values. Then one line per weight matrix
    (row-major) followed by its bias vector, comma separated.
    """
    with open(path, "w") as fh:
        fh.write("shapes " + " ".join(f"{W.shape[0]}x{W.shape[1]}" for W in policy.weights) + "\n")
        fh.write("action_bound " + ",".join(repr(float(a)) for a in policy.action_bound) + "\n")
        for W, b in zip(policy.weights, policy.biases):
            fh.write(",".join(repr(float(w)) for w in W.ravel()) + "\n")
            fh.write(",".join(repr(float(w)) for w in b) + "\n")


def load_policy(path) -> NeuralPolicy:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if head[0] != "shapes":
        raise ValueError(f"{path}: not a policy checkpoint")
    shapes = [tuple(int(s) for s in tok.split("x")) for tok in head[1:]]
    bound = np.array([float(s) for s in lines[1].split()[1].split(",")])
    if len(lines) != 2 + 2 * len(shapes):
        raise ValueError(f"{path}: expected {len(shapes)} layers")
    W, b = [], []
    for i, (r, c) in enumerate(shapes):
        w = np.array([float(s) for s in lines[2 + 2 * i].split(",")])
        bb = np.array([float(s) for s in lines[3 + 2 * i].split(",")])
        if w.size != r * c or bb.size != r:
            raise ValueError(f"{path}: layer {i} does not match its declared shape")
        W.append(w.reshape(r, c))
        b.append(bb)
    return NeuralPolicy(tuple(W), tuple(b), bound)


def save_value(path, V: PiecewiseLinearValue) -> None:
    """Vertex CSV: ``vertex, x0.., value`` with the grid in the header comment."""
    g = V.grid
    X = g.all_points()
    with open(path, "w") as fh:
        fh.write(
            "# grid "
            + " ".join(f"{float(lo)!r}:{float(hi)!r}:{n}" for lo, hi, n in zip(g.lower, g.upper, g.counts))
            + "\n"
        )
        fh.write("vertex," + ",".join(f"x{i}" for i in range(g.ndim)) + ",value\n")
        for i in range(g.num_points):
            fh.write(f"{i}," + ",".join(repr(float(c)) for c in X[i]) + f",{float(V.values[i])!r}\n")


def load_value(path) -> PiecewiseLinearValue:
    from .lyapunov import build_grid

    with open(path) as fh:
        head = fh.readline().split()
        if head[:2] != ["#", "grid"]:
            raise ValueError(f"{path}: missing grid header")
        specs = [tok.split(":") for tok in head[2:]]
        grid = build_grid([(float(a), float(b)) for a, b, _ in specs], [int(n) for _, _, n in specs])
        fh.readline()
        vals = np.array([float(line.rsplit(",", 1)[1]) for line in fh if line.strip()])
    return PiecewiseLinearValue(grid, vals)

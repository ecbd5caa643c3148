"""Gaussian-process model of the dynamics error.

The dynamics are split as ``f(x, u) = h(x, u) + g(x, u)`` where ``h`` is a known
prior model and ``g`` is modelled by independent single-output GPs, one per
state dimension, that share their inputs ``a = (x, u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg

__all__ = [
    "Linear",
    "Matern32",
    "Sum",
    "Product",
    "kernel_eval",
    "gram_matrix",
    "ObservationSet",
    "LinearPriorMean",
    "PosteriorDynamicsModel",
    "fit_posterior",
    "FixedBeta",
    "TheoreticalBeta",
    "beta",
    "info_capacity_greedy",
    "NumericalError",
]

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


_CHUNK = 8192


class NumericalError(ArithmeticError):
    """Raised when a kernel matrix cannot be factorized."""


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    return a


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


class Kernel:
    """Base class; subclasses implement ``__call__``, ``diag`` and ``grad``.

    ``grad(A, B)`` returns the derivative of ``k(a_i, b_j)`` with respect to
    ``a_i`` with shape ``(len(A), len(B), d)``.
    """

    input_dim: int

    def __add__(self, other: "Kernel") -> "Sum":
        return Sum((self, other))

    def __mul__(self, other: "Kernel") -> "Product":
        return Product((self, other))

    def _check(self, A: np.ndarray) -> None:
        if A.shape[-1] != self.input_dim:
            raise ValueError(
                f"kernel expects inputs of dimension {self.input_dim}, got {A.shape[-1]}"
            )


@dataclass(frozen=True, eq=False)
class Linear(Kernel):
    """``k(a, b) = sum_i w_i a_i b_i`` with per-dimension variance weights."""

    variances: tuple

    def __post_init__(self):
        w = np.asarray(self.variances, dtype=float)
        if w.ndim != 1 or np.any(w <= 0):
            raise ValueError("linear kernel variances must be strictly positive")
        object.__setattr__(self, "variances", tuple(w))

    @property
    def input_dim(self) -> int:
        return len(self.variances)

    def __call__(self, A, B) -> np.ndarray:
        A, B = _as_points(A), _as_points(B)
        self._check(A)
        self._check(B)
        return (A * np.asarray(self.variances)) @ B.T

    def diag(self, A) -> np.ndarray:
        A = _as_points(A)
        return np.sum(A * A * np.asarray(self.variances), axis=1)

    def grad(self, A, B) -> np.ndarray:
        A, B = _as_points(A), _as_points(B)
        w = np.asarray(self.variances)
        return np.broadcast_to(B * w, (A.shape[0],) + B.shape).copy()

    def diag_grad(self, A) -> np.ndarray:
        return 2.0 * _as_points(A) * np.asarray(self.variances)


@dataclass(frozen=True, eq=False)
class Matern32(Kernel):
    """Matern-3/2 kernel with per-dimension lengthscales.

    ``k(r) = s (1 + sqrt(3) r) exp(-sqrt(3) r)`` where ``r`` is the
    lengthscale-weighted Euclidean distance and ``s`` the signal variance.
    """

    lengthscales: tuple
    variance: float = 1.0

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        if ls.ndim != 1 or np.any(ls <= 0) or not self.variance > 0:
            raise ValueError("Matern32 hyperparameters must be strictly positive")
        object.__setattr__(self, "lengthscales", tuple(ls))

    @property
    def input_dim(self) -> int:
        return len(self.lengthscales)

    def _scaled_distance(self, A, B):
        ls = np.asarray(self.lengthscales)
        A, B = A / ls, B / ls
        sq = A @ B.T
        sq *= -2.0
        sq += np.sum(A * A, axis=1)[:, None]
        sq += np.sum(B * B, axis=1)[None, :]
        np.maximum(sq, 0.0, out=sq)
        return np.sqrt(sq, out=sq)

    def __call__(self, A, B) -> np.ndarray:
        A, B = _as_points(A), _as_points(B)
        self._check(A)
        self._check(B)
        r = self._scaled_distance(A, B)
        r *= math.sqrt(3.0)
        e = np.negative(r)
        np.exp(e, out=e)
        r += 1.0
        r *= e
        r *= self.variance
        return r

    def diag(self, A) -> np.ndarray:
        return np.full(_as_points(A).shape[0], float(self.variance))

    def grad(self, A, B) -> np.ndarray:
        # dk/da = -3 s exp(-sqrt(3) r) (a - b) / l^2, smooth at r = 0
        A, B = _as_points(A), _as_points(B)
        ls2 = np.asarray(self.lengthscales) ** 2
        r = math.sqrt(3.0) * self._scaled_distance(A, B)
        diff = (A[:, None, :] - B[None, :, :]) / ls2
        return -3.0 * self.variance * np.exp(-r)[:, :, None] * diff

    def diag_grad(self, A) -> np.ndarray:
        return np.zeros_like(_as_points(A))


@dataclass(frozen=True, eq=False)
class Sum(Kernel):
    kernels: tuple

    def __post_init__(self):
        dims = {k.input_dim for k in self.kernels}
        if len(dims) != 1:
            raise ValueError("summed kernels must share the input dimension")
        object.__setattr__(self, "kernels", tuple(self.kernels))

    @property
    def input_dim(self) -> int:
        return self.kernels[0].input_dim

    def __call__(self, A, B):
        return sum(k(A, B) for k in self.kernels)

    def diag(self, A):
        return sum(k.diag(A) for k in self.kernels)

    def grad(self, A, B):
        return sum(k.grad(A, B) for k in self.kernels)

    def diag_grad(self, A):
        return sum(k.diag_grad(A) for k in self.kernels)


@dataclass(frozen=True, eq=False)
class Product(Kernel):
    kernels: tuple

    def __post_init__(self):
        dims = {k.input_dim for k in self.kernels}
        if len(dims) != 1:
            raise ValueError("multiplied kernels must share the input dimension")
        object.__setattr__(self, "kernels", tuple(self.kernels))

    @property
    def input_dim(self) -> int:
        return self.kernels[0].input_dim

    def __call__(self, A, B):
        out = self.kernels[0](A, B)
        for k in self.kernels[1:]:
            out = out * k(A, B)
        return out

    def diag(self, A):
        out = self.kernels[0].diag(A)
        for k in self.kernels[1:]:
            out = out * k.diag(A)
        return out

    def grad(self, A, B):
        values = [k(A, B) for k in self.kernels]
        grads = [k.grad(A, B) for k in self.kernels]
        total = 0.0
        for i, g in enumerate(grads):
            rest = np.ones_like(values[0])
            for j, v in enumerate(values):
                if j != i:
                    rest = rest * v
            total = total + g * rest[:, :, None]
        return total

    def diag_grad(self, A):
        values = [k.diag(A) for k in self.kernels]
        grads = [k.diag_grad(A) for k in self.kernels]
        total = 0.0
        for i, g in enumerate(grads):
            rest = np.ones_like(values[0])
            for j, v in enumerate(values):
                if j != i:
                    rest = rest * v
            total = total + g * rest[:, None]
        return total


def kernel_eval(spec: Kernel, a, b) -> float:
    """Evaluate the kernel at a single pair of input points."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"input dimensions differ: {a.shape} vs {b.shape}")
    return float(spec(a[None, :], b[None, :])[0, 0])


def gram_matrix(spec: Kernel, points) -> np.ndarray:
    points = _as_points(points)
    if points.shape[0] == 0:
        raise ValueError("gram_matrix needs at least one point")
    K = spec(points, points)
    return 0.5 * (K + K.T)


# ---------------------------------------------------------------------------
# data and prior mean
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearPriorMean:
    """Prior dynamics ``h(x, u) = A x + B u`` on concatenated inputs."""

    A: np.ndarray
    B: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    def __call__(self, a) -> np.ndarray:
        a = _as_points(a)
        n = self.state_dim
        return a[:, :n] @ self.A.T + a[:, n:] @ self.B.T

    def jacobian(self, a) -> np.ndarray:
        a = _as_points(a)
        J = np.hstack([self.A, self.B])
        return np.broadcast_to(J, (a.shape[0],) + J.shape)

    def lipschitz(self) -> float:
        """Induced 1-norm of ``[A B]`` (maximum absolute column sum)."""
        return float(np.abs(np.hstack([self.A, self.B])).sum(axis=0).max())


@dataclass(frozen=True)
class ObservationSet:
    """Inputs ``a_i = (x_i, u_i)`` with residual targets ``y_i - h(a_i)``."""

    inputs: np.ndarray
    residual_targets: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        Y = np.asarray(self.residual_targets, dtype=float)
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("inputs and residual_targets must be 2-D arrays")
        if X.shape[0] != Y.shape[0]:
            raise ValueError("inputs and targets must have equal length")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "residual_targets", Y)

    @classmethod
    def empty(cls, input_dim: int, output_dim: int, noise_sigma: float):
        return cls(np.zeros((0, input_dim)), np.zeros((0, output_dim)), noise_sigma)

    @classmethod
    def from_transitions(cls, prior_mean, inputs, next_states, noise_sigma):
        """Build residual targets from measured next states."""
        inputs = _as_points(inputs)
        next_states = _as_points(next_states)
        return cls(inputs, next_states - prior_mean(inputs), noise_sigma)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def append(self, a, measured_next, prior_mean) -> "ObservationSet":
        a = _as_points(a)
        resid = _as_points(measured_next) - prior_mean(a)
        return ObservationSet(
            np.vstack([self.inputs, a]),
            np.vstack([self.residual_targets, resid]),
            self.noise_sigma,
        )


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------


def _factorize(K: np.ndarray, noise_var: float):
    n = K.shape[0]
    eye = np.eye(n)
    for jitter in _JITTERS:
        try:
            return scipy.linalg.cholesky(K + (noise_var + jitter) * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
    min_eig = float(np.linalg.eigvalsh(K + noise_var * eye).min())
    raise NumericalError(
        f"kernel matrix is not positive definite (minimum eigenvalue {min_eig:.3e})"
    )


@dataclass(frozen=True, eq=False)
class PosteriorDynamicsModel:
    """Fitted GP posterior; immutable, use :func:`fit_posterior` to refit."""

    prior_mean: Callable
    kernel: Kernel
    observations: ObservationSet
    output_dim: int
    _chol: np.ndarray = field(repr=False)
    _alpha: np.ndarray = field(repr=False)
    _chol_inv: np.ndarray = field(default=None, repr=False)  # L^-1, for batched variances

    @property
    def noise_sigma(self) -> float:
        return self.observations.noise_sigma

    @property
    def num_data(self) -> int:
        return len(self.observations)

    def predict(self, a):
        """Posterior mean and standard deviations.

        Returns ``(mean, sigma_sum, per_dim_sigma)`` with shapes ``(n, q)``,
        ``(n,)`` and ``(n, q)``. ``sigma_sum`` is the sum of the per-output
        standard deviations, which bounds the 1-norm prediction error.
        """
        a = _as_points(a)
        if len(a) > _CHUNK:  # row blocks keep the kernel matrices in cache
            parts = [self.predict(a[i : i + _CHUNK]) for i in range(0, len(a), _CHUNK)]
            return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
        mean = np.array(self.prior_mean(a), dtype=float)
        prior_var = self.kernel.diag(a)
        if self.num_data == 0:
            var = prior_var
        else:
            Ks = self.kernel(a, self.observations.inputs)
            mean = mean + Ks @ self._alpha
            V = Ks @ self._chol_inv.T
            V *= V
            var = prior_var - V.sum(axis=1)
        std = np.sqrt(np.maximum(var, 0.0))
        per_dim = np.repeat(std[:, None], self.output_dim, axis=1)
        return mean, per_dim.sum(axis=1), per_dim

    def predict_with_grad(self, a):
        """Like :meth:`predict` but also returns input gradients.

        Returns ``(mean, dmean, sigma_sum, dsigma_sum)`` with ``dmean`` of
        shape ``(n, q, d)`` and ``dsigma_sum`` of shape ``(n, d)``.
        """
        a = _as_points(a)
        if not hasattr(self.prior_mean, "jacobian"):
            raise TypeError("prior mean does not provide a jacobian")
        mean = np.array(self.prior_mean(a), dtype=float)
        dmean = np.array(self.prior_mean.jacobian(a), dtype=float)
        var = self.kernel.diag(a)
        dvar = self.kernel.diag_grad(a)
        if self.num_data > 0:
            X = self.observations.inputs
            Ks = self.kernel(a, X)
            dK = self.kernel.grad(a, X)  # (n, m, d)
            mean = mean + Ks @ self._alpha
            dmean = dmean + np.einsum("nmd,mq->nqd", dK, self._alpha)
            V = scipy.linalg.solve_triangular(self._chol, Ks.T, lower=True)
            W = scipy.linalg.solve_triangular(self._chol.T, V, lower=False)  # K^-1 k
            var = var - np.sum(V * V, axis=0)
            dvar = dvar - 2.0 * np.einsum("nmd,mn->nd", dK, W)
        std = np.sqrt(np.maximum(var, 0.0))
        safe = np.where(std > 1e-12, std, np.inf)
        dstd = dvar / (2.0 * safe[:, None])
        q = self.output_dim
        return mean, dmean, q * std, q * dstd

    def lipschitz_mean_bound(self) -> float:
        """Crude bound on the 1-norm Lipschitz constant of the residual mean."""
        if self.num_data == 0:
            return 0.0
        return float(np.abs(self._alpha).sum())

    def add_observation(self, a, measured_next) -> "PosteriorDynamicsModel":
        obs = self.observations.append(a, measured_next, self.prior_mean)
        return fit_posterior(self.prior_mean, self.kernel, obs)


def fit_posterior(prior_mean, spec: Kernel, obs: ObservationSet, output_dim=None):
    """Condition the GP on residual observations.

    The symmetric factorization of ``K + sigma^2 I`` escalates jitter from
    1e-10 up to 1e-6 before giving up with :class:`NumericalError`.
    """
    q = obs.residual_targets.shape[1] if output_dim is None else int(output_dim)
    if q < 1:
        raise ValueError("output dimension must be at least one")
    n = len(obs)
    if n == 0:
        chol = np.zeros((0, 0))
        alpha = np.zeros((0, q))
    else:
        K = gram_matrix(spec, obs.inputs)
        chol = _factorize(K, obs.noise_sigma**2)
        alpha = scipy.linalg.cho_solve((chol, True), obs.residual_targets)
    chol_inv = scipy.linalg.solve_triangular(chol, np.eye(n), lower=True) if n else chol
    return PosteriorDynamicsModel(prior_mean, spec, obs, q, chol, alpha, chol_inv)


# ---------------------------------------------------------------------------
# confidence scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedBeta:
    beta: float = 2.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class TheoreticalBeta:
    """RKHS-norm based scaling ``B + 4 sigma sqrt(gamma + 1 + ln(1/delta))``."""

    rkhs_bound: float
    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.rkhs_bound < 0:
            raise ValueError("rkhs_bound must be non-negative")


ConfidenceScale = Union[FixedBeta, TheoreticalBeta]


def beta(scale: ConfidenceScale, gamma_n: float = 0.0, noise_sigma: float = 0.0) -> float:
    if isinstance(scale, FixedBeta):
        return float(scale.beta)
    if gamma_n < 0:
        raise ValueError("information capacity must be non-negative")
    return float(
        scale.rkhs_bound
        + 4.0 * noise_sigma * math.sqrt(gamma_n + 1.0 + math.log(1.0 / scale.delta))
    )


def info_capacity_greedy(spec: Kernel, candidates, budget: int, noise_sigma: float) -> float:
    """Greedy lower estimate of the information capacity.

    Repeatedly picks the candidate with the largest posterior variance (without
    replacement) and accumulates ``0.5 * log(1 + var / noise^2)``; by
    submodularity this is within a factor ``1 - 1/e`` of the best subset.
    """
    C = _as_points(candidates)
    if C.shape[0] == 0:
        raise ValueError("info_capacity_greedy needs candidates")
    budget = int(budget)
    if budget < 0 or budget > C.shape[0]:
        raise ValueError("budget must lie between 0 and the number of candidates")
    noise_var = noise_sigma**2
    var = np.array(spec.diag(C), dtype=float)
    # rows of `proj` hold k_{t-1}(c, a_t) / sqrt(var_t + noise) for chosen a_t
    proj = np.zeros((0, C.shape[0]))
    chosen = np.zeros(C.shape[0], dtype=bool)
    total = 0.0
    for _ in range(budget):
        masked = np.where(chosen, -np.inf, var)
        j = int(np.argmax(masked))
        vj = max(var[j], 0.0)
        total += 0.5 * math.log1p(vj / noise_var)
        cov = spec(C, C[j : j + 1])[:, 0] - proj.T @ proj[:, j]
        row = cov / math.sqrt(vj + noise_var)
        proj = np.vstack([proj, row])
        var = var - row**2
        chosen[j] = True
    return total

"""Exact GP regression of a vector disturbance with a deterministic error bound.

One squared-exponential kernel is shared by every output dimension, so a
single Cholesky factor of ``K + sigma_v^2 I`` serves all of them; the RKHS
bounds ``B_i`` and the resulting ``beta_i`` stay per dimension.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

VAR_CLAMP_WARN = 1e-12


class DegenerateDataError(np.linalg.LinAlgError):
    """Regularized Gram matrix is not numerically positive definite."""


class InvalidBoundError(ValueError):
    """Some beta_i <= 0: the supplied RKHS bound is too small for the data."""


@dataclass(frozen=True)
class KernelSpec:
    lengthscale: float = 1.0
    kind: str = "se"

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if self.kind != "se":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")

    def matrix(self, X1, X2) -> np.ndarray:
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        X2 = np.atleast_2d(np.asarray(X2, dtype=float))
        if X1.shape[1] != X2.shape[1]:
            raise ValueError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
        d2 = cdist(X1, X2, "sqeuclidean")
        return np.exp(-0.5 * d2 / self.lengthscale**2)

    def diag(self, X) -> np.ndarray:
        # k(x, x) = 1 for the squared-exponential kernel
        return np.ones(np.atleast_2d(X).shape[0])


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    diff = x - x2
    return math.exp(-float(diff @ diff) / (2.0 * spec.lengthscale**2))


@dataclass(frozen=True)
class Dataset:
    """Noisy disturbance samples ``y = d(x) + v`` with ``|v|_inf <= noise_bound``."""

    inputs: np.ndarray
    targets: np.ndarray
    noise_bound: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        Y = np.asarray(self.targets, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1) if Y.size else Y.reshape(0, 0)
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
        if self.noise_bound < 0:
            raise ValueError("noise_bound must be nonnegative")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    @property
    def M(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def empty(cls, n_in: int, n_out: int, noise_bound: float = 0.0) -> "Dataset":
        return cls(np.zeros((0, n_in)), np.zeros((0, n_out)), noise_bound)


def save_dataset(data: Dataset, path) -> None:
    """Write ``x_1..x_n,y_1..y_n`` CSV; ``repr`` keeps floats round-trippable."""
    n_in, n_out = data.inputs.shape[1], data.targets.shape[1]
    header = [f"x_{i + 1}" for i in range(n_in)] + [f"y_{i + 1}" for i in range(n_out)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(data.inputs, data.targets):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])


def load_dataset(path, noise_bound: float = 0.0) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
    arr = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
    return Dataset(arr[:, xcols], arr[:, ycols], noise_bound)


@dataclass(frozen=True, eq=False)
class GPModel:
    """Trained regressor; immutable after :func:`fit`.

    ``chol`` is the lower factor of ``K_D + sigma_v^2 I`` (shared by all output
    dimensions), ``weights[:, i]`` the solve against ``y_{D,i}``.
    """

    data: Dataset
    kernel: KernelSpec
    rkhs_bounds: np.ndarray
    chol: np.ndarray
    weights: np.ndarray
    beta: np.ndarray
    jitter: float = 0.0

    @property
    def n_in(self) -> int:
        return self.data.inputs.shape[1]

    @property
    def n_out(self) -> int:
        return self.data.targets.shape[1]

    @property
    def M(self) -> int:
        return self.data.M

    def mean(self, x) -> np.ndarray:
        return posterior_mean(self, x)

    def var(self, x) -> np.ndarray:
        return posterior_var(self, x)

    def predict(self, X):
        """Batch posterior: means ``(N, n_out)`` and shared variances ``(N,)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        prior = self.kernel.diag(X)
        if self.M == 0:
            return np.zeros((X.shape[0], self.n_out)), prior
        Ks = self.kernel.matrix(self.data.inputs, X)
        mu = Ks.T @ self.weights
        v = solve_triangular(self.chol, Ks, lower=True, check_finite=False)
        var = prior - np.einsum("ij,ij->j", v, v)
        return mu, _clamp_var(var)


def _clamp_var(var):
    if np.any(var < -VAR_CLAMP_WARN):
        logger.warning("posterior variance %.3e below zero; clamping", float(np.min(var)))
    return np.maximum(var, 0.0)


def _cholesky(A: np.ndarray, allow_jitter: bool):
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        if not allow_jitter:
            raise DegenerateDataError("regularized Gram matrix is not positive definite")
    jitter = 1e-10
    eye = np.eye(A.shape[0])
    while jitter <= 1e-6:
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise DegenerateDataError("Gram matrix singular even with 1e-6 jitter")


def fit(data: Dataset, spec: KernelSpec, B) -> GPModel:
    n_out = data.targets.shape[1]
    B = np.broadcast_to(np.asarray(B, dtype=float), (n_out,)).copy()
    if np.any(B <= 0):
        raise ValueError("RKHS bounds must be positive")
    M = data.M
    if M == 0:
        chol = np.zeros((0, 0))
        weights = np.zeros((0, n_out))
        beta = B**2
        jitter = 0.0
    else:
        A = spec.matrix(data.inputs, data.inputs) + data.noise_bound**2 * np.eye(M)
        chol, jitter = _cholesky(A, allow_jitter=data.noise_bound == 0)
        if jitter:
            logger.warning("noise-free data: added %.0e jitter to the Gram matrix", jitter)
        weights = cho_solve((chol, True), data.targets, check_finite=False)
        quad = np.einsum("mi,mi->i", data.targets, weights)
        beta = B**2 - quad + M
    if np.any(beta <= 0):
        logger.warning("beta <= 0 for dims %s: RKHS bound B too small", np.flatnonzero(beta <= 0))
    for arr in (chol, weights, beta, B):
        arr.setflags(write=False)
    return GPModel(data, spec, B, chol, weights, beta, jitter)


def posterior_mean(model: GPModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.n_in:
        raise ValueError(f"expected {model.n_in}-vector, got {x.size}")
    if model.M == 0:
        return np.zeros(model.n_out)
    k = model.kernel.matrix(model.data.inputs, x[None, :])[:, 0]
    return k @ model.weights


def posterior_var(model: GPModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.n_in:
        raise ValueError(f"expected {model.n_in}-vector, got {x.size}")
    prior = model.kernel.diag(x[None, :])[0]
    if model.M == 0:
        return np.full(model.n_out, prior)
    k = model.kernel.matrix(model.data.inputs, x[None, :])[:, 0]
    v = solve_triangular(model.chol, k, lower=True, check_finite=False)
    var = _clamp_var(np.array([prior - v @ v]))[0]
    return np.full(model.n_out, var)


def _check_beta(model: GPModel):
    if np.any(model.beta <= 0):
        raise InvalidBoundError(
            f"beta = {model.beta}; RKHS bound B = {model.rkhs_bounds} too small for the data"
        )


def error_bound_pointwise(model: GPModel, x) -> float:
    """eta(x) = sqrt(sum_i beta_i sigma_i^2(x)), bounding |mu(x) - d(x)|."""
    _check_beta(model)
    return math.sqrt(float(model.beta @ posterior_var(model, x)))


def error_bound_batch(model: GPModel, X) -> np.ndarray:
    _check_beta(model)
    _, var = model.predict(X)
    return np.sqrt(var * model.beta.sum())


@dataclass(frozen=True)
class ErrorBound:
    pointwise: Callable[[np.ndarray], float] = field(repr=False)
    eta_bar_D: float
    eta_bar: float


def error_bound_global(model: GPModel, grid) -> ErrorBound:
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("empty grid")
    eta_bar_D = float(np.max(error_bound_batch(model, grid)))
    kmax = float(np.max(model.kernel.diag(grid)))
    eta_bar = math.sqrt(float(np.sum(model.rkhs_bounds**2 + model.M)) * kmax)
    return ErrorBound(lambda x: error_bound_pointwise(model, x), eta_bar_D, eta_bar)


def synth_rkhs_function(spec: KernelSpec, centers, coeffs):
    """Kernel expansion ``d(x) = sum_j c_j k(x, z_j)`` and its exact RKHS norm."""
    Z = np.atleast_2d(np.asarray(centers, dtype=float))
    c = np.asarray(coeffs, dtype=float).ravel()
    if c.size != Z.shape[0]:
        raise ValueError("one coefficient per center required")
    Kz = spec.matrix(Z, Z)
    norm = math.sqrt(max(float(c @ Kz @ c), 0.0))

    def d(x):
        X = np.asarray(x, dtype=float)
        vals = spec.matrix(Z, np.atleast_2d(X)).T @ c
        return float(vals[0]) if X.ndim == 1 else vals

    return d, norm


class ExactDisturbance:
    """Stand-in for a GP whose mean is the true disturbance (zero error)."""

    def __init__(self, d: Callable[[np.ndarray], np.ndarray]):
        self._d = d

    def mean(self, x) -> np.ndarray:
        return np.asarray(self._d(np.asarray(x, dtype=float)), dtype=float)


def latin_hypercube(lower: Sequence[float], upper: Sequence[float], count: int, rng) -> np.ndarray:
    from scipy.stats import qmc

    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if count == 0:
        return np.zeros((0, lower.size))
    sampler = qmc.LatinHypercube(d=lower.size, seed=rng)
    return lower + sampler.random(count) * (upper - lower)

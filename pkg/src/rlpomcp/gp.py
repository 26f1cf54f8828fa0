"""Gaussian-process belief over sensed locations.

The model is immutable: :meth:`GpModel.condition` returns a new model whose
Cholesky factor is the old one extended by the new rows, so an episode pays
O(n^2) per added sample instead of refactoring from scratch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NumericalFailure(ArithmeticError):
    """Raised when a Cholesky extension cannot be made positive definite."""


@dataclass(frozen=True)
class KernelHyper:
    """Squared-exponential kernel hyperparameters (world units)."""

    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-4
    prior_mean: float = 0.0

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")

    @classmethod
    def for_extent(cls, longest_axis: float, fraction: float = 0.12, **kw) -> "KernelHyper":
        """Default hyperparameters with lengthscale a fraction of the world size."""
        return cls(lengthscale=fraction * float(longest_axis), **kw)


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float


def kernel_eval(a, b, h: KernelHyper) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return h.signal_variance * float(np.exp(-float(d @ d) / (2.0 * h.lengthscale**2)))


def kernel_matrix(A: np.ndarray, B: np.ndarray, lengthscale: float, signal_variance: float) -> np.ndarray:
    """Dense squared-exponential covariance between row sets ``A`` and ``B``."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    sq = (
        np.einsum("ij,ij->i", A, A)[:, None]
        + np.einsum("ij,ij->i", B, B)[None, :]
        - 2.0 * A @ B.T
    )
    np.maximum(sq, 0.0, out=sq)
    return signal_variance * np.exp(-sq / (2.0 * lengthscale**2))


def _chol_with_jitter(S: np.ndarray) -> np.ndarray:
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(S + jitter * np.eye(len(S)))
        except np.linalg.LinAlgError:
            continue
    raise NumericalFailure(
        "covariance extension is not positive definite after jitter escalation "
        "(near-duplicate sample locations?)"
    )


class GpModel:
    """Conditioned GP over 3-D locations.

    Coordinates are shifted and divided by a single ``scale`` before the
    kernel is applied; the lengthscale is rescaled the same way, so kernel
    values are unchanged and the factor stays well conditioned for any
    world size.
    """

    def __init__(self, hyper: KernelHyper, origin=(0.0, 0.0, 0.0), scale: float = 1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.hyper = hyper
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.scale = float(scale)
        self._ls = hyper.lengthscale / self.scale
        self._X = np.zeros((0, 3))
        self._y = np.zeros(0)
        self._L = np.zeros((0, 0))
        self._beta = np.zeros(0)  # L^{-1} (y - prior_mean)
        self._alpha = np.zeros(0)  # (K + noise I)^{-1} (y - prior_mean)

    @classmethod
    def for_bounds(cls, hyper: KernelHyper, lo, hi) -> "GpModel":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(hyper, origin=lo, scale=max(float(np.max(hi - lo)), 1e-12))

    # -- accessors -------------------------------------------------------

    def __len__(self) -> int:
        return len(self._y)

    @property
    def locations(self) -> np.ndarray:
        return self._X * self.scale + self.origin

    @property
    def values(self) -> np.ndarray:
        return self._y.copy()

    @property
    def factor(self) -> np.ndarray:
        return self._L.copy()

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha.copy()

    @property
    def beta(self) -> np.ndarray:
        return self._beta.copy()

    def normalize(self, pts) -> np.ndarray:
        return (np.atleast_2d(np.asarray(pts, dtype=float)) - self.origin) / self.scale

    def kernel(self, A_norm: np.ndarray, B_norm: np.ndarray) -> np.ndarray:
        """Kernel between already-normalized point sets."""
        return kernel_matrix(A_norm, B_norm, self._ls, self.hyper.signal_variance)

    # -- conditioning ----------------------------------------------------

    def _derived(self, X, y, L, beta) -> "GpModel":
        out = GpModel.__new__(GpModel)
        out.hyper = self.hyper
        out.origin = self.origin
        out.scale = self.scale
        out._ls = self._ls
        out._X = X
        out._y = y
        out._L = L
        out._beta = beta
        out._alpha = solve_triangular(L, beta, lower=True, trans="T") if len(y) else np.zeros(0)
        return out

    def condition(self, new_samples: Iterable[tuple[Sequence[float], float]]) -> "GpModel":
        samples = list(new_samples)
        if not samples:
            return self
        Xn = self.normalize([s[0] for s in samples])
        yn = np.array([float(s[1]) for s in samples])
        n, m = len(self._y), len(yn)
        K22 = self.kernel(Xn, Xn) + self.hyper.noise_variance * np.eye(m)
        resid_new = yn - self.hyper.prior_mean
        L = np.zeros((n + m, n + m))
        L[:n, :n] = self._L
        if n:
            K12 = self.kernel(self._X, Xn)
            W = solve_triangular(self._L, K12, lower=True)  # n x m
            L22 = _chol_with_jitter(K22 - W.T @ W)
            L[n:, :n] = W.T
            beta_new = solve_triangular(L22, resid_new - W.T @ self._beta, lower=True)
        else:
            L22 = _chol_with_jitter(K22)
            beta_new = solve_triangular(L22, resid_new, lower=True)
        L[n:, n:] = L22
        return self._derived(
            np.vstack([self._X, Xn]),
            np.concatenate([self._y, yn]),
            L,
            np.concatenate([self._beta, beta_new]),
        )

    def refactor(self) -> np.ndarray:
        """Batch Cholesky of the full kernel matrix (reference for the incremental factor)."""
        n = len(self._y)
        if n == 0:
            return np.zeros((0, 0))
        K = self.kernel(self._X, self._X) + self.hyper.noise_variance * np.eye(n)
        return np.linalg.cholesky(K)

    # -- prediction ------------------------------------------------------

    def predict_many(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent variance at each row of ``queries``."""
        Q = self.normalize(queries)
        h = self.hyper
        if len(self._y) == 0:
            return np.full(len(Q), h.prior_mean), np.full(len(Q), h.signal_variance)
        Ks = self.kernel(self._X, Q)
        V = solve_triangular(self._L, Ks, lower=True)
        mean = h.prior_mean + V.T @ self._beta
        var = h.signal_variance - np.einsum("ij,ij->j", V, V)
        return mean, np.maximum(var, 0.0)

    def predict(self, query) -> Prediction:
        mean, var = self.predict_many(np.asarray(query, dtype=float).reshape(1, 3))
        return Prediction(float(mean[0]), float(var[0]))


def condition(model: GpModel, new_samples) -> GpModel:
    return model.condition(new_samples)


def predict(model: GpModel, query) -> Prediction:
    return model.predict(query)

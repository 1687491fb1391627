"""Singular value thresholding and nuclear-norm regularized matrix completion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class InvalidMaskError(ValueError):
    """Raised when an observation mask is inconsistent with its data."""


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ObservedMatrix:
    """Data matrix with an observation mask.

    Samples are columns (``values`` is m x n). Unobserved cells of
    ``values`` are stored as exact zeros; use :meth:`from_arrays` to build one
    from arbitrary data where the unobserved entries may hold anything
    (including NaN).
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2:
            raise InvalidMaskError("values must be a 2-D array")
        if values.shape != mask.shape:
            raise InvalidMaskError(
                f"mask shape {mask.shape} differs from values shape {values.shape}")
        if np.any(values[~mask] != 0):
            raise InvalidMaskError("unobserved cells must hold exactly 0")
        if not np.all(np.isfinite(values)):
            raise InvalidMaskError("observed values must be finite")
        if values.shape[1] and not np.all(mask.any(axis=0)):
            bad = np.flatnonzero(~mask.any(axis=0))
            raise InvalidMaskError(f"columns without observed entries: {bad.tolist()}")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_arrays(cls, values, mask=None) -> "ObservedMatrix":
        """Build from raw values; NaN cells are unobserved when ``mask`` is None."""
        values = np.array(values, dtype=float)
        if mask is None:
            mask = np.isfinite(values)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise InvalidMaskError(
                f"mask shape {mask.shape} differs from values shape {values.shape}")
        values = np.where(mask, values, 0.0)
        return cls(values, mask)

    @classmethod
    def full(cls, values) -> "ObservedMatrix":
        values = np.asarray(values, dtype=float)
        return cls(values.copy(), np.ones(values.shape, dtype=bool))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def columns(self, idx) -> "ObservedMatrix":
        idx = np.asarray(idx)
        return ObservedMatrix(self.values[:, idx], self.mask[:, idx])

    def column(self, i):
        return self.values[:, i], self.mask[:, i]


@dataclass(frozen=True)
class ShrinkResult:
    matrix: np.ndarray
    singular_values_before: np.ndarray
    singular_values_after: np.ndarray

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.singular_values_after > 0))


def soft_threshold_scalar(x: float, zeta: float) -> float:
    """Shrink ``x`` by ``zeta``; anything at or below the threshold maps to 0."""
    if zeta < 0:
        raise ValueError("threshold must be nonnegative")
    return x - zeta if x > zeta else 0.0


def shrink_singular_values(Q, zeta: float) -> ShrinkResult:
    """Singular value thresholding, the proximal map of ``zeta * ||.||_*``.

    Returns ``U diag(max(s - zeta, 0)) V^T`` for the economic SVD
    ``Q = U diag(s) V^T``, i.e. the minimizer of
    ``0.5 ||Q - Y||_F^2 + zeta ||Y||_*``.
    """
    if zeta < 0:
        raise ValueError("threshold must be nonnegative")
    Q = np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(Q)):
        raise np.linalg.LinAlgError("SVD of a matrix with non-finite entries")
    if Q.size == 0:
        empty = np.zeros(0)
        return ShrinkResult(Q.copy(), empty, empty)
    if zeta == 0:
        s = np.linalg.svd(Q, compute_uv=False)
        return ShrinkResult(Q.copy(), s, s.copy())
    u, s, vt = np.linalg.svd(Q, full_matrices=False)
    s_after = np.where(s > zeta, s - zeta, 0.0)
    keep = s_after > 0
    matrix = (u[:, keep] * s_after[keep]) @ vt[keep]
    return ShrinkResult(matrix, s, s_after)


def nuclear_norm(A) -> float:
    return float(np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False).sum())


def completion_objective(Z, X_obs: ObservedMatrix, lam: float) -> float:
    resid = (Z - X_obs.values) * X_obs.mask
    return float(np.sum(resid**2) + lam * nuclear_norm(Z))


@dataclass
class CompletionResult:
    Z: np.ndarray
    objective_trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def complete_low_rank(X_obs: ObservedMatrix, lam: float, step: float = 0.25,
                      tol: float = 1e-6, max_iter: int = 500,
                      return_info: bool = False):
    """Nuclear-norm regularized completion by proximal gradient.

    Minimizes ``||(Z - X) * mask||_F^2 + lam ||Z||_*`` starting from the
    zero-filled data. The smooth part has a 2-Lipschitz gradient, so any
    ``step <= 0.5`` gives a nonincreasing objective sequence. Iteration stops
    when the relative objective change drops below ``tol``.

    Returns ``Z``, or a :class:`CompletionResult` when ``return_info`` is set.
    If ``max_iter`` is exhausted the best iterate is returned, a
    :class:`ConvergenceWarning` is emitted and ``converged`` is False.
    """
    if not isinstance(X_obs, ObservedMatrix):
        raise TypeError("X_obs must be an ObservedMatrix")
    if lam <= 0 or step <= 0 or tol <= 0:
        raise ValueError("lam, step and tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    X = X_obs.values
    W = X_obs.mask
    Z = X.copy()
    obj = completion_objective(Z, X_obs, lam)
    best_Z, best_obj = Z, obj
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * (Z - X) * W
        Z = shrink_singular_values(Z - step * grad, lam * step).matrix
        new_obj = completion_objective(Z, X_obs, lam)
        trace.append(new_obj)
        if new_obj < best_obj:
            best_Z, best_obj = Z, new_obj
        change = abs(obj - new_obj) / max(abs(obj), np.finfo(float).tiny)
        obj = new_obj
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"completion did not converge in {max_iter} iterations",
                      ConvergenceWarning, stacklevel=2)
    if return_info:
        return CompletionResult(best_Z, trace, converged, it)
    return best_Z

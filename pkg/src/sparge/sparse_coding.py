"""Elastic-net sparse coding against a dictionary, OMP and K-SVD.

The coding problem for a sample ``z`` is::

    min_phi  0.5 ||z - D phi||^2 + r1 ||phi||_1 + 0.5 r2 ||phi||^2

With a fidelity term (a partially observed raw sample ``x`` and weight
``lam1``) the problem becomes the joint minimization over ``phi`` and ``z`` of::

    0.5 ||z - D phi||^2 + g(phi) + lam1 ||z_obs - x_obs||^2

For fixed ``phi`` the optimal ``z`` is available in closed form, and
substituting it back leaves an elastic net on the observed rows with data
weight ``w = 2 lam1 / (1 + 2 lam1)``. That reduced problem is what gets
solved; ``z`` is then recovered from the closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit


class CodingError(ValueError):
    pass


class ActiveSetError(CodingError):
    """The active set is not locally stable (strict complementarity fails)."""


@dataclass(frozen=True)
class Dictionary:
    """Atom matrix ``m x k`` with columns inside the unit ball."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim != 2:
            raise CodingError("atoms must be a 2-D array")
        if not np.all(np.isfinite(atoms)):
            raise CodingError("dictionary entries must be finite")
        norms = np.linalg.norm(atoms, axis=0)
        if np.any(norms > 1 + 1e-12):
            raise CodingError(f"atom norms exceed 1: max {norms.max():.17g}")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True)
class Fidelity:
    """Observed raw sample pulling the clean sample toward it."""

    x: np.ndarray
    mask: np.ndarray
    lam1: float

    def __post_init__(self):
        if self.lam1 <= 0:
            raise CodingError("lam1 must be positive")
        mask = np.asarray(self.mask, dtype=bool)
        x = np.where(mask, np.asarray(self.x, dtype=float), 0.0)
        if x.shape != mask.shape:
            raise CodingError("x and mask shapes differ")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mask", mask)

    @property
    def weight(self) -> float:
        return 2.0 * self.lam1 / (1.0 + 2.0 * self.lam1)


@dataclass(frozen=True)
class CodingParams:
    r1: float
    r2: float = 0.0
    tol: float = 1e-8
    max_iter: int = 1000
    fidelity: Optional[Fidelity] = None
    allow_ridge: bool = False

    def __post_init__(self):
        if self.r1 < 0 or self.r2 < 0:
            raise CodingError("regularization weights must be nonnegative")
        if self.r1 == 0 and not self.allow_ridge:
            raise CodingError("r1 = 0 degenerates to ridge; set allow_ridge=True")
        if self.tol <= 0 or self.max_iter < 1:
            raise CodingError("tol must be positive and max_iter at least 1")

    def with_fidelity(self, x, mask, lam1) -> "CodingParams":
        return replace(self, fidelity=Fidelity(x, mask, lam1))

    def penalty(self, phi) -> float:
        return float(self.r1 * np.abs(phi).sum() + 0.5 * self.r2 * np.dot(phi, phi))


@dataclass(frozen=True)
class SparseCode:
    phi: np.ndarray
    active_set: np.ndarray
    signs: np.ndarray
    residual_norm: float
    converged: bool = True
    iterations: int = 0
    z: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_phi(cls, phi, residual_norm, converged=True, iterations=0, z=None):
        phi = np.asarray(phi, dtype=float)
        active = np.flatnonzero(phi)
        return cls(phi, active, np.sign(phi[active]), float(residual_norm),
                   converged, iterations, z)


@dataclass(frozen=True)
class CodeMatrix:
    """Codes stacked as columns (``k x n``)."""

    codes: np.ndarray
    items: tuple = field(default=(), repr=False)

    @property
    def shape(self):
        return self.codes.shape

    @property
    def n(self) -> int:
        return self.codes.shape[1]

    @property
    def converged(self) -> bool:
        return all(c.converged for c in self.items)


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _cd_gram(G, c, r1, r2, phi, tol, max_iter):
    # min 0.5 phi'G phi - c'phi + r1 |phi|_1 + 0.5 r2 |phi|^2, cyclic order
    k = c.shape[0]
    q = c - G @ phi
    for it in range(max_iter):
        max_delta = 0.0
        for j in range(k):
            old = phi[j]
            denom = G[j, j] + r2
            if denom <= 0.0:
                new = 0.0
            else:
                new = _soft(q[j] + G[j, j] * old, r1) / denom
            delta = new - old
            if delta != 0.0:
                for i in range(k):
                    q[i] -= G[i, j] * delta
                phi[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            return it + 1, True
    return max_iter, False


def _weighted_system(z, D, params):
    """Gram matrix, correlation vector and row weights of the reduced problem."""
    A = D.atoms
    fid = params.fidelity
    if fid is None:
        return A.T @ A, A.T @ z, None
    rows = fid.mask
    w = fid.weight
    Ao = A[rows]
    return w * (Ao.T @ Ao), w * (Ao.T @ fid.x[rows]), w * rows.astype(float)


def _check_atoms(D: Dictionary):
    norms = np.linalg.norm(D.atoms, axis=0)
    if np.any(norms == 0):
        raise CodingError(f"zero-norm atoms: {np.flatnonzero(norms == 0).tolist()}")


def sparse_encode(z, D: Dictionary, params: CodingParams, warm_start=None) -> SparseCode:
    """Elastic-net code of one sample by cyclic coordinate descent.

    Coordinates are swept in index order until the largest change in a sweep
    is below ``params.tol``. A code that hits ``max_iter`` is returned with
    ``converged=False``.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (D.m,):
        raise CodingError(f"sample has shape {z.shape}, dictionary expects ({D.m},)")
    _check_atoms(D)
    fid = params.fidelity
    if fid is not None and fid.x.shape != (D.m,):
        raise CodingError("fidelity sample does not match dictionary rows")
    G, c, _ = _weighted_system(z, D, params)
    phi = np.zeros(D.k) if warm_start is None else np.array(warm_start, dtype=float)
    iters, ok = _cd_gram(G, c, float(params.r1), float(params.r2), phi,
                         float(params.tol), int(params.max_iter))
    recon = D.atoms @ phi
    if fid is None:
        z_out = z
    else:
        z_out = np.where(fid.mask, (recon + 2.0 * fid.lam1 * fid.x) / (1.0 + 2.0 * fid.lam1), recon)
    return SparseCode.from_phi(phi, np.linalg.norm(z_out - recon), ok, iters, z_out)


def coding_objective(phi, z, D: Dictionary, params: CodingParams) -> float:
    """Objective of the (possibly fidelity-augmented) coding problem at ``phi``.

    With a fidelity term this is the joint objective minimized over ``z``.
    """
    phi = np.asarray(phi, dtype=float)
    recon = D.atoms @ phi
    fid = params.fidelity
    if fid is None:
        data = 0.5 * float(np.sum((np.asarray(z) - recon) ** 2))
    else:
        r = (recon - fid.x)[fid.mask]
        data = fid.lam1 / (1.0 + 2.0 * fid.lam1) * float(r @ r)
    return data + params.penalty(phi)


def closed_form_check(code: SparseCode, z, D: Dictionary, params: CodingParams) -> float:
    """Sup-norm gap between ``phi`` on its active set and the ridge closed form.

    The closed form ``(D_A^T D_A + r2 I)^{-1} (D_A^T z - r1 s_A)`` is exact
    only on the active set ``A`` with sign vector ``s_A``.
    """
    act = code.active_set
    if act.size == 0:
        return 0.0
    G, c, _ = _weighted_system(np.asarray(z, dtype=float), D, params)
    A = G[np.ix_(act, act)] + params.r2 * np.eye(act.size)
    if params.r2 == 0 and np.linalg.matrix_rank(A) < act.size:
        raise CodingError("restricted Gram matrix is singular (degenerate active set)")
    ref = np.linalg.solve(A, c[act] - params.r1 * code.signs)
    return float(np.max(np.abs(code.phi[act] - ref)))


def stationarity_gap(code: SparseCode, z, D: Dictionary, params: CodingParams) -> float:
    """Largest violation of the elastic-net optimality conditions."""
    G, c, _ = _weighted_system(np.asarray(z, dtype=float), D, params)
    phi = code.phi
    corr = c - G @ phi
    act = phi != 0
    gap_act = np.abs(corr[act] - params.r2 * phi[act] - params.r1 * np.sign(phi[act]))
    gap_inact = np.maximum(np.abs(corr[~act]) - params.r1, 0.0)
    return float(max(gap_act.max(initial=0.0), gap_inact.max(initial=0.0)))


def batch_encode(Z, D: Dictionary, params: CodingParams, X_obs=None, lam1=None) -> CodeMatrix:
    """Encode every column of ``Z``.

    When ``X_obs`` (an :class:`~sparge.matrix_recovery.ObservedMatrix`) and
    ``lam1`` are given, column ``i`` is encoded with the fidelity term built
    from the ``i``-th observed sample.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] != D.m:
        raise CodingError(f"Z has shape {Z.shape}, dictionary expects ({D.m}, n)")
    n = Z.shape[1]
    if X_obs is not None and X_obs.shape != Z.shape:
        raise CodingError("observed data shape does not match Z")
    codes = np.zeros((D.k, n))
    items = []
    for i in range(n):
        p = params
        if X_obs is not None:
            p = params.with_fidelity(X_obs.values[:, i], X_obs.mask[:, i], lam1)
        try:
            code = sparse_encode(Z[:, i], D, p)
        except CodingError as exc:
            raise CodingError(f"column {i}: {exc}") from exc
        codes[:, i] = code.phi
        items.append(code)
    return CodeMatrix(codes, tuple(items))


class CodeJacobian:
    """Derivative of an elastic-net code with respect to the dictionary.

    Obtained by differentiating the stationarity condition on the active set
    ``A``::

        D_A^T W (z - D phi) = r2 phi_A + r1 s_A

    where ``W`` is the identity, or ``w * diag(mask)`` with a fidelity term
    (``z`` is then the observed sample). For a perturbation ``dD``::

        dphi_A = K^{-1} (dD_A^T W r - D_A^T W dD_A phi_A),
        K = D_A^T W D_A + r2 I,  r = z - D phi
    """

    def __init__(self, D: Dictionary, code: SparseCode, target, row_weights, r2):
        self.shape = D.atoms.shape
        self.active = code.active_set
        A = D.atoms[:, self.active]
        self._wr = row_weights * (target - D.atoms @ code.phi)
        self._WA = row_weights[:, None] * A
        self._phi_a = code.phi[self.active]
        K = A.T @ self._WA + r2 * np.eye(self.active.size)
        self._K = K

    def apply(self, dD) -> np.ndarray:
        """Directional derivative of the full code (zeros off the active set)."""
        out = np.zeros(self.shape[1])
        if self.active.size == 0:
            return out
        dA = np.asarray(dD)[:, self.active]
        rhs = dA.T @ self._wr - self._WA.T @ (dA @ self._phi_a)
        out[self.active] = np.linalg.solve(self._K, rhs)
        return out

    def adjoint(self, g) -> np.ndarray:
        """Gradient w.r.t. ``D`` of ``<g, phi(D)>`` (an ``m x k`` matrix)."""
        out = np.zeros(self.shape)
        if self.active.size == 0:
            return out
        v = np.linalg.solve(self._K, np.asarray(g)[self.active])
        out[:, self.active] = np.outer(self._wr, v) - np.outer(self._WA @ v, self._phi_a)
        return out

    def matrix(self) -> np.ndarray:
        """Dense ``k x (m*k)`` Jacobian, column-major over ``D`` entries."""
        m, k = self.shape
        J = np.zeros((k, m * k))
        for idx in range(m * k):
            E = np.zeros(m * k)
            E[idx] = 1.0
            J[:, idx] = self.apply(E.reshape((m, k), order="F"))
        return J


def code_jacobian(z, D: Dictionary, code: SparseCode, params: CodingParams,
                  margin: float = 1e-9) -> CodeJacobian:
    """Linear map from dictionary perturbations to code perturbations.

    Raises :class:`ActiveSetError` when strict complementarity fails, i.e.
    an inactive correlation sits within ``margin`` of ``r1`` or an active
    coefficient within ``margin`` of zero; finite differences are the
    fallback there.
    """
    fid = params.fidelity
    if fid is None:
        target = np.asarray(z, dtype=float)
        row_w = np.ones(D.m)
    else:
        target = fid.x
        row_w = fid.weight * fid.mask.astype(float)
    corr = D.atoms.T @ (row_w * (target - D.atoms @ code.phi))
    inactive = np.setdiff1d(np.arange(D.k), code.active_set)
    if inactive.size and np.max(np.abs(corr[inactive])) >= params.r1 - margin:
        raise ActiveSetError("inactive correlation on the r1 boundary")
    if code.active_set.size and np.min(np.abs(code.phi[code.active_set])) <= margin:
        raise ActiveSetError("active coefficient too close to zero")
    return CodeJacobian(D, code, target, row_w, params.r2)


def omp_encode(z, D: Dictionary, T: int) -> SparseCode:
    """Orthogonal matching pursuit with at most ``T`` atoms.

    Each round picks the unused atom with the largest absolute correlation
    to the residual (lowest index on ties) and refits least squares on the
    selected set.
    """
    z = np.asarray(z, dtype=float)
    A = D.atoms
    if T < 0 or T > D.k:
        raise CodingError(f"T must lie in [0, {D.k}]")
    phi = np.zeros(D.k)
    selected: list[int] = []
    resid = z.copy()
    floor = 1e-14 * max(np.linalg.norm(z), 1e-300)
    for _ in range(T):
        if np.linalg.norm(resid) <= floor:
            break
        corr = np.abs(A.T @ resid)
        corr[selected] = -1.0
        selected.append(int(np.argmax(corr)))
        coef = np.linalg.lstsq(A[:, selected], z, rcond=None)[0]
        resid = z - A[:, selected] @ coef
        phi[:] = 0.0
        phi[selected] = coef
    return SparseCode.from_phi(phi, np.linalg.norm(resid))


def project_unit_norm(D_hat) -> Dictionary:
    """Euclidean projection of each column onto the unit ball."""
    D_hat = np.array(D_hat, dtype=float)
    norms = np.linalg.norm(D_hat, axis=0)
    big = norms > 1
    D_hat[:, big] /= norms[big]
    # guard against a norm landing a hair above 1 after division
    over = np.linalg.norm(D_hat, axis=0) > 1
    D_hat[:, over] *= 1 - 1e-15
    return Dictionary(D_hat)


def _pick_initial_columns(Z, k, rng):
    n = Z.shape[1]
    norms = np.linalg.norm(Z, axis=0)
    order = rng.permutation(n)
    chosen: list[int] = []
    for i in order:
        if norms[i] == 0:
            continue
        u = Z[:, i] / norms[i]
        if all(abs(u @ (Z[:, j] / norms[j])) < 1 - 1e-12 for j in chosen):
            chosen.append(int(i))
        if len(chosen) == k:
            return chosen
    # not enough distinct directions: fill with remaining nonzero columns
    for i in order:
        if len(chosen) == k:
            break
        if norms[i] > 0 and int(i) not in chosen:
            chosen.append(int(i))
    return chosen


@dataclass
class KSVDResult:
    dictionary: Dictionary
    codes: np.ndarray
    error_trace: list


def ksvd_learn(Z, k: int, T: int, iterations: int = 30, seed: int = 0,
               return_info: bool = False):
    """K-SVD dictionary learning with OMP coding.

    Atoms start as ``k`` distinct (non-parallel where possible) random
    columns of ``Z``. A fresh OMP code only replaces the previous code of a
    column if it reconstructs at least as well, and atoms are updated by a
    rank-1 SVD of the residual restricted to their support. Together these
    make the logged error ``||Z - D Phi||_F`` nonincreasing. Atoms that no
    column uses are re-seeded from the worst reconstructed column.
    """
    Z = np.asarray(Z, dtype=float)
    m, n = Z.shape
    if k > n:
        raise CodingError(f"dictionary size {k} exceeds sample count {n}")
    if not np.any(Z):
        raise CodingError("cannot learn a dictionary from an all-zero matrix")
    T = max(1, min(T, k))
    rng = np.random.default_rng(seed)
    cols = _pick_initial_columns(Z, k, rng)
    A = Z[:, cols] / np.linalg.norm(Z[:, cols], axis=0)
    Phi = np.zeros((k, n))
    col_err = np.linalg.norm(Z, axis=0) ** 2
    trace = [float(np.sqrt(col_err.sum()))]
    for _ in range(iterations):
        D = Dictionary(A) if np.all(np.linalg.norm(A, axis=0) <= 1 + 1e-12) else project_unit_norm(A)
        for i in range(n):
            code = omp_encode(Z[:, i], D, T)
            err = code.residual_norm ** 2
            if err <= col_err[i]:
                Phi[:, i] = code.phi
                col_err[i] = err
        R = Z - A @ Phi
        for j in range(k):
            support = np.flatnonzero(Phi[j])
            if support.size == 0:
                worst = int(np.argmax(np.sum(R**2, axis=0)))
                v = R[:, worst]
                nv = np.linalg.norm(v)
                if nv > 0:
                    A[:, j] = v / nv
                continue
            E = R[:, support] + np.outer(A[:, j], Phi[j, support])
            u, s, vt = np.linalg.svd(E, full_matrices=False)
            A[:, j] = u[:, 0]
            Phi[j, support] = s[0] * vt[0]
            R[:, support] = E - np.outer(A[:, j], Phi[j, support])
        col_err = np.sum(R**2, axis=0)
        trace.append(float(np.sqrt(col_err.sum())))
    A /= np.maximum(np.linalg.norm(A, axis=0), 1.0)
    D = Dictionary(A)
    if return_info:
        return KSVDResult(D, Phi, trace)
    return D

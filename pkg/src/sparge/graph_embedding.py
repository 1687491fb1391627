"""Neighbor graphs over sparse codes, the trace quotient and its gradients.

Codes are the columns of ``Phi`` (``k x n``); ``U`` (``k x l``) has
orthonormal columns and maps a code to its embedding ``y = U^T phi``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .sparse_coding import ActiveSetError, CodeJacobian


class DegenerateObjectiveError(ArithmeticError):
    """The trace-quotient denominator vanished."""


class GraphError(ValueError):
    pass


DEN_EPS = 1e-12


@dataclass(frozen=True)
class StiefelProjection:
    U: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        k, l = U.shape
        if l > k or l < 1:
            raise ValueError(f"need 1 <= l <= k, got k={k}, l={l}")
        if np.linalg.norm(U.T @ U - np.eye(l)) > 1e-10:
            raise ValueError("columns of U are not orthonormal")
        U.setflags(write=False)
        object.__setattr__(self, "U", U)

    @property
    def k(self) -> int:
        return self.U.shape[0]

    @property
    def l(self) -> int:
        return self.U.shape[1]


def _as_U(U):
    if isinstance(U, StiefelProjection):
        return U.U
    U = np.asarray(U, dtype=float)
    return U[:, None] if U.ndim == 1 else U


def _as_codes(Phi):
    codes = getattr(Phi, "codes", Phi)
    codes = np.asarray(codes, dtype=float)
    if codes.ndim == 1:
        codes = codes[None, :]
    return codes


@dataclass(frozen=True)
class LaplacianPair:
    """Numerator / denominator Laplacians of the trace quotient.

    ``num_support`` and ``den_support`` are the symmetric boolean edge sets the
    weights live on; they are kept so the gradient can differentiate the
    weights with the neighbor sets held fixed.
    """

    L_num: np.ndarray
    L_den: np.ndarray
    mode: str
    neighbor_params: tuple
    num_support: Optional[np.ndarray] = None
    den_support: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.L_num.shape[0]

    def check(self, tol: float = 1e-10, psd_tol: float = 1e-8) -> bool:
        for L in (self.L_num, self.L_den):
            scale = max(1.0, np.abs(L).max(initial=0.0))
            if np.abs(L - L.T).max(initial=0.0) > tol * scale:
                return False
            if np.abs(L.sum(axis=1)).max(initial=0.0) > tol * scale:
                return False
            if L.size and np.linalg.eigvalsh(L).min() < -psd_tol * scale:
                return False
        return True


def laplacian(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    return np.diag(W.sum(axis=1)) - W


def distance_sq(phi_i, phi_j, U) -> float:
    """Squared distance between two codes after projection by ``U``."""
    diff = np.asarray(phi_i, float) - np.asarray(phi_j, float)
    y = _as_U(U).T @ diff
    return float(y @ y)


def embedded_sq_distances(Phi, U) -> np.ndarray:
    Y = _as_U(U).T @ _as_codes(Phi)
    sq = np.sum(Y**2, axis=0)
    D2 = sq[:, None] + sq[None, :] - 2.0 * (Y.T @ Y)
    np.maximum(D2, 0.0, out=D2)
    np.fill_diagonal(D2, 0.0)
    return D2


def _exact_sq_distances(Y) -> np.ndarray:
    # summed per coordinate to avoid the cancellation of the Gram-matrix form
    n = Y.shape[1]
    D2 = np.zeros((n, n))
    for row in Y:
        diff = row[:, None] - row[None, :]
        D2 += diff * diff
    return D2


def _knn_support(D2, candidates, k):
    """Symmetric boolean matrix: j among the k nearest candidates of i, or vice versa."""
    n = D2.shape[0]
    S = np.zeros((n, n), dtype=bool)
    if k <= 0:
        return S
    for i in range(n):
        cand = np.flatnonzero(candidates[i])
        if cand.size == 0:
            continue
        order = cand[np.argsort(D2[i, cand], kind="stable")]
        S[i, order[:k]] = True
    return S | S.T


def build_supervised(Phi, labels, U, k1: int, k2: int) -> LaplacianPair:
    """Intra-class (numerator) and inter-class (denominator) Laplacians.

    ``j`` is linked to ``i`` when it is among the ``k1`` nearest same-label
    codes of ``i`` (or the reverse); likewise for the ``k2`` nearest codes of
    a different label. Distances and edge weights are the squared embedded
    distance ``||U^T (phi_i - phi_j)||^2``; ties in the ranking go to the
    lower sample index.
    """
    codes = _as_codes(Phi)
    labels = np.asarray(labels)
    n = codes.shape[1]
    if labels.shape != (n,):
        raise GraphError("one label per code is required")
    if k2 >= 1 and np.unique(labels).size < 2:
        raise GraphError("single-class data: the inter-class graph is empty")
    if k1 >= 1:
        _, counts = np.unique(labels, return_counts=True)
        if np.any(counts == 1):
            warnings.warn("classes with one member contribute no intra-class edges",
                          stacklevel=2)
    Y = _as_U(U).T @ codes
    D2 = _exact_sq_distances(Y)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    S_num = _knn_support(D2, same, k1)
    S_den = _knn_support(D2, labels[:, None] != labels[None, :], k2)
    W_num = np.where(S_num, D2, 0.0)
    W_den = np.where(S_den, D2, 0.0)
    return LaplacianPair(laplacian(W_num), laplacian(W_den), "supervised", (k1, k2),
                         S_num, S_den)


def build_unsupervised(Phi, t: float, k_g: int) -> LaplacianPair:
    """Local (numerator) and non-local (denominator) heat-kernel Laplacians.

    Adjacency is the symmetrized ``k_g``-nearest-neighbor graph in code
    space. Adjacent pairs carry ``exp(-||phi_i - phi_j||^2 / t)`` in the local
    graph, the remaining pairs carry it in the non-local graph.
    """
    codes = _as_codes(Phi)
    n = codes.shape[1]
    if n < 2:
        raise GraphError("need at least two codes")
    if not 0 < k_g < n:
        raise GraphError("k_g must satisfy 0 < k_g < n")
    if t <= 0:
        raise GraphError("t must be positive")
    D2 = _exact_sq_distances(codes)
    off = ~np.eye(n, dtype=bool)
    adj = _knn_support(D2, off, k_g)
    K = np.exp(-D2 / t)
    nonadj = off & ~adj
    if not np.any(nonadj):
        warnings.warn("every pair is adjacent: the non-local Laplacian is zero",
                      stacklevel=2)
    elif np.all(D2[off] == 0):
        warnings.warn("all codes coincide: the trace quotient is degenerate", stacklevel=2)
    return LaplacianPair(laplacian(np.where(adj, K, 0.0)),
                         laplacian(np.where(nonadj, K, 0.0)),
                         "unsupervised", (t, k_g), adj, nonadj)


def _traces(U, codes, pair):
    A = codes @ pair.L_num @ codes.T
    B = codes @ pair.L_den @ codes.T
    return A, B, float(np.trace(U.T @ A @ U)), float(np.trace(U.T @ B @ U))


def trace_quotient(U, Phi, pair: LaplacianPair, eps: float = DEN_EPS) -> float:
    """``tr(U^T Phi L_num Phi^T U) / tr(U^T Phi L_den Phi^T U)``."""
    _, _, num, den = _traces(_as_U(U), _as_codes(Phi), pair)
    if den <= eps:
        raise DegenerateObjectiveError(f"trace-quotient denominator {den:.3e} <= {eps:g}")
    return num / den


def _weight_derivative_term(U, codes, support):
    """``d tr(U^T Phi L(U) Phi^T U) / dU`` through the edge weights only."""
    # d num / d z_ij = 0.5 ||U^T (phi_i - phi_j)||^2 over ordered pairs and
    # d z_ij / dU = 2 (phi_i - phi_j)(phi_i - phi_j)^T U
    D2 = _exact_sq_distances(U.T @ codes)
    return 2.0 * codes @ laplacian(np.where(support, D2, 0.0)) @ codes.T @ U


def grad_U(U, Phi, pair: LaplacianPair, frozen_graphs: bool = True,
           eps: float = DEN_EPS) -> np.ndarray:
    """Euclidean gradient of the trace quotient with respect to ``U``.

    With ``frozen_graphs`` the Laplacians are constants. Otherwise the
    supervised edge weights (squared embedded distances) are differentiated
    on their fixed supports as well. Unsupervised weights do not depend on
    ``U``, so the flag has no effect there.
    """
    U = _as_U(U)
    codes = _as_codes(Phi)
    A, B, num, den = _traces(U, codes, pair)
    if den <= eps:
        raise DegenerateObjectiveError(f"trace-quotient denominator {den:.3e} <= {eps:g}")
    d_num = 2.0 * A @ U
    d_den = 2.0 * B @ U
    if not frozen_graphs and pair.mode == "supervised":
        d_num = d_num + _weight_derivative_term(U, codes, pair.num_support)
        d_den = d_den + _weight_derivative_term(U, codes, pair.den_support)
    return (d_num * den - d_den * num) / den**2


def grad_codes(U, Phi, pair: LaplacianPair, eps: float = DEN_EPS) -> np.ndarray:
    """Gradient of the frozen-graph quotient with respect to ``Phi`` (``k x n``)."""
    U = _as_U(U)
    codes = _as_codes(Phi)
    _, _, num, den = _traces(U, codes, pair)
    if den <= eps:
        raise DegenerateObjectiveError(f"trace-quotient denominator {den:.3e} <= {eps:g}")
    P = U @ U.T
    return 2.0 * (P @ codes @ pair.L_num * den - P @ codes @ pair.L_den * num) / den**2


@dataclass
class GradDResult:
    grad: np.ndarray
    skipped: int


def grad_D(U, Phi, pair: LaplacianPair, jacobians: Sequence[Optional[CodeJacobian]],
           eps: float = DEN_EPS) -> GradDResult:
    """Gradient of the frozen-graph quotient with respect to the dictionary.

    Chains ``d quotient / d Phi`` through each sample's code Jacobian.
    Entries of ``jacobians`` that are ``None`` mark samples whose active set
    is unstable; they are skipped and counted in ``skipped``.
    """
    G_phi = grad_codes(U, Phi, pair, eps)
    if len(jacobians) != G_phi.shape[1]:
        raise ValueError("one Jacobian per sample is required")
    grad = None
    skipped = 0
    for i, J in enumerate(jacobians):
        if J is None:
            skipped += 1
            continue
        if grad is None:
            grad = np.zeros(J.shape)
        g = G_phi[:, i]
        if np.any(g):
            grad += J.adjoint(g)
    if grad is None:
        raise ActiveSetError("no sample has a differentiable code")
    return GradDResult(grad, skipped)


def project_stiefel(M, rank_tol: float = 1e-12) -> StiefelProjection:
    """Orthonormalize columns by thin QR with a positive diagonal in ``R``."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    Q, R = np.linalg.qr(M)
    d = np.diag(R)
    scale = max(np.abs(d).max(initial=0.0), np.finfo(float).tiny)
    if np.any(np.abs(d) <= rank_tol * scale) or not np.any(d):
        raise np.linalg.LinAlgError("matrix is rank deficient")
    Q = Q * np.where(d < 0, -1.0, 1.0)
    return StiefelProjection(Q)

"""Alternating training of dictionary and projection.

State is ``(D, U)``; codes are always the fidelity-augmented elastic-net codes
of the observed data under the current dictionary, and the clean data is
``Z = D Phi``. Each outer iteration rebuilds the neighbor graphs from the
current codes, freezes them, takes a gradient step on the trace quotient,
shrinks the singular values of the dictionary and projects both factors
back onto their constraint sets.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .graph_embedding import (
    DegenerateObjectiveError,
    GraphError,
    LaplacianPair,
    StiefelProjection,
    build_supervised,
    build_unsupervised,
    grad_D,
    grad_U,
    grad_codes,
    project_stiefel,
    trace_quotient,
)
from .matrix_recovery import ObservedMatrix, complete_low_rank, nuclear_norm, shrink_singular_values
from .sparse_coding import (
    ActiveSetError,
    CodeMatrix,
    CodingError,
    CodingParams,
    Dictionary,
    batch_encode,
    code_jacobian,
    ksvd_learn,
    project_unit_norm,
)

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Numerical failure during training; ``iteration`` is where it happened."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class InputError(FitError, ValueError):
    """Training input the method cannot handle (e.g. a single class)."""


@dataclass(frozen=True)
class Hyperparams:
    lam1: float = 1.0
    lam2: float = 0.1
    r1: float = 0.05
    r2: float = 0.01
    gamma: float = 1e-3
    zeta: float = 0.1
    k: int = 30
    l: int = 5
    mode: str = "supervised"
    k1: int = 5
    k2: int = 5
    t: float = 1.0
    k_g: int = 5
    max_iter: int = 100
    grad_tol: float = 1e-5
    init_subset: int = 500
    seed: int = 0
    backtracking: bool = False
    # "constant": threshold zeta every step; "proximal": threshold gamma * lam2
    svt: str = "constant"
    # "quotient": only the trace quotient drives the dictionary step;
    # "composite": the smooth part of the monitored objective does
    direction: str = "quotient"
    class_dictionaries: bool = True
    ksvd_iter: int = 30
    completion_iter: int = 500
    coding_tol: float = 1e-8
    coding_max_iter: int = 1000
    max_halvings: int = 20

    def __post_init__(self):
        if not 1 <= self.l <= self.k:
            raise ValueError("need 1 <= l <= k")
        if self.mode not in ("supervised", "unsupervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.svt not in ("constant", "proximal"):
            raise ValueError(f"unknown svt rule {self.svt!r}")
        if self.direction not in ("quotient", "composite"):
            raise ValueError(f"unknown direction {self.direction!r}")
        for name in ("lam1", "lam2", "gamma", "zeta", "t"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.r1 <= 0 or self.r2 < 0:
            raise ValueError("need r1 > 0 and r2 >= 0")
        if self.max_iter < 0 or self.init_subset < 1:
            raise ValueError("max_iter must be >= 0 and init_subset >= 1")

    @property
    def coding(self) -> CodingParams:
        return CodingParams(self.r1, self.r2, self.coding_tol, self.coding_max_iter)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SpargeModel:
    Z: np.ndarray
    D: Dictionary
    Phi: CodeMatrix
    U: StiefelProjection
    hyperparams: Hyperparams
    labels: Optional[np.ndarray] = None

    def embeddings(self) -> np.ndarray:
        """Training embeddings ``U^T Phi`` as columns."""
        return self.U.U.T @ self.Phi.codes

    def invariant_violations(self) -> dict:
        return {
            "reconstruction": float(np.linalg.norm(self.Z - self.D.atoms @ self.Phi.codes)),
            "orthonormality": float(np.linalg.norm(self.U.U.T @ self.U.U - np.eye(self.U.l))),
            "max_atom_norm": float(np.linalg.norm(self.D.atoms, axis=0).max()),
        }


@dataclass
class FitReport:
    objective_trace: list = field(default_factory=list)
    grad_norm_trace: list = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    wall_time_seconds: float = 0.0
    warnings: list = field(default_factory=list)
    initial_objective: float = math.nan
    final_grad_norm: float = math.nan
    step_trace: list = field(default_factory=list)
    time_trace: list = field(default_factory=list)

    def rows(self):
        """One ``(index, objective, grad_norm, seconds)`` tuple per iteration."""
        return list(zip(range(1, self.iterations_run + 1), self.objective_trace,
                        self.grad_norm_trace, self.time_trace))

    def to_csv(self, timing: bool = True) -> str:
        """Per-iteration rows; ``timing=False`` drops the wall-clock column."""
        if timing:
            lines = ["iteration,objective,grad_norm,seconds"]
            lines += [f"{i},{j!r},{g!r},{t:.6f}" for i, j, g, t in self.rows()]
        else:
            lines = ["iteration,objective,grad_norm"]
            lines += [f"{i},{j!r},{g!r}" for i, j, g, _ in self.rows()]
        return "\n".join(lines) + "\n"


# -- pieces shared by fit, gradcheck and the query side ----------------------


def encode_observed(X_obs: ObservedMatrix, D: Dictionary, hp: Hyperparams) -> CodeMatrix:
    """Fidelity-augmented codes of every observed sample under ``D``."""
    return batch_encode(X_obs.values, D, hp.coding, X_obs=X_obs, lam1=hp.lam1)


def build_pair(Phi, labels, U, hp: Hyperparams) -> LaplacianPair:
    if hp.mode == "supervised":
        return build_supervised(Phi, labels, U, hp.k1, hp.k2)
    return build_unsupervised(Phi, hp.t, hp.k_g)


def composite_objective(X_obs, labels, D: Dictionary, U, Phi: CodeMatrix, hp: Hyperparams,
                        pair: Optional[LaplacianPair] = None) -> float:
    """Trace quotient plus every penalty of the joint problem, with ``Z = D Phi``."""
    if pair is None:
        pair = build_pair(Phi, labels, U, hp)
    Z = D.atoms @ Phi.codes
    fidelity = np.sum(((Z - X_obs.values) * X_obs.mask) ** 2)
    coding = 0.5 * np.sum((Z - D.atoms @ Phi.codes) ** 2)
    coding += hp.r1 * np.abs(Phi.codes).sum() + 0.5 * hp.r2 * np.sum(Phi.codes**2)
    return float(trace_quotient(U, Phi, pair) + hp.lam1 * fidelity
                 + hp.lam2 * nuclear_norm(D.atoms) + coding)


def code_jacobians(X_obs: ObservedMatrix, D: Dictionary, Phi: CodeMatrix, hp: Hyperparams):
    jacs = []
    for i, code in enumerate(Phi.items):
        p = hp.coding.with_fidelity(X_obs.values[:, i], X_obs.mask[:, i], hp.lam1)
        try:
            jacs.append(code_jacobian(X_obs.values[:, i], D, code, p))
        except ActiveSetError:
            jacs.append(None)
    return jacs


def trace_ratio(A, B, l: int, tol: float = 1e-10, max_rounds: int = 100):
    """Minimize ``tr(U^T A U) / tr(U^T B U)`` over orthonormal ``k x l`` ``U``.

    Classic trace-ratio iteration: ``U`` <- the ``l`` smallest eigenvectors of
    ``A - rho B``, then ``rho`` <- the quotient at ``U``. Returns ``(U, rhos)``;
    the ``rho`` sequence is nonincreasing.
    """
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    rho = np.trace(A) / np.trace(B)
    rhos = [float(rho)]
    U = None
    for _ in range(max_rounds):
        _, vecs = np.linalg.eigh(A - rho * B)
        U = vecs[:, :l]
        new = np.trace(U.T @ A @ U) / np.trace(U.T @ B @ U)
        rhos.append(float(new))
        if abs(new - rho) < tol:
            break
        rho = new
    return U, rhos


def init_projection(Phi, pair: LaplacianPair, l: int, tol: float = 1e-10,
                    max_rounds: int = 100, return_trace: bool = False):
    """Initial projection by the trace-ratio iteration on the frozen graphs.

    A denominator scatter of rank below ``l`` is ridge-regularized by
    ``1e-8 I`` (with a warning) so every candidate ``U`` has a positive
    denominator.
    """
    codes = getattr(Phi, "codes", Phi)
    A = codes @ pair.L_num @ codes.T
    B = codes @ pair.L_den @ codes.T
    if np.linalg.matrix_rank(B) < l:
        warnings.warn("denominator scatter is rank deficient; adding 1e-8 I", stacklevel=2)
        B = B + 1e-8 * np.eye(B.shape[0])
    U, rhos = trace_ratio(A, B, l, tol, max_rounds)
    U = project_stiefel(U)
    return (U, rhos) if return_trace else U


def _learn_dictionary(Z0, labels, hp: Hyperparams) -> Dictionary:
    T = max(1, math.ceil(hp.k / 10))
    if hp.mode != "supervised" or not hp.class_dictionaries or labels is None:
        return ksvd_learn(Z0, hp.k, T, hp.ksvd_iter, hp.seed)
    classes = np.unique(labels)
    sizes = np.full(classes.size, hp.k // classes.size)
    sizes[: hp.k % classes.size] += 1
    blocks = []
    for c, kc in zip(classes, sizes):
        if kc == 0:
            continue
        Zc = Z0[:, labels == c]
        kc = min(kc, Zc.shape[1])
        blocks.append(ksvd_learn(Zc, kc, max(1, math.ceil(kc / 10)), hp.ksvd_iter, hp.seed).atoms)
    atoms = np.hstack(blocks)
    if atoms.shape[1] < hp.k:
        raise FitError("classes too small for the requested dictionary size")
    return Dictionary(atoms)


def _validate(X_obs, labels, hp):
    if not isinstance(X_obs, ObservedMatrix):
        raise TypeError("X_obs must be an ObservedMatrix")
    if hp.mode == "supervised":
        if labels is None:
            raise ValueError("supervised mode needs labels")
        labels = np.asarray(labels)
        if labels.shape != (X_obs.n,):
            raise ValueError("one label per sample is required")
        if np.unique(labels).size < 2:
            raise InputError("supervised mode needs at least two classes", 0)
    elif labels is not None:
        labels = np.asarray(labels)
    return labels


def initialize(X_obs: ObservedMatrix, labels, hp: Hyperparams):
    """Initial ``(Z0, D0, Phi0, U0)``.

    ``Z0`` comes from nuclear-norm completion of the data, ``D0`` from K-SVD
    on ``Z0`` (one sub-dictionary per class in supervised mode), ``Phi0``
    from coding the observed data against ``D0``, and ``U0`` from the
    trace-ratio iteration on a seeded random subset of the codes.
    """
    labels = _validate(X_obs, labels, hp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Z0 = complete_low_rank(X_obs, hp.lam2, max_iter=hp.completion_iter)
    D0 = _learn_dictionary(Z0, labels, hp)
    Phi0 = encode_observed(X_obs, D0, hp)
    rng = np.random.default_rng(hp.seed)
    n = X_obs.n
    if hp.init_subset >= n:
        subset = np.arange(n)
    else:
        subset = np.sort(rng.choice(n, hp.init_subset, replace=False))
    codes = Phi0.codes[:, subset]
    sub_labels = None if labels is None else labels[subset]
    pair = build_pair(codes, sub_labels, np.eye(hp.k), hp)
    U0 = init_projection(codes, pair, hp.l)
    return Z0, D0, Phi0, U0


@dataclass
class _State:
    D: Dictionary
    U: StiefelProjection
    Phi: CodeMatrix
    pair: LaplacianPair
    J: float


def _evaluate(X_obs, labels, D, U, hp, Phi=None) -> _State:
    if Phi is None:
        Phi = encode_observed(X_obs, D, hp)
    pair = build_pair(Phi, labels, U, hp)
    J = composite_objective(X_obs, labels, D, U, Phi, hp, pair)
    return _State(D, U, Phi, pair, J)


def composite_grad_D(X_obs, D: Dictionary, U, Phi: CodeMatrix, pair, hp, jacobians):
    """Gradient in ``D`` of the smooth part of the composite objective.

    Covers the trace quotient, the fidelity term and the code penalties, with
    ``Z = D Phi`` and every code a function of ``D``. The nuclear norm is left
    to the thresholding step. Returns ``(grad, skipped)``.
    """
    A, codes = D.atoms, Phi.codes
    R = (A @ codes - X_obs.values) * X_obs.mask
    G_phi = grad_codes(U, Phi, pair) + 2.0 * hp.lam1 * (A.T @ R)
    G_phi += hp.r1 * np.sign(codes) + hp.r2 * codes
    grad = 2.0 * hp.lam1 * R @ codes.T
    skipped = 0
    for i, J in enumerate(jacobians):
        if J is None:
            skipped += 1
        else:
            grad += J.adjoint(G_phi[:, i])
    return grad, skipped


def _gradients(X_obs, st: _State, hp, frozen=True):
    jacs = code_jacobians(X_obs, st.D, st.Phi, hp)
    if hp.direction == "composite":
        gD, skipped = composite_grad_D(X_obs, st.D, st.U, st.Phi, st.pair, hp, jacs)
    else:
        res = grad_D(st.U, st.Phi, st.pair, jacs)
        gD, skipped = res.grad, res.skipped
    gu = grad_U(st.U, st.Phi, st.pair, frozen_graphs=frozen)
    return gD, gu, skipped


def _step(st: _State, gD, gU, gamma, hp):
    D_hat = st.D.atoms - gamma * gD
    threshold = hp.zeta if hp.svt == "constant" else gamma * hp.lam2
    D_hat = shrink_singular_values(D_hat, threshold).matrix
    D_new = project_unit_norm(D_hat)
    U_new = project_stiefel(st.U.U - gamma * gU)
    return D_new, U_new


def fit(X_obs: ObservedMatrix, labels=None, hp: Hyperparams = Hyperparams(), init=None):
    """Train a model; returns ``(SpargeModel, FitReport)``.

    Each iteration computes the search direction ``H = -(grad_D, grad_U)`` of
    the frozen-graph trace quotient, steps by ``gamma``, thresholds the
    singular values of the dictionary, projects the dictionary columns onto
    the unit ball and ``U`` onto the Stiefel manifold (QR), re-codes the data
    and refreshes ``Z = D Phi``. With ``hp.backtracking`` the step is halved
    (at most ``hp.max_halvings`` times) until the composite objective does
    not increase; if no such step is found the fit stops. Iteration ends
    when ``||H||_F < grad_tol`` or after ``max_iter`` steps.

    ``init`` may supply a precomputed ``(Z0, D0, Phi0, U0)``.
    """
    labels = _validate(X_obs, labels, hp)
    t0 = time.perf_counter()
    report = FitReport()
    try:
        _, D, Phi, U = init if init is not None else initialize(X_obs, labels, hp)
        st = _evaluate(X_obs, labels, D, U, hp, Phi)
    except (DegenerateObjectiveError, GraphError, CodingError) as exc:
        raise FitError(str(exc), 0) from exc
    report.initial_objective = st.J
    j = 0
    while True:
        try:
            gD, gU, skipped = _gradients(X_obs, st, hp)
        except (DegenerateObjectiveError, ActiveSetError) as exc:
            raise FitError(str(exc), j) from exc
        if skipped:
            report.warnings.append(f"iteration {j}: {skipped} samples without stable active set")
        hnorm = float(np.sqrt(np.sum(gD**2) + np.sum(gU**2)))
        report.final_grad_norm = hnorm
        if not np.isfinite(hnorm):
            raise FitError("non-finite search direction", j)
        if hnorm < hp.grad_tol:
            report.converged = True
            break
        if j >= hp.max_iter:
            break
        gamma = hp.gamma
        accepted = None
        for _ in range(hp.max_halvings + 1):
            try:
                D_new, U_new = _step(st, gD, gU, gamma, hp)
                cand = _evaluate(X_obs, labels, D_new, U_new, hp)
            except (DegenerateObjectiveError, GraphError, CodingError,
                    np.linalg.LinAlgError) as exc:
                if not hp.backtracking:
                    raise FitError(str(exc), j + 1) from exc
                gamma /= 2
                continue
            if not np.isfinite(cand.J):
                if not hp.backtracking:
                    raise FitError("non-finite objective", j + 1)
                gamma /= 2
                continue
            if not hp.backtracking or cand.J <= st.J:
                accepted = cand
                break
            gamma /= 2
        if accepted is None:
            report.warnings.append(f"iteration {j + 1}: no decreasing step found")
            break
        st = accepted
        j += 1
        report.objective_trace.append(st.J)
        report.grad_norm_trace.append(hnorm)
        report.step_trace.append(gamma)
        report.time_trace.append(time.perf_counter() - t0)
        log.info("%d,%r,%r,%.6f", j, st.J, hnorm, report.time_trace[-1])
    report.iterations_run = j
    report.wall_time_seconds = time.perf_counter() - t0
    Z = st.D.atoms @ st.Phi.codes
    model = SpargeModel(Z, st.D, st.Phi, st.U, hp, labels)
    return model, report


# -- gradient verification ----------------------------------------------------


@dataclass
class GradcheckReport:
    rel_error_U: float
    rel_error_D: float
    boundary_flagged: bool
    skipped_samples: int
    h: float


def _central_diff(f, x0, h):
    g = np.zeros_like(x0)
    flat = g.reshape(-1)
    for idx in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[idx] += h
        xm[idx] -= h
        flat[idx] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * h)
    return g


def _rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def gradcheck(X_obs: ObservedMatrix, labels, hp: Hyperparams, h: float = 1e-5,
              D: Optional[Dictionary] = None, U=None,
              coding_tol: float = 1e-14) -> GradcheckReport:
    """Analytic gradients vs central differences with frozen graphs.

    Works at the initialized state unless ``D`` and ``U`` are given. The
    codes are solved to ``coding_tol`` so coding error does not swamp the
    differences. If the active set of any sample changes across a ``+-h``
    probe the instance is flagged as sitting on a boundary.
    """
    labels = _validate(X_obs, labels, hp)
    hp = replace(hp, coding_tol=coding_tol, coding_max_iter=max(hp.coding_max_iter, 100000))
    if D is None or U is None:
        _, D0, _, U0 = initialize(X_obs, labels, hp)
        D = D0 if D is None else D
        U = U0 if U is None else U
    U = U if isinstance(U, StiefelProjection) else StiefelProjection(U)
    st = _evaluate(X_obs, labels, D, U, hp)
    gD, gU, skipped = _gradients(X_obs, st, hp)

    fd_U = _central_diff(lambda V: trace_quotient(V, st.Phi, st.pair), U.U.copy(), h)

    base_supports = [tuple(c.active_set) for c in st.Phi.items]
    flagged = False

    def f_D(A):
        nonlocal flagged
        Phi = batch_encode(X_obs.values, _LooseDictionary(A), hp.coding, X_obs=X_obs, lam1=hp.lam1)
        if [tuple(c.active_set) for c in Phi.items] != base_supports:
            flagged = True
        return trace_quotient(U, Phi, st.pair)

    fd_D = _central_diff(f_D, D.atoms.copy(), h)
    return GradcheckReport(_rel_err(gU, fd_U), _rel_err(gD, fd_D), flagged, skipped, h)


class _LooseDictionary(Dictionary):
    """Dictionary without the unit-ball check, for finite-difference probes."""

    def __post_init__(self):
        object.__setattr__(self, "atoms", np.asarray(self.atoms, dtype=float))


# -- model selection ------------------------------------------------------------


@dataclass
class GridResult:
    best: Hyperparams
    table: list  # (hyperparams, mean CV accuracy or nan)


def _folds(n, folds, seed):
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(order[f::folds]) for f in range(folds)]


def grid_search(X_obs: ObservedMatrix, labels, hp_grid, folds: int = 3, seed: int = 0,
                base: Optional[Hyperparams] = None) -> GridResult:
    """Cross-validated 1-NN accuracy in the embedded space for each grid point.

    ``hp_grid`` is either a sequence of :class:`Hyperparams` or a mapping from
    field name (``lam1``, ``lam2``, ``r1``, ``r2``) to candidate values that is
    expanded over ``base``. Points whose fit fails score ``nan`` and rank
    last; ties go to the smaller ``lam1 + lam2 + r1 + r2``, then grid order.
    """
    from .similarity import embed_matrix, knn_predict_matrix

    if isinstance(hp_grid, dict):
        base = base or Hyperparams()
        keys = list(hp_grid)
        points = [replace(base, **dict(zip(keys, vals)))
                  for vals in itertools.product(*(hp_grid[k] for k in keys))]
    else:
        points = list(hp_grid)
    if not points:
        raise ValueError("empty hyperparameter grid")
    if folds < 2:
        raise ValueError("need at least two folds")
    labels = np.asarray(labels)
    parts = _folds(X_obs.n, folds, seed)
    table = []
    for hp in points:
        if hp.mode != "supervised":
            raise ValueError("grid search scores supervised models only")
        accs = []
        try:
            for f in range(folds):
                test = parts[f]
                train = np.sort(np.concatenate([parts[g] for g in range(folds) if g != f]))
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    model, _ = fit(X_obs.columns(train), labels[train], hp)
                Y_test = embed_matrix(model, X_obs.columns(test))
                pred = knn_predict_matrix(model.embeddings(), labels[train], Y_test, 1)
                accs.append(float(np.mean(pred == labels[test])))
            score = float(np.mean(accs))
        except (FitError, ValueError, ArithmeticError, np.linalg.LinAlgError):
            score = math.nan
        table.append((hp, score))

    def key(item):
        idx, (hp, score) = item
        return (0 if np.isfinite(score) else 1, -score if np.isfinite(score) else 0.0,
                hp.lam1 + hp.lam2 + hp.r1 + hp.r2, idx)

    best = min(enumerate(table), key=key)[1][0]
    return GridResult(best, table)

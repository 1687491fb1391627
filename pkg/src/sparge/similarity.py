"""Query-time mapping, similarity search, baseline classifiers and metrics."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from .matrix_recovery import ObservedMatrix
from .sparse_coding import sparse_encode
from .trainer import SpargeModel


@dataclass(frozen=True)
class EmbeddedPatient:
    id: Hashable
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if not np.all(np.isfinite(y)):
            raise ValueError("embedding must be finite")
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class SimilarityResult:
    neighbor_ids: list
    distances: np.ndarray
    sparse_weights: Optional[dict] = None


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    per_class_recall: dict
    weighted_recall: float
    mean_predict_seconds: float

    def rows(self):
        out = [("accuracy", self.accuracy), ("weighted_recall", self.weighted_recall)]
        out += [(f"recall[{c}]", r) for c, r in self.per_class_recall.items()]
        out.append(("mean_predict_seconds", self.mean_predict_seconds))
        return out

    def to_csv(self, timing: bool = True) -> str:
        lines = ["metric,value"]
        for name, value in self.rows():
            if name == "mean_predict_seconds" and not timing:
                continue
            lines.append(f"{name},{value!r}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = self.rows()
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:.6g}" for name, value in rows)


def encode_sample(model: SpargeModel, x, mask=None):
    """Fidelity-augmented code of one (possibly partial) raw sample."""
    x = np.asarray(x, dtype=float)
    mask = np.isfinite(x) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("sample has no observed coordinates")
    hp = model.hyperparams
    params = hp.coding.with_fidelity(np.where(mask, x, 0.0), mask, hp.lam1)
    return sparse_encode(np.where(mask, x, 0.0), model.D, params)


def embed(model: SpargeModel, x, mask=None, id: Hashable = None) -> EmbeddedPatient:
    """Map a raw sample to the embedded space: ``y = U^T phi``.

    Only observed coordinates enter the fidelity term, so no imputation is
    needed. NaN entries of ``x`` count as unobserved when ``mask`` is None.
    """
    code = encode_sample(model, x, mask)
    return EmbeddedPatient(id, model.U.U.T @ code.phi)


def embed_matrix(model: SpargeModel, X_obs: ObservedMatrix) -> np.ndarray:
    """Embeddings of every column of ``X_obs`` (``l x n``)."""
    out = np.zeros((model.U.l, X_obs.n))
    for i in range(X_obs.n):
        out[:, i] = embed(model, X_obs.values[:, i], X_obs.mask[:, i]).y
    return out


def similar_by_weight(model: SpargeModel, x, mask=None) -> SimilarityResult:
    """Atoms (or training samples, for a self-expressive dictionary) ranked by |phi|."""
    phi = encode_sample(model, x, mask).phi
    idx = np.flatnonzero(phi)
    order = idx[np.argsort(-np.abs(phi[idx]), kind="stable")]
    weights = {int(j): float(abs(phi[j])) for j in order}
    return SimilarityResult([int(j) for j in order], np.zeros(0), weights)


def _population(embeds):
    if len(embeds) == 0:
        raise ValueError("empty population")
    ids = [e.id for e in embeds]
    Y = np.stack([e.y for e in embeds])
    return ids, Y


def knn_query(embeds: Sequence[EmbeddedPatient], y, K: int) -> SimilarityResult:
    """``K`` nearest embeddings by Euclidean distance; ties keep insertion order."""
    ids, Y = _population(embeds)
    if not 1 <= K <= len(ids):
        raise ValueError(f"K must lie in [1, {len(ids)}]")
    diff = Y - np.asarray(y, dtype=float)
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.argsort(d, kind="stable")[:K]
    return SimilarityResult([ids[i] for i in order], d[order])


def _vote(neighbor_labels):
    counts = Counter(neighbor_labels)
    top = max(counts.values())
    winners = {lab for lab, c in counts.items() if c == top}
    if len(winners) == 1:
        return winners.pop()
    # tie: the nearest neighbor among the tied labels decides
    for lab in neighbor_labels:
        if lab in winners:
            return lab


def knn_classify(train: Sequence[tuple], query, K: int = 5):
    """Majority vote of the ``K`` nearest ``(EmbeddedPatient, label)`` pairs."""
    indexed = [EmbeddedPatient(i, e.y) for i, (e, _) in enumerate(train)]
    res = knn_query(indexed, query, K)
    return _vote([train[i][1] for i in res.neighbor_ids])


def knn_predict_matrix(Y_train, labels_train, Y_query, K: int = 1) -> np.ndarray:
    """Vectorized KNN over column-stacked embeddings, same tie rules as ``knn_classify``."""
    Y_train = np.asarray(Y_train, dtype=float)
    Y_query = np.asarray(Y_query, dtype=float)
    labels_train = np.asarray(labels_train)
    if Y_train.shape[1] == 0:
        raise ValueError("empty population")
    sq_t = np.sum(Y_train**2, axis=0)
    preds = []
    for q in Y_query.T:
        d = sq_t - 2.0 * (q @ Y_train)
        order = np.argsort(d, kind="stable")[:K]
        preds.append(_vote(list(labels_train[order])))
    return np.asarray(preds)


def nearest_neighbor_index(Y_train, q) -> int:
    """Index of the nearest column of ``Y_train`` to ``q`` (for timing comparisons)."""
    diff = Y_train - q[:, None]
    return int(np.argmin(np.einsum("ij,ij->j", diff, diff)))


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    classes: tuple = field(default=(0, 1))
    iterations: int = 0
    converged: bool = False


def _sigmoid(t):
    return np.exp(-np.logaddexp(0.0, -t))


def logreg_train(X, labels, l2: float = 1.0, max_iter: int = 100) -> LogisticModel:
    """Binary L2-regularized logistic regression by Newton's method.

    Rows of ``X`` are samples. The bias is not penalized. Stops when the
    gradient norm of the penalized negative log-likelihood drops below 1e-8.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValueError("logistic regression needs exactly two classes")
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    t = (labels == classes[1]).astype(float)
    n, p = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    reg = np.full(p + 1, l2)
    reg[-1] = 0.0
    w = np.zeros(p + 1)
    w[-1] = np.log(t.mean() / (1 - t.mean()))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = _sigmoid(A @ w)
        grad = A.T @ (prob - t) + reg * w
        if np.linalg.norm(grad) < 1e-8:
            converged = True
            break
        H = (A * (prob * (1 - prob))[:, None]).T @ A + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        w = w - np.linalg.solve(H, grad)
    return LogisticModel(w[:-1], float(w[-1]), tuple(classes.tolist()), it, converged)


def logreg_predict(model: LogisticModel, x):
    """Class label(s) of ``x`` (one sample or rows of samples), threshold 0.5."""
    x = np.asarray(x, dtype=float)
    score = _sigmoid(x @ model.weights + model.bias)
    pick = np.where(score >= 0.5, model.classes[1], model.classes[0])
    return pick.item() if pick.ndim == 0 else pick


def evaluate(predictions, labels, timings=None) -> EvalMetrics:
    """Accuracy, per-class recall and support-weighted recall."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("nothing to evaluate")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    classes = sorted(set(labels.tolist()))
    n = labels.size
    recall = {}
    weighted = 0.0
    for c in classes:
        sel = labels == c
        recall[c] = float(np.mean(predictions[sel] == c))
        weighted += sel.sum() / n * recall[c]
    timings = [] if timings is None else list(timings)
    mean_t = float(np.mean(timings)) if timings else 0.0
    return EvalMetrics(float(np.mean(predictions == labels)), recall, float(weighted), mean_t)


def timed_predictions(predict, queries):
    """Run ``predict`` on each query, returning predictions and per-call seconds."""
    preds, times = [], []
    for q in queries:
        t0 = time.perf_counter()
        preds.append(predict(q))
        times.append(time.perf_counter() - t0)
    return np.asarray(preds), times

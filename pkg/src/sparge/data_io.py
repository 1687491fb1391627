"""Ingestion, preprocessing, synthetic benchmarks and model files.

Orientation is fixed throughout: variables are rows and samples are columns
of every matrix (``X`` is ``m x n``). CSV files use the usual layout (one
sample per row), so loaders transpose.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .graph_embedding import StiefelProjection
from .matrix_recovery import ObservedMatrix
from .sparse_coding import CodeMatrix, Dictionary

DEFAULT_MISSING = frozenset({"", "NA", "NaN", "nan", "null"})


class DataFormatError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ModelDimensionError(ModelFormatError):
    pass


# -- CSV ------------------------------------------------------------------------


def load_csv(path, missing_tokens=DEFAULT_MISSING, label_column: Optional[str] = None):
    """Read a samples-by-variables CSV into an :class:`ObservedMatrix`.

    Returns ``(X_obs, labels, column_names)``; ``labels`` is None unless
    ``label_column`` names a header field. Labels are returned as integers
    when every label parses as one, as strings otherwise.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    label_idx = None
    if label_column is not None:
        if label_column not in header:
            raise DataFormatError(f"{path}: no label column {label_column!r}")
        label_idx = header.index(label_column)
    names = [h for j, h in enumerate(header) if j != label_idx]
    values = np.zeros((len(body), len(names)))
    mask = np.zeros((len(body), len(names)), dtype=bool)
    raw_labels = []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: line {r} has {len(row)} fields, expected {len(header)}")
        c = 0
        for j, cell in enumerate(row):
            if j == label_idx:
                raw_labels.append(cell)
                continue
            token = cell.strip()
            if token not in missing_tokens:
                try:
                    val = float(token)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: line {r}, column {header[j]!r}: cannot parse {cell!r}") from None
                if not math.isfinite(val):
                    raise DataFormatError(f"{path}: line {r}, column {header[j]!r}: non-finite value")
                values[r - 2, c] = val
                mask[r - 2, c] = True
            c += 1
    labels = None
    if label_idx is not None:
        try:
            labels = np.array([int(v) for v in raw_labels])
        except ValueError:
            labels = np.array(raw_labels)
    return ObservedMatrix(values.T.copy(), mask.T.copy()), labels, names


def write_csv(path, X_obs: ObservedMatrix, names: Optional[Sequence[str]] = None,
              labels=None, label_column: str = "label", missing_token: str = "NA"):
    """Write samples as rows; unobserved cells become ``missing_token``."""
    m, n = X_obs.shape
    names = list(names) if names is not None else [f"v{j}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ([label_column] if labels is not None else []))
        for i in range(n):
            row = [repr(float(X_obs.values[j, i])) if X_obs.mask[j, i] else missing_token
                   for j in range(m)]
            if labels is not None:
                row.append(str(labels[i]))
            w.writerow(row)


def write_matrix_csv(path, M, header: Sequence[str]):
    """Write the columns of ``M`` as CSV rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for col in np.asarray(M).T:
            w.writerow([repr(float(v)) for v in col])


# -- encodings and imputation tables -------------------------------------------


@dataclass(frozen=True)
class EncodingMap:
    """Per-column token -> integer maps plus tokens meaning 'missing'."""

    columns: Mapping[str, Mapping[str, int]]
    missing_tokens: frozenset = DEFAULT_MISSING

    def __post_init__(self):
        for col, mapping in self.columns.items():
            if len(set(mapping.values())) != len(mapping):
                raise ValueError(f"encoding for {col!r} is not injective")
            clash = set(mapping) & set(self.missing_tokens)
            if clash:
                raise ValueError(f"encoding for {col!r} reuses missing tokens {sorted(clash)}")


# Example encodings for questionnaire-style variables.
QUESTIONNAIRE_ENCODINGS = {
    "country_of_birth": {"Singaporean": 1, "Others": 2},
    "marital_status": {"Single": 1, "Married": 2, "Widowed": 3},
    "religion": {"Christian/Catholic": 1, "Free thinker": 2, "Buddhist": 3, "Islam": 4,
                 "Hindu": 5, "Taoist": 6, "Others": 7},
    "condition_history": {"Unknown": 0, "Yes": 1, "No": 2},
    "smoking": {"Yes": 1, "No": 2, "Previously": 3},
    "home_work_smoke": {"Never": 1, "Sometimes": 2, "Most of the times": 3},
    "alcohol": {"Yes": 1, "No": 2},
    "coffee_tea_weekly": {"Never/rarely": 1, "< 1 cup a week": 2,
                          ">= 1 cup a week but <= 1 cup a day": 3, "Others": 4},
}


def encode_integer(table: Mapping[str, Sequence[str]], encoding: EncodingMap) -> dict:
    """Replace categorical tokens with integers; missing tokens become NaN.

    ``table`` maps column name to a sequence of string cells. Columns without
    an entry in ``encoding`` must already be numeric.
    """
    out = {}
    for col, cells in table.items():
        mapping = encoding.columns.get(col)
        coded = np.empty(len(cells))
        for i, cell in enumerate(cells):
            token = cell.strip() if isinstance(cell, str) else cell
            if token in encoding.missing_tokens or token is None:
                coded[i] = np.nan
            elif mapping is not None:
                if token not in mapping:
                    raise KeyError(f"column {col!r}: unknown token {token!r}")
                coded[i] = mapping[token]
            else:
                try:
                    coded[i] = float(token)
                except (TypeError, ValueError):
                    raise KeyError(f"column {col!r}: no encoding for {token!r}") from None
        out[col] = coded
    return out


def read_key_value(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def encoding_from_config(cfg: Mapping[str, str]) -> EncodingMap:
    """Build an :class:`EncodingMap` from ``column.token=code`` entries."""
    columns: dict = {}
    missing = set(DEFAULT_MISSING)
    for key, value in cfg.items():
        if key == "missing":
            missing = {t.strip() for t in value.split(",")} | {""}
            continue
        col, _, token = key.partition(".")
        columns.setdefault(col, {})[token] = int(value)
    return EncodingMap(columns, frozenset(missing))


# "Normal" values used to fill gaps in the 17 ICU channels.
NORMAL_VALUES = {
    "Capillary refill rate": 0.0,
    "Diastolic blood pressure": 59.0,
    "Fraction inspired oxygen": 0.21,
    "Glasgow coma scale eye opening": 4,
    "Glasgow coma scale motor response": 6,
    "Glasgow coma scale total": 15,
    "Glasgow coma scale verbal response": 5,
    "Glucose": 128.0,
    "Heart Rate": 86,
    "Height": 170.0,
    "Mean blood pressure": 77.0,
    "Oxygen saturation": 98.0,
    "Respiratory rate": 19,
    "Systolic blood pressure": 118.0,
    "Temperature": 36.6,
    "Weight": 81.0,
    "pH": 7.4,
}


@dataclass(frozen=True)
class ImputePolicy:
    """``mode`` is ``none``, ``normal_values`` or ``weighted_nearby``.

    ``weighted_nearby`` fills a gap with a weighted mean of the ``window``
    nearest observed values of the same variable (nearest by sample index,
    lower index first on ties). ``weights="rank"`` uses 1, 1/2, 1/3, ... by
    proximity rank; ``weights="uniform"`` a plain mean.
    """

    mode: str = "none"
    table: Optional[Mapping[str, float]] = None
    window: int = 10
    weights: str = "rank"

    def __post_init__(self):
        if self.mode not in ("none", "normal_values", "weighted_nearby"):
            raise ValueError(f"unknown impute mode {self.mode!r}")
        if self.mode == "normal_values" and self.table is None:
            raise ValueError("normal_values needs a table")
        if self.weights not in ("rank", "uniform"):
            raise ValueError(f"unknown weighting {self.weights!r}")


def impute(X_obs: ObservedMatrix, policy: ImputePolicy,
           names: Optional[Sequence[str]] = None) -> ObservedMatrix:
    """Fill unobserved cells per variable (row); the result is fully observed."""
    if policy.mode == "none":
        return X_obs
    V = np.array(X_obs.values)
    M = X_obs.mask
    if policy.mode == "normal_values":
        if names is None or len(names) != X_obs.m:
            raise ValueError("normal_values needs one name per variable")
        for j, name in enumerate(names):
            if (~M[j]).any():
                if name not in policy.table:
                    raise KeyError(f"no normal value for {name!r}")
                V[j, ~M[j]] = policy.table[name]
        return ObservedMatrix.full(V)
    for j in range(X_obs.m):
        obs = np.flatnonzero(M[j])
        gaps = np.flatnonzero(~M[j])
        if gaps.size and obs.size == 0:
            name = names[j] if names is not None else j
            raise ValueError(f"variable {name!r} has no observed values")
        for i in gaps:
            order = obs[np.lexsort((obs, np.abs(obs - i)))][: policy.window]
            if policy.weights == "rank":
                w = 1.0 / np.arange(1, order.size + 1)
            else:
                w = np.ones(order.size)
            V[j, i] = float(w @ V[j, order] / w.sum())
    return ObservedMatrix.full(V)


def mean_impute(X_obs: ObservedMatrix) -> ObservedMatrix:
    """Fill gaps with the mean observed value of each variable (0 if none)."""
    counts = X_obs.mask.sum(axis=1)
    means = np.where(counts > 0, X_obs.values.sum(axis=1) / np.maximum(counts, 1), 0.0)
    return ObservedMatrix.full(np.where(X_obs.mask, X_obs.values, means[:, None]))


# -- time series flattening -------------------------------------------------------


@dataclass(frozen=True)
class Channel:
    name: str
    grades: int = 0  # 0 means continuous; otherwise categories 1..grades


# Categorical channels graded on clinical scales; the remaining 12 are continuous.
ICU_CHANNELS = (
    Channel("Capillary refill rate", 2),
    Channel("Diastolic blood pressure"),
    Channel("Fraction inspired oxygen"),
    Channel("Glasgow coma scale eye opening", 4),
    Channel("Glasgow coma scale motor response", 6),
    Channel("Glasgow coma scale total", 13),
    Channel("Glasgow coma scale verbal response", 5),
    Channel("Glucose"),
    Channel("Heart Rate"),
    Channel("Height"),
    Channel("Mean blood pressure"),
    Channel("Oxygen saturation"),
    Channel("Respiratory rate"),
    Channel("Systolic blood pressure"),
    Channel("Temperature"),
    Channel("Weight"),
    Channel("pH"),
)

# Category vocabularies of the public ICU benchmark discretizer, which yield
# 59 value columns; with one observation flag per channel the width is 76.
BENCHMARK_CHANNELS = (
    Channel("Capillary refill rate", 2),
    Channel("Diastolic blood pressure"),
    Channel("Fraction inspired oxygen"),
    Channel("Glasgow coma scale eye opening", 8),
    Channel("Glasgow coma scale motor response", 12),
    Channel("Glasgow coma scale total", 13),
    Channel("Glasgow coma scale verbal response", 12),
    Channel("Glucose"),
    Channel("Heart Rate"),
    Channel("Height"),
    Channel("Mean blood pressure"),
    Channel("Oxygen saturation"),
    Channel("Respiratory rate"),
    Channel("Systolic blood pressure"),
    Channel("Temperature"),
    Channel("Weight"),
    Channel("pH"),
)


def timestep_width(channels: Sequence[Channel], mask_flags: bool = False) -> int:
    width = sum(c.grades if c.grades else 1 for c in channels)
    return width + (len(channels) if mask_flags else 0)


def one_hot_flatten(series, channels: Sequence[Channel], mask_flags: bool = False) -> np.ndarray:
    """Flatten a ``T x channels`` series into one vector, row-major.

    Categorical channels (``grades > 0``, values 1..grades) expand into
    indicator blocks; continuous ones pass through. NaN cells produce zeros,
    and with ``mask_flags`` each timestep also carries one observed/missing
    indicator per channel.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[1] != len(channels):
        raise ValueError(f"series must be T x {len(channels)}")
    T = series.shape[0]
    width = timestep_width(channels, mask_flags)
    out = np.zeros((T, width))
    pos = 0
    for c, ch in enumerate(channels):
        col = series[:, c]
        seen = np.isfinite(col)
        if ch.grades:
            vals = col[seen]
            if np.any(vals != np.round(vals)) or np.any(vals < 1) or np.any(vals > ch.grades):
                raise ValueError(f"channel {ch.name!r}: category outside 1..{ch.grades}")
            rows = np.flatnonzero(seen)
            out[rows, pos + vals.astype(int) - 1] = 1.0
            pos += ch.grades
        else:
            out[seen, pos] = col[seen]
            pos += 1
    if mask_flags:
        out[:, pos:] = np.isfinite(series).astype(float)
    return out.reshape(-1)


# -- normalization and splitting ---------------------------------------------------


def normalize_unit_columns(X):
    """Scale every sample column to unit Euclidean norm.

    Accepts an array or an :class:`ObservedMatrix` (masks are kept). Returns
    ``(normalized, scales)`` with ``original = normalized * scales``.
    """
    if isinstance(X, ObservedMatrix):
        Xn, s = normalize_unit_columns(X.values)
        return ObservedMatrix(Xn, X.mask), s
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"zero columns: {np.flatnonzero(norms == 0).tolist()}")
    return X / norms, norms


def split_train_test(n: int, ratio: float = 0.7, seed: int = 0):
    """Seeded shuffle into ``floor(ratio * n)`` training and remaining test indices."""
    if n < 2:
        raise ValueError("need at least two samples")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratio * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# -- synthetic benchmark -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    subspace_count: int = 3
    ambient_dim: int = 60
    subspace_dim: int = 4
    per_class_count: int = 40
    noise_sigma: float = 0.05
    missing_rate: float = 0.2
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.subspace_dim < self.ambient_dim:
            raise ValueError("need 0 < subspace_dim < ambient_dim")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.subspace_count < 1 or self.per_class_count < 1 or self.noise_sigma < 0:
            raise ValueError("invalid synthetic settings")


def generate_synthetic(spec: SyntheticSpec):
    """Union-of-subspaces data with Gaussian noise and random missing cells.

    Returns ``(X_obs, labels, clean)``: each class spans a random orthonormal
    ``subspace_dim``-dimensional basis, coefficients are standard normal, and
    every cell is hidden independently with probability ``missing_rate``
    (columns that end up fully hidden are redrawn).
    """
    rng = np.random.default_rng(spec.seed)
    m, d, c, ni = spec.ambient_dim, spec.subspace_dim, spec.subspace_count, spec.per_class_count
    blocks = []
    for _ in range(c):
        basis, _ = np.linalg.qr(rng.standard_normal((m, d)))
        blocks.append(basis @ rng.standard_normal((d, ni)))
    clean = np.hstack(blocks)
    labels = np.repeat(np.arange(c), ni)
    noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    mask = rng.random(clean.shape) >= spec.missing_rate
    empty = ~mask.any(axis=0)
    while empty.any():
        mask[:, empty] = rng.random((m, int(empty.sum()))) >= spec.missing_rate
        empty = ~mask.any(axis=0)
    return ObservedMatrix.from_arrays(noisy, mask), labels, clean


# -- SPARGE1 model files ----------------------------------------------------------------

MAGIC = b"SPARGE1\n"


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text, like):
    if isinstance(like, bool):
        return text == "true"
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def save_model(model, path):
    """Write a model in the SPARGE1 format.

    Layout: the magic line ``SPARGE1``, ``key=value`` header lines (dimensions,
    mode, hyperparameters, labels), an ``end`` line, then little-endian
    float64 payloads of ``Z``, ``D``, ``Phi`` and ``U`` in row-major order.
    """
    Z, D, Phi, U = model.Z, model.D.atoms, model.Phi.codes, model.U.U
    m, n = Z.shape
    k, l = U.shape
    header = [f"m={m}", f"n={n}", f"k={k}", f"l={l}", f"mode={model.hyperparams.mode}"]
    for f in fields(model.hyperparams):
        if f.name == "mode":
            continue
        header.append(f"hp.{f.name}={_format_value(getattr(model.hyperparams, f.name))}")
    if model.labels is not None:
        labels = np.asarray(model.labels)
        kind = "int" if labels.dtype.kind in "iu" else "str"
        header.append(f"labels.{kind}=" + ",".join(str(v) for v in labels.tolist()))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(("\n".join(header) + "\nend\n").encode())
    for arr in (Z, D, Phi, U):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path):
    """Read a SPARGE1 file back into a :class:`~sparge.trainer.SpargeModel`."""
    from .trainer import Hyperparams, SpargeModel

    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ModelVersionError(f"{path}: not a SPARGE1 model file")
    end = data.find(b"\nend\n", len(MAGIC) - 1)
    if end < 0:
        raise ModelFormatError(f"{path}: truncated header")
    header = {}
    for line in data[len(MAGIC):end].decode().splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    try:
        m, n, k, l = (int(header[key]) for key in ("m", "n", "k", "l"))
    except (KeyError, ValueError):
        raise ModelFormatError(f"{path}: missing dimensions") from None
    payload = data[end + len(b"\nend\n"):]
    expected = 8 * (m * n + m * k + k * n + k * l)
    if len(payload) != expected:
        raise ModelDimensionError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    defaults = Hyperparams()
    hp_kwargs = {"mode": header.get("mode", defaults.mode)}
    for f in fields(Hyperparams):
        key = f"hp.{f.name}"
        if key in header:
            hp_kwargs[f.name] = _parse_value(header[key], getattr(defaults, f.name))
    hp = Hyperparams(**hp_kwargs)
    labels = None
    if "labels.int" in header:
        labels = np.array([int(v) for v in header["labels.int"].split(",")]) if n else np.zeros(0, int)
    elif "labels.str" in header:
        labels = np.array(header["labels.str"].split(","))
    arrays = []
    offset = 0
    for shape in ((m, n), (m, k), (k, n), (k, l)):
        size = shape[0] * shape[1]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape)
        arrays.append(arr.astype(float))
        offset += 8 * size
    Z, D, Phi, U = arrays
    return SpargeModel(Z, Dictionary(D), CodeMatrix(Phi), StiefelProjection(U), hp, labels)


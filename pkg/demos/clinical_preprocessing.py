"""
Turning a clinical table into a matrix
======================================

Integer encoding of questionnaire answers, gap filling with normal values or
nearby measurements, and one-hot flattening of an ICU time series.
"""

import numpy as np

from sparge.data_io import (
    BENCHMARK_CHANNELS,
    NORMAL_VALUES,
    QUESTIONNAIRE_ENCODINGS,
    EncodingMap,
    ImputePolicy,
    encode_integer,
    impute,
    normalize_unit_columns,
    one_hot_flatten,
    timestep_width,
)
from sparge.matrix_recovery import ObservedMatrix

###############################################################################
# Categorical answers
# -------------------
# Every coded column maps tokens to integers; missing tokens become NaN.

answers = {
    "smoking": ["Yes", "No", "NA", "Previously"],
    "marital_status": ["Married", "Single", "Widowed", ""],
}
coded = encode_integer(answers, EncodingMap(QUESTIONNAIRE_ENCODINGS))
for col, values in coded.items():
    print(f"{col:>15}: {values}")

###############################################################################
# Filling gaps
# ------------
# Variables are rows and patients are columns. The first policy uses a table
# of normal values; the second averages the nearest observed readings of the
# same variable, weighting closer readings more.

names = ["Heart Rate", "Temperature"]
X = ObservedMatrix.from_arrays([[80.0, np.nan, 95.0, 101.0],
                                [37.1, 36.9, np.nan, 38.2]])
normal = impute(X, ImputePolicy("normal_values", NORMAL_VALUES), names)
nearby = impute(X, ImputePolicy("weighted_nearby", window=10))
print("normal values:\n", normal.values)
print("nearby readings:\n", np.round(nearby.values, 3))

unit, scales = normalize_unit_columns(normal.values)
print("column norms after scaling:", np.linalg.norm(unit, axis=0))

###############################################################################
# Flattening a 48-hour stay
# -------------------------
# Categorical channels expand into indicator blocks and every channel gets a
# missing-value flag, giving 76 numbers per hour.

rng = np.random.default_rng(1)
T = 48
series = np.full((T, len(BENCHMARK_CHANNELS)), np.nan)
for c, ch in enumerate(BENCHMARK_CHANNELS):
    seen = rng.random(T) < 0.4
    if ch.grades:
        series[seen, c] = rng.integers(1, ch.grades + 1, seen.sum())
    else:
        series[seen, c] = rng.normal(size=seen.sum())
flat = one_hot_flatten(series, BENCHMARK_CHANNELS, mask_flags=True)
print("width per hour:", timestep_width(BENCHMARK_CHANNELS, mask_flags=True))
print("flattened length:", flat.size)

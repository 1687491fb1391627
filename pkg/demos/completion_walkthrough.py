"""
Filling holes in a low-rank matrix
==================================

Singular value thresholding on its own, then a full completion run on a
masked rank-2 matrix.
"""

import numpy as np

from sparge.matrix_recovery import (
    ObservedMatrix,
    complete_low_rank,
    nuclear_norm,
    shrink_singular_values,
)

###############################################################################
# Shrinking singular values
# -------------------------
# Thresholding subtracts ``zeta`` from every singular value and clips at zero.
# Small singular values vanish, so the rank drops.

rng = np.random.default_rng(0)
Q = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5)) + 0.05 * rng.standard_normal((6, 5))
res = shrink_singular_values(Q, 0.3)
print("before:", np.round(res.singular_values_before, 3))
print("after: ", np.round(res.singular_values_after, 3))
print("rank after shrinking:", res.rank)

###############################################################################
# Completing a masked matrix
# --------------------------
# Hide 30% of a 20 x 20 rank-2 matrix. Unobserved cells are stored as zeros
# with a false mask bit and are never read.

M = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 20))
mask = rng.random(M.shape) >= 0.3
X = ObservedMatrix.from_arrays(M, mask)
print(f"observed cells: {mask.mean():.0%}")

res = complete_low_rank(X, 0.05, step=0.5, tol=1e-12, max_iter=30000, return_info=True)
Z = res.Z
print("relative error on hidden cells:",
      np.linalg.norm((Z - M)[~mask]) / np.linalg.norm(M[~mask]))
print("nuclear norm, truth vs recovered:", round(nuclear_norm(M), 3), round(nuclear_norm(Z), 3))
print("objective at first and last iterate:", res.objective_trace[0], res.objective_trace[-1])

import warnings

import numpy as np
import pytest

from oracles import completion_2x2_oracle, svt_oracle
from sparge.matrix_recovery import (
    ConvergenceWarning,
    InvalidMaskError,
    ObservedMatrix,
    complete_low_rank,
    completion_objective,
    nuclear_norm,
    shrink_singular_values,
    soft_threshold_scalar,
)

# Minimizer of ||(Z - X)_obs||^2 + 1e-3 ||Z||_* for X = [[1, 2], [2, ?]],
# frozen from completion_2x2_oracle (derivative-free search over all entries).
COMPLETION_2X2_MISSING = 1.00000003


class TestObservedMatrix:
    def test_nan_marks_unobserved(self):
        X = ObservedMatrix.from_arrays([[1.0, np.nan], [2.0, 3.0]])
        assert X.mask.tolist() == [[True, False], [True, True]]
        assert X.values[0, 1] == 0.0

    def test_rejects_nonzero_unobserved_cell(self):
        with pytest.raises(InvalidMaskError):
            ObservedMatrix(np.array([[1.0, 5.0]]), np.array([[True, False]]))

    def test_rejects_empty_column(self):
        with pytest.raises(InvalidMaskError):
            ObservedMatrix(np.zeros((2, 2)), np.array([[True, False], [True, False]]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InvalidMaskError):
            ObservedMatrix(np.zeros((2, 2)), np.ones((2, 3), bool))

    def test_arrays_are_read_only(self):
        X = ObservedMatrix.full(np.ones((2, 2)))
        with pytest.raises(ValueError):
            X.values[0, 0] = 2.0


@pytest.mark.parametrize("x, zeta, expected", [(1.0, 0.1, 0.9), (0.05, 0.1, 0.0), (-0.5, 0.1, 0.0)])
def test_soft_threshold_scalar(x, zeta, expected):
    assert soft_threshold_scalar(x, zeta) == pytest.approx(expected, abs=1e-15)


class TestShrink:
    def test_diagonal_example(self):
        res = shrink_singular_values(np.diag([3.0, 0.5]), 1.0)
        np.testing.assert_allclose(res.matrix, np.diag([2.0, 0.0]), atol=1e-12)
        np.testing.assert_allclose(res.singular_values_after, [2.0, 0.0], atol=1e-12)
        assert res.rank == 1

    def test_zero_threshold_is_identity(self):
        Q = np.random.default_rng(0).standard_normal((4, 6))
        np.testing.assert_array_equal(shrink_singular_values(Q, 0.0).matrix, Q)

    def test_matches_prox_oracle_5x4(self):
        Q = np.random.default_rng(1).standard_normal((5, 4))
        got = shrink_singular_values(Q, 0.3).matrix
        assert np.linalg.norm(got - svt_oracle(Q, 0.3)) < 1e-6

    def test_singular_value_contract(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            Q = rng.standard_normal(tuple(rng.integers(1, 9, 2)))
            zeta = rng.uniform(0, 2)
            res = shrink_singular_values(Q, zeta)
            np.testing.assert_allclose(res.singular_values_after,
                                       np.maximum(res.singular_values_before - zeta, 0), atol=1e-10)
            assert np.all(np.diff(res.singular_values_before) <= 0)
            assert res.rank == np.linalg.matrix_rank(res.matrix, tol=1e-9) or res.rank == 0

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            shrink_singular_values(np.eye(2), -1.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            shrink_singular_values(np.array([[np.inf, 0.0], [0.0, 1.0]]), 0.1)


class TestCompletion:
    def test_fully_observed_tiny_lambda_is_identity(self):
        X = np.random.default_rng(3).standard_normal((6, 5))
        Z = complete_low_rank(ObservedMatrix.full(X), 1e-12)
        np.testing.assert_allclose(Z, X, atol=1e-8)

    def test_two_by_two_matches_oracle(self):
        X = ObservedMatrix(np.array([[1.0, 2.0], [2.0, 0.0]]),
                           np.array([[True, True], [True, False]]))
        Z = complete_low_rank(X, 1e-3, step=0.5, tol=1e-15, max_iter=100000)
        assert Z[1, 1] == pytest.approx(COMPLETION_2X2_MISSING, abs=1e-3)

    @pytest.mark.slow
    def test_two_by_two_oracle_value_is_frozen(self):
        assert completion_2x2_oracle(1e-3)[1, 1] == pytest.approx(COMPLETION_2X2_MISSING, abs=1e-6)

    def test_objective_nonincreasing(self):
        rng = np.random.default_rng(4)
        M = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 9))
        mask = rng.random(M.shape) > 0.3
        mask[0] = True
        X = ObservedMatrix.from_arrays(M, mask)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = complete_low_rank(X, 0.1, max_iter=300, return_info=True)
        assert np.all(np.diff(res.objective_trace) <= 1e-12)
        assert completion_objective(res.Z, X, 0.1) == pytest.approx(min(res.objective_trace))

    def test_unobserved_cells_are_never_read(self):
        rng = np.random.default_rng(5)
        M = rng.standard_normal((7, 6))
        mask = rng.random(M.shape) > 0.3
        mask[0] = True
        junk = np.where(mask, M, rng.standard_normal(M.shape) * 100)
        Z1 = complete_low_rank(ObservedMatrix.from_arrays(M, mask), 0.2, max_iter=50)
        Z2 = complete_low_rank(ObservedMatrix.from_arrays(junk, mask), 0.2, max_iter=50)
        np.testing.assert_array_equal(Z1, Z2)

    def test_rank2_recovery(self):
        rng = np.random.default_rng(6)
        M = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 20))
        mask = rng.random(M.shape) >= 0.3
        X = ObservedMatrix.from_arrays(M, mask)
        Z = complete_low_rank(X, 0.05, step=0.5, tol=1e-12, max_iter=30000)
        assert np.linalg.norm(Z - M) / np.linalg.norm(M) < 0.05

    def test_warns_when_not_converged(self):
        X = ObservedMatrix.full(np.random.default_rng(7).standard_normal((5, 5)))
        with pytest.warns(ConvergenceWarning):
            complete_low_rank(X, 0.5, tol=1e-16, max_iter=2)

    def test_invalid_arguments(self):
        X = ObservedMatrix.full(np.eye(2))
        for kwargs in ({"lam": 0.0}, {"lam": 1.0, "step": 0.0}, {"lam": 1.0, "max_iter": 0}):
            with pytest.raises(ValueError):
                complete_low_rank(X, **kwargs)

    def test_nuclear_norm(self):
        assert nuclear_norm(np.diag([3.0, -2.0])) == pytest.approx(5.0)

import math

import numpy as np
import pytest

from sparge.data_io import (
    BENCHMARK_CHANNELS,
    ICU_CHANNELS,
    NORMAL_VALUES,
    QUESTIONNAIRE_ENCODINGS,
    Channel,
    DataFormatError,
    EncodingMap,
    ImputePolicy,
    ModelDimensionError,
    ModelFormatError,
    ModelVersionError,
    SyntheticSpec,
    encode_integer,
    encoding_from_config,
    generate_synthetic,
    impute,
    load_csv,
    load_model,
    mean_impute,
    normalize_unit_columns,
    one_hot_flatten,
    read_key_value,
    save_model,
    split_train_test,
    timestep_width,
    write_csv,
)
from sparge.matrix_recovery import ObservedMatrix
from sparge.trainer import Hyperparams, fit


class TestCsv:
    def test_one_missing_cell(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y\n1,NA\n2,3\n")
        X, labels, names = load_csv(p)
        assert (~X.mask).sum() == 1 and not X.mask[1, 0]
        assert labels is None and names == ["x", "y"]
        np.testing.assert_array_equal(X.values, [[1.0, 2.0], [0.0, 3.0]])

    def test_empty_cell_is_missing(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y\n1,\n2,3\n")
        assert load_csv(p)[0].mask.sum() == 3

    def test_label_column(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,cls,y\n1,a,2\n3,b,4\n")
        X, labels, names = load_csv(p, label_column="cls")
        assert names == ["x", "y"] and labels.tolist() == ["a", "b"]
        np.testing.assert_array_equal(X.values, [[1, 3], [2, 4]])

    def test_integer_labels(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,label\n1,0\n3,2\n")
        assert load_csv(p, label_column="label")[1].dtype.kind == "i"

    def test_ragged_row_located(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y\n1,2\n3\n")
        with pytest.raises(DataFormatError, match="line 3"):
            load_csv(p)

    def test_unparseable_cell_located(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y\n1,2\n3,abc\n")
        with pytest.raises(DataFormatError, match=r"line 3, column 'y'"):
            load_csv(p)

    def test_custom_missing_tokens(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y\n?,1\n1,?\n")
        assert load_csv(p, missing_tokens={"?"})[0].mask.tolist() == [[False, True], [True, False]]

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        X = ObservedMatrix.from_arrays(rng.standard_normal((4, 7)), rng.random((4, 7)) > 0.3)
        p = tmp_path / "r.csv"
        write_csv(p, X, labels=list(range(7)))
        Y, labels, _ = load_csv(p, label_column="label")
        np.testing.assert_array_equal(Y.values, X.values)
        np.testing.assert_array_equal(Y.mask, X.mask)
        assert labels.tolist() == list(range(7))

    def test_quoted_fields(self, tmp_path):
        p = tmp_path / "q.csv"
        p.write_text('"a,b",label\n1.5,"x, y"\n')
        X, labels, names = load_csv(p, label_column="label")
        assert names == ["a,b"] and labels.tolist() == ["x, y"]


class TestEncoding:
    ENC = EncodingMap(QUESTIONNAIRE_ENCODINGS)

    def test_smoking(self):
        out = encode_integer({"smoking": ["Yes", "No"]}, self.ENC)
        assert out["smoking"].tolist() == [1, 2]

    def test_marital_status(self):
        out = encode_integer({"marital_status": ["Single", "Married", "Widowed"]}, self.ENC)
        assert out["marital_status"].tolist() == [1, 2, 3]

    def test_missing_preserved(self):
        out = encode_integer({"smoking": ["Yes", "NA", ""]}, self.ENC)
        assert out["smoking"][0] == 1 and np.isnan(out["smoking"][1:]).all()

    def test_unknown_token_named(self):
        with pytest.raises(KeyError, match="smoking.*Maybe"):
            encode_integer({"smoking": ["Maybe"]}, self.ENC)

    def test_maps_are_injective(self):
        for mapping in QUESTIONNAIRE_ENCODINGS.values():
            assert len(set(mapping.values())) == len(mapping)

    def test_non_injective_rejected(self):
        with pytest.raises(ValueError):
            EncodingMap({"c": {"a": 1, "b": 1}})

    def test_missing_token_clash_rejected(self):
        with pytest.raises(ValueError):
            EncodingMap({"c": {"NA": 1}})

    def test_from_config_file(self, tmp_path):
        p = tmp_path / "enc.cfg"
        p.write_text("# codes\nsmoking.Yes=1\nsmoking.No=2\nmissing=?\n")
        enc = encoding_from_config(read_key_value(p))
        out = encode_integer({"smoking": ["No", "?"]}, enc)
        assert out["smoking"][0] == 2 and math.isnan(out["smoking"][1])

    def test_bad_config_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("novalue\n")
        with pytest.raises(DataFormatError):
            read_key_value(p)


def ones(n):
    # an always-observed companion variable keeps every sample column non-empty
    return [1.0] * n


class TestImpute:
    def test_heart_rate_and_temperature(self):
        X = ObservedMatrix.from_arrays([[80.0, np.nan], [np.nan, 37.0]])
        out = impute(X, ImputePolicy("normal_values", NORMAL_VALUES), ["Heart Rate", "Temperature"])
        assert out.values[0, 1] == 86 and out.values[1, 0] == 36.6
        assert out.mask.all()

    def test_table_covers_all_channels(self):
        assert len(NORMAL_VALUES) == 17
        assert {c.name for c in ICU_CHANNELS} == set(NORMAL_VALUES)

    def test_nearby_uniform(self):
        X = ObservedMatrix.from_arrays([[1.0, np.nan, 3.0], ones(3)])
        out = impute(X, ImputePolicy("weighted_nearby", weights="uniform"))
        assert out.values[0, 1] == 2.0

    def test_nearby_rank_weights(self):
        X = ObservedMatrix.from_arrays([[1.0, np.nan, 3.0, 7.0], ones(4)])
        out = impute(X, ImputePolicy("weighted_nearby"))
        # neighbors by distance: index 0 (tie, lower first), 2, then 3
        assert out.values[0, 1] == pytest.approx((1 * 1 + 3 / 2 + 7 / 3) / (1 + 1 / 2 + 1 / 3))

    def test_window_limits_neighbors(self):
        X = ObservedMatrix.from_arrays([[1.0, np.nan, 5.0, 100.0], ones(4)])
        out = impute(X, ImputePolicy("weighted_nearby", window=2, weights="uniform"))
        assert out.values[0, 1] == 3.0

    def test_all_missing_variable_rejected(self):
        X = ObservedMatrix.from_arrays([[1.0, 2.0], [np.nan, np.nan]])
        with pytest.raises(ValueError):
            impute(X, ImputePolicy("weighted_nearby"))

    def test_none_is_identity(self):
        X = ObservedMatrix.from_arrays([[1.0, np.nan], ones(2)])
        assert impute(X, ImputePolicy()) is X

    def test_missing_table_entry(self):
        X = ObservedMatrix.from_arrays([[np.nan, 1.0], ones(2)])
        with pytest.raises(KeyError):
            impute(X, ImputePolicy("normal_values", {"Bar": 0.0}), ["Foo", "Bar"])

    def test_mean_impute(self):
        X = ObservedMatrix.from_arrays([[1.0, np.nan, 3.0], ones(3)])
        assert mean_impute(X).values[0].tolist() == [1.0, 2.0, 3.0]


class TestOneHot:
    def test_eye_opening_block(self):
        ch = [Channel("Glasgow coma scale eye opening", 4)]
        assert one_hot_flatten([[4.0]], ch).tolist() == [0, 0, 0, 1]

    def test_benchmark_length(self):
        assert timestep_width(BENCHMARK_CHANNELS, mask_flags=True) == 76
        series = np.full((48, 17), np.nan)
        assert one_hot_flatten(series, BENCHMARK_CHANNELS, mask_flags=True).size == 3648

    def test_all_continuous_is_reshape(self):
        rng = np.random.default_rng(1)
        S = rng.standard_normal((5, 3))
        chans = [Channel(f"c{i}") for i in range(3)]
        np.testing.assert_array_equal(one_hot_flatten(S, chans), S.reshape(-1))

    def test_out_of_range_category(self):
        with pytest.raises(ValueError):
            one_hot_flatten([[5.0]], [Channel("eye", 4)])

    def test_mixed_layout(self):
        chans = [Channel("a"), Channel("b", 3)]
        out = one_hot_flatten([[0.5, 2.0], [np.nan, np.nan]], chans, mask_flags=True)
        assert out.tolist() == [0.5, 0, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0]


class TestNormalize:
    def test_arithmetic(self):
        Xn, s = normalize_unit_columns(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(Xn.ravel(), [0.6, 0.8], atol=1e-15)
        assert s.tolist() == [5.0]

    def test_idempotent_on_unit_column(self):
        x = np.array([[0.6], [0.8]])
        np.testing.assert_array_equal(normalize_unit_columns(x)[0], x)

    def test_unit_norms_and_angles(self):
        X = np.random.default_rng(2).standard_normal((6, 9)) * 10
        Xn, s = normalize_unit_columns(X)
        assert np.max(np.abs(np.linalg.norm(Xn, axis=0) - 1)) < 1e-12
        cos = (X.T @ X) / np.outer(s, s)
        assert np.max(np.abs(Xn.T @ Xn - cos)) < 1e-12
        np.testing.assert_allclose(Xn * s, X, rtol=1e-14)

    def test_zero_column(self):
        with pytest.raises(ValueError):
            normalize_unit_columns(np.zeros((2, 1)))

    def test_mask_kept(self):
        X = ObservedMatrix.from_arrays([[3.0, np.nan], [4.0, 2.0]])
        Xn, _ = normalize_unit_columns(X)
        np.testing.assert_array_equal(Xn.mask, X.mask)


class TestSplit:
    def test_seventy_percent(self):
        tr, te = split_train_test(10, 0.7, seed=0)
        assert len(tr) == 7 and len(te) == 3

    def test_deterministic(self):
        a = split_train_test(50, 0.7, seed=3)
        b = split_train_test(50, 0.7, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_partition(self):
        tr, te = split_train_test(31, 0.4, seed=1)
        assert set(tr) | set(te) == set(range(31)) and not set(tr) & set(te)

    @pytest.mark.parametrize("n, ratio", [(1, 0.5), (10, 0.0), (10, 1.0)])
    def test_invalid(self, n, ratio):
        with pytest.raises(ValueError):
            split_train_test(n, ratio)


class TestSynthetic:
    def test_noiseless_fully_observed(self):
        X, labels, clean = generate_synthetic(SyntheticSpec(3, 12, 2, 5, 0.0, 0.0, 1))
        assert X.mask.all()
        np.testing.assert_array_equal(X.values, clean)
        assert labels.tolist() == [0] * 5 + [1] * 5 + [2] * 5

    def test_missing_count_binomial(self):
        X, _, _ = generate_synthetic(SyntheticSpec(2, 20, 3, 25, 0.05, 0.2, 5))
        assert X.values.size == 1000
        sd = math.sqrt(1000 * 0.2 * 0.8)
        assert abs((~X.mask).sum() - 200) <= 3 * sd

    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(seed=9))
        b = generate_synthetic(SyntheticSpec(seed=9))
        np.testing.assert_array_equal(a[0].values, b[0].values)
        np.testing.assert_array_equal(a[0].mask, b[0].mask)
        np.testing.assert_array_equal(a[2], b[2])

    def test_rank_bound(self):
        _, _, clean = generate_synthetic(SyntheticSpec(3, 30, 4, 20, 0.0, 0.0, 2))
        s = np.linalg.svd(clean, compute_uv=False)
        assert np.all(s[12:] < 1e-8) and s[11] > 1e-3

    def test_no_empty_columns_at_high_rate(self):
        X, _, _ = generate_synthetic(SyntheticSpec(2, 3, 1, 50, 0.0, 0.9, 0))
        assert X.mask.any(axis=0).all()

    @pytest.mark.parametrize("kw", [dict(subspace_dim=60), dict(missing_rate=1.0), dict(noise_sigma=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)


@pytest.fixture(scope="module")
def model():
    X, labels, _ = generate_synthetic(SyntheticSpec(2, 8, 2, 6, 0.05, 0.1, 4))
    return fit(X, labels, Hyperparams(k=5, l=2, k1=2, k2=2, max_iter=2, ksvd_iter=3,
                                      completion_iter=50, grad_tol=math.inf))[0]


class TestModelFile:
    def test_round_trip_bitwise(self, model, tmp_path):
        p = tmp_path / "m.sparge"
        save_model(model, p)
        back = load_model(p)
        for a, b in ((model.Z, back.Z), (model.D.atoms, back.D.atoms),
                     (model.Phi.codes, back.Phi.codes), (model.U.U, back.U.U)):
            assert a.tobytes() == b.tobytes()
        assert back.hyperparams == model.hyperparams
        np.testing.assert_array_equal(back.labels, model.labels)

    def test_header_layout(self, model, tmp_path):
        p = tmp_path / "m.sparge"
        save_model(model, p)
        head = p.read_bytes().split(b"\nend\n")[0].decode().splitlines()
        assert head[0] == "SPARGE1"
        assert head[1:6] == ["m=8", "n=12", "k=5", "l=2", "mode=supervised"]
        assert "hp.gamma=0.001" in head

    def test_bad_magic(self, model, tmp_path):
        p = tmp_path / "m.sparge"
        save_model(model, p)
        p.write_bytes(b"SPARGE2" + p.read_bytes()[7:])
        with pytest.raises(ModelVersionError):
            load_model(p)

    def test_truncated_payload(self, model, tmp_path):
        p = tmp_path / "m.sparge"
        save_model(model, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ModelDimensionError):
            load_model(p)

    def test_dimension_mismatch(self, model, tmp_path):
        p = tmp_path / "m.sparge"
        save_model(model, p)
        p.write_bytes(p.read_bytes().replace(b"\nk=5\n", b"\nk=6\n", 1))
        with pytest.raises(ModelDimensionError):
            load_model(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "m.sparge"
        p.write_bytes(b"SPARGE1\nm=3\n")
        with pytest.raises(ModelFormatError):
            load_model(p)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from sklearn.neighbors import KNeighborsClassifier
from sklearn.preprocessing import MinMaxScaler

from iomtguard.data import (DataError, Dataset, FeatureMask, FeatureSchema, MinMaxNormalizer, apply_mask,
                            kfold_indices, kfold_split, load_csv, normalize, save_csv, stratified_split,
                            synth_generate)


def schema2(labels=("normal", "dos")):
    return FeatureSchema(("a", "b"), {n: i for i, n in enumerate(labels)})


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def make(X, y=None, names=None):
    X = np.asarray(X, dtype=float)
    names = names or tuple(f"f{i}" for i in range(X.shape[1]))
    y = np.zeros(len(X), dtype=int) if y is None else np.asarray(y)
    return Dataset(FeatureSchema(names, {"normal": 0, "attack": 1}), X, y)


# ----------------------------------------------------------- schema

def test_schema_rejects_duplicate_names():
    with pytest.raises(DataError, match="unique"):
        FeatureSchema(("a", "a"), {"x": 0, "y": 1})


def test_schema_needs_two_classes():
    with pytest.raises(DataError, match="at least 2"):
        FeatureSchema(("a",), {"x": 0})


def test_schema_categorical_must_be_bijection():
    with pytest.raises(DataError, match="must map onto"):
        FeatureSchema(("a",), {"x": 0, "y": 1}, {"a": {"tcp": 0, "udp": 2}})


def test_schema_json_round_trip(tmp_path):
    s = FeatureSchema(("proto", "b"), {"normal": 0, "dos": 1}, {"proto": {"tcp": 0, "udp": 1}})
    s.save(tmp_path / "s.json")
    assert FeatureSchema.load(tmp_path / "s.json") == s


def test_benign_class_binary_and_multiclass():
    assert schema2().benign_class == 0
    s = FeatureSchema(("a",), {"dos": 0, "normal": 1, "probe": 2}, positive_class=0)
    assert s.benign_class == 1


# --------------------------------------------------------- load_csv

def test_load_three_rows(tmp_path):
    p = write(tmp_path, "1,10,normal\n2,30,dos\n3,20,normal\n")
    d = load_csv(p, schema2())
    assert d.n_features == 2 and len(d) == 3
    np.testing.assert_array_equal(d.feature_min, [1, 10])
    np.testing.assert_array_equal(d.feature_max, [3, 30])
    np.testing.assert_array_equal(d.y, [0, 1, 0])


def test_load_unknown_label(tmp_path):
    p = write(tmp_path, "1,2,normal\n1,2,xyz\n")
    with pytest.raises(DataError, match="unknown label 'xyz' at row 2"):
        load_csv(p, schema2())


def test_load_bad_column_count(tmp_path):
    p = write(tmp_path, "1,2,normal\n1,normal\n")
    with pytest.raises(DataError, match="row 2: expected 3 columns, got 2"):
        load_csv(p, schema2())


def test_load_unparseable_number_names_column(tmp_path):
    p = write(tmp_path, "1,2,normal\n1,zz,normal\n")
    with pytest.raises(DataError, match=r"row 2, column 2 \('b'\)"):
        load_csv(p, schema2())


def test_load_unknown_category(tmp_path):
    s = FeatureSchema(("proto", "b"), {"normal": 0, "dos": 1}, {"proto": {"tcp": 0, "udp": 1}})
    p = write(tmp_path, "tcp,1,normal\nicmp,2,dos\n")
    with pytest.raises(DataError, match="unknown category 'icmp' at row 2"):
        load_csv(p, s)


def test_header_flag(tmp_path):
    p = write(tmp_path, "a,b,label\n1,2,dos\n")
    assert len(load_csv(p, schema2(), header=True)) == 1


def test_41_feature_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    names = tuple(f"f{i}" for i in range(41))
    cats = {"f1": {"tcp": 0, "udp": 1, "icmp": 2}, "f2": {"http": 0, "ftp": 1}}
    s = FeatureSchema(names, {"normal": 0, "attack": 1}, cats)
    lines = []
    for r in range(10):
        vals = [repr(float(v)) for v in rng.normal(size=41)]
        vals[1] = ["tcp", "udp", "icmp"][r % 3]
        vals[2] = ["http", "ftp"][r % 2]
        lines.append(",".join(vals + [["normal", "attack"][r % 2]]))
    p = write(tmp_path, "\n".join(lines) + "\n")
    d = load_csv(p, s)
    assert d.n_features == 41 and len(d) == 10
    save_csv(d, tmp_path / "out.csv")
    assert (tmp_path / "out.csv").read_text() == p.read_text()
    assert load_csv(tmp_path / "out.csv", s).equals(d)


# -------------------------------------------------------- normalize

def test_normalize_column():
    d = normalize(make([[2.0], [4.0], [6.0]]))
    np.testing.assert_array_equal(d.X[:, 0], [0, 0.5, 1])


def test_normalize_constant_column():
    d = normalize(make([[5.0], [5.0]]))
    np.testing.assert_array_equal(d.X[:, 0], [0, 0])


def test_normalize_already_normalized():
    d = normalize(make([[0.0], [1.0]]))
    np.testing.assert_array_equal(d.X[:, 0], [0, 1])


def test_normalize_records_source_range():
    d = normalize(make([[2.0, 1.0], [6.0, 1.0]]))
    assert d.meta["source_min"] == [2.0, 1.0] and d.meta["source_max"] == [6.0, 1.0]


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 5)),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_normalize_range_and_idempotence(X):
    once = normalize(make(X))
    assert once.X.min() >= 0.0 and once.X.max() <= 1.0
    twice = normalize(once)
    np.testing.assert_array_equal(once.X, twice.X)


def test_minmax_normalizer_matches_sklearn():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 4)) * [1, 10, 100, 0.1]
    ours = MinMaxNormalizer().fit(X)
    ref = MinMaxScaler().fit(X)
    np.testing.assert_allclose(ours.transform(X), ref.transform(X), atol=1e-12)
    assert ours.transform(X * 10).max() <= 1.0


# ------------------------------------------------------------- mask

def test_apply_mask_101():
    d = apply_mask(make([[1.0, 2.0, 3.0]], names=("a", "b", "c")), FeatureMask([1, 0, 1]))
    np.testing.assert_array_equal(d.X, [[1, 3]])
    assert d.schema.feature_names == ("a", "c")


def test_apply_mask_all_ones_identity():
    d = make(np.arange(12.0).reshape(4, 3))
    assert apply_mask(d, FeatureMask.all_ones(3)).equals(d)


def test_apply_mask_single_bit_of_41():
    d = make(np.ones((3, 41)))
    bits = np.zeros(41, dtype=np.int8)
    bits[17] = 1
    assert apply_mask(d, FeatureMask(bits)).n_features == 1


def test_apply_mask_length_mismatch():
    with pytest.raises(DataError):
        apply_mask(make(np.ones((2, 3))), FeatureMask([1, 1]))


def test_empty_mask_repaired():
    m = FeatureMask([0, 0, 0])
    assert m.count == 1


# ------------------------------------------------------------ split

def test_stratified_split_balanced():
    d = make(np.zeros((100, 1)), np.repeat([0, 1], 50))
    tr, te = stratified_split(d, 0.2, 0)
    assert len(tr) == 80 and len(te) == 20
    assert np.sum(te.y == 0) == 10 and np.sum(te.y == 1) == 10


def test_stratified_split_deterministic():
    d = make(np.arange(100.0)[:, None], np.repeat([0, 1], 50))
    a, b = stratified_split(d, 0.2, 5), stratified_split(d, 0.2, 5)
    assert a[1].equals(b[1])


def test_stratified_split_imbalanced():
    d = make(np.zeros((100, 1)), np.r_[np.zeros(90, int), np.ones(10, int)])
    _, te = stratified_split(d, 0.2, 0)
    assert np.sum(te.y == 0) == 18 and np.sum(te.y == 1) == 2


def test_stratified_split_small_class_error():
    d = make(np.zeros((5, 1)), [0, 0, 0, 0, 1])
    with pytest.raises(DataError):
        stratified_split(d, 0.2, 0)


def test_kfold_leave_one_out():
    d = make(np.arange(10.0)[:, None], np.repeat([0, 1], 5))
    folds = kfold_split(d, 10, 0)
    assert [len(te) for _, te in folds] == [1] * 10


def test_kfold_sizes_4_3_3():
    d = make(np.arange(10.0)[:, None], np.repeat([0, 1], 5))
    assert sorted(len(te) for _, te in kfold_split(d, 3, 0)) == [3, 3, 4]


def test_kfold_too_many_folds():
    with pytest.raises(DataError):
        kfold_indices(np.zeros(3, int), 4, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=60), st.integers(2, 10), st.integers(0, 99))
def test_kfold_partitions_rows(labels, k, seed):
    y = np.array(labels)
    if k > y.size:
        k = y.size
    folds = kfold_indices(y, k, seed)
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(y.size))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1


# ------------------------------------------------------------ synth

def test_synth_shape_and_informative():
    d = synth_generate(200, 5, 15, 2, seed=0)
    assert d.n_features == 20 and d.meta["informative"] == [0, 1, 2, 3, 4]
    assert np.sum(d.y == 0) == 100 and np.sum(d.y == 1) == 100


def test_synth_informative_columns_are_learnable():
    d = normalize(synth_generate(400, 5, 15, 2, seed=2))
    tr, te = stratified_split(d, 0.25, 0)
    knn = KNeighborsClassifier(5).fit(tr.X[:, :5], tr.y)
    assert knn.score(te.X[:, :5], te.y) >= 0.95


def test_synth_rejects_bad_counts():
    with pytest.raises(DataError):
        synth_generate(0, 5, 15)
    with pytest.raises(DataError):
        synth_generate(100, 2, 3, n_classes=5)

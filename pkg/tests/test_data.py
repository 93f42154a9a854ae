import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfld.data import (
    ParseError,
    Schema,
    SchemaError,
    TabularDataset,
    ValidationError,
    kfold,
    load_csv,
    load_snapshot,
    save_snapshot,
    standardize,
    synthesize_biased,
    train_test_split,
)

SCHEMA = "x1 = feature\ncolor = feature\ny = label\ngroup = protected\nid = drop\n"


def write(tmp_path, csv_text, schema_text=SCHEMA):
    data = tmp_path / "data.csv"
    schema = tmp_path / "schema.txt"
    data.write_text(csv_text)
    schema.write_text(schema_text)
    return data, schema


def test_four_rows_two_groups(tmp_path):
    data, schema = write(tmp_path, "id,x1,color,y,group\n1,0.5,red,0,a\n2,1.5,blue,1,a\n3,2.0,red,1,b\n4,3.0,red,0,b\n")
    ds = load_csv(data, schema)
    assert ds.group_count == 2
    assert ds.group_sizes().tolist() == [2, 2]
    assert ds.group_names == ("a", "b")
    assert ds.feature_names == ("x1", "color=blue", "color=red")


def test_missing_protected_token(tmp_path):
    data, schema = write(tmp_path, "id,x1,color,y,group\n1,0.5,red,0,a\n2,1.5,blue,1,?\n3,2.0,red,1,b\n4,3.0,red,0,a\n")
    ds = load_csv(data, schema)
    assert ds.protected_known.tolist() == [True, False, True, True]
    assert ds.reported_fraction == 0.75


def test_custom_missing_token(tmp_path):
    data, schema = write(
        tmp_path,
        "id,x1,color,y,group\n1,0.5,red,0,a\n2,1.5,blue,1,NA\n3,2.0,red,1,b\n",
        SCHEMA + "@missing_token = NA\n",
    )
    assert load_csv(data, schema).protected_known.tolist() == [True, False, True]


def test_bucketed_age_shares(tmp_path):
    # Age buckets {<25 or >60} vs the rest, mapped through numeric bins.
    rng = np.random.default_rng(0)
    ages = np.concatenate([rng.integers(18, 25, 50), rng.integers(61, 90, 30), rng.integers(25, 61, 920)])
    rows = "\n".join(f"{i},{a},{i % 2}" for i, a in enumerate(ages))
    schema = "id = feature\nage = protected\ny = label\n@protected_bins = 25, 61\n@protected_bin_groups = 0, 1, 0\n"
    data, schema_path = write(tmp_path, "id,age,y\n" + rows + "\n", schema)
    ds = load_csv(data, schema_path)
    shares = ds.group_sizes() / ds.n
    assert shares == pytest.approx([0.08, 0.92])


def test_malformed_row_reports_row_number(tmp_path):
    data, schema = write(tmp_path, "id,x1,color,y,group\n1,0.5,red,0,a\n2,1.5,blue,1\n")
    with pytest.raises(ParseError, match="row 3"):
        load_csv(data, schema)


def test_non_binary_label(tmp_path):
    data, schema = write(tmp_path, "id,x1,color,y,group\n1,0.5,red,0,a\n2,1.5,blue,2,b\n3,1.5,blue,1,b\n")
    with pytest.raises(SchemaError):
        load_csv(data, schema)


def test_label_positive_option(tmp_path):
    data, schema = write(
        tmp_path,
        "id,x1,color,y,group\n1,0.5,red,no,a\n2,1.5,blue,yes,b\n",
        SCHEMA + "@label_positive = yes\n",
    )
    assert load_csv(data, schema).labels.tolist() == [0, 1]


def test_empty_group_after_binning(tmp_path):
    schema = "x = feature\ny = label\nage = protected\n@protected_bins = 50\n@protected_bin_groups = 0, 1\n"
    data, schema_path = write(tmp_path, "x,y,age\n1,0,20\n2,1,30\n", schema)
    with pytest.raises(ValidationError, match="group1"):
        load_csv(data, schema_path)


def test_schema_needs_one_label_and_protected():
    with pytest.raises(SchemaError):
        Schema.parse("a = feature\nb = protected\n")
    with pytest.raises(SchemaError):
        Schema.parse("a = label\nb = protected\nc = protected\n")
    with pytest.raises(SchemaError):
        Schema.parse("a = label\nb = protected\nc = weird\n")


def test_loaded_features_are_standardized(tmp_path):
    rows = "\n".join(f"{i},{i * 1.5},{'red' if i % 3 else 'blue'},{i % 2},{'ab'[i % 2]}" for i in range(30))
    data, schema = write(tmp_path, "id,x1,color,y,group\n" + rows + "\n")
    ds = load_csv(data, schema)
    assert np.abs(ds.features.mean(axis=0)).max() < 1e-9
    assert np.abs(ds.features.std(axis=0) - 1).max() < 1e-6


def test_constant_column_keeps_unit_scale():
    x = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
    z, means, stds = standardize(x)
    assert stds[1] == 1.0
    assert np.all(z[:, 1] == 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_standardize_idempotent(x):
    once, _, _ = standardize(x)
    twice, _, _ = standardize(once)
    assert np.allclose(once, twice, atol=1e-9)


def test_snapshot_round_trip(tmp_path):
    ds = synthesize_biased(50, 3, 2, 0.2, seed=1).hide_protected(0.6, seed=2)
    path = tmp_path / "snap.npz"
    save_snapshot(ds, path)
    back = load_snapshot(path)
    for name in ("features", "labels", "protected", "protected_known", "feature_means", "feature_stds"):
        assert np.array_equal(getattr(ds, name), getattr(back, name))
    assert back.group_count == ds.group_count
    assert back.group_names == ds.group_names


def test_dataset_validation():
    with pytest.raises(ValidationError):
        TabularDataset(np.zeros((2, 1)), np.array([0, 2]), np.array([0, 1]), np.ones(2, bool), 2)
    with pytest.raises(ValidationError):
        TabularDataset(np.zeros((2, 1)), np.array([0, 1]), np.array([0, 3]), np.ones(2, bool), 2)


# --------------------------------------------------------------------------
# synthetic generator


def label_gap(ds):
    rates = [ds.labels[ds.protected == g].mean() for g in range(ds.group_count)]
    return max(rates) - min(rates)


def test_unbiased_generator_gap():
    assert label_gap(synthesize_biased(10000, 4, 2, 0.0, seed=3)) <= 0.05


@pytest.mark.parametrize("minority_share", [None, 0.15])
def test_biased_generator_gap(minority_share):
    gap = label_gap(synthesize_biased(10000, 4, 2, 0.4, seed=3, minority_share=minority_share))
    assert 0.3 <= gap <= 0.5


def test_generator_deterministic():
    a = synthesize_biased(300, 4, 3, 0.4, seed=9)
    b = synthesize_biased(300, 4, 3, 0.4, seed=9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.protected, b.protected)


def test_generator_rejects_infeasible_sizes():
    with pytest.raises(ValidationError):
        synthesize_biased(7, 3, 2, 0.1, seed=0)
    with pytest.raises(ValidationError):
        synthesize_biased(100, 1, 2, 0.1, seed=0)
    with pytest.raises(ValidationError):
        synthesize_biased(100, 3, 2, 0.1, seed=0, minority_share=0.01)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5).flatmap(lambda m: st.tuples(st.just(m), st.integers(4 * m, 60))), st.integers(0, 10**6))
def test_generator_min_group_size(mn, seed):
    m, n = mn
    ds = synthesize_biased(n, 2, m, 0.5, seed)
    assert ds.group_sizes().min() >= 2


def test_hide_protected_fraction():
    ds = synthesize_biased(1000, 3, 2, 0.4, seed=0).hide_protected(0.5, seed=1)
    assert ds.reported_fraction == pytest.approx(0.5, abs=0.01)
    assert np.all(ds.protected[~ds.protected_known] == -1)
    assert ds.group_sizes().min() >= 2


# --------------------------------------------------------------------------
# folds


def test_ten_rows_five_folds():
    ds = synthesize_biased(10, 2, 2, 0.0, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = kfold(ds, 5, seed=0)
    assert np.bincount(plan.assignments).tolist() == [2] * 5


@pytest.mark.parametrize("n,k,seed", list(itertools.product([12, 17, 40], [2, 3, 5], [0, 1])))
def test_kfold_partition_and_stratification(n, k, seed):
    ds = synthesize_biased(n, 2, 2, 0.4, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = kfold(ds, k, seed)
    tests = [plan.split(f)[1] for f in range(k)]
    joined = np.concatenate(tests)
    assert sorted(joined.tolist()) == list(range(n))
    sizes = [len(t) for t in tests]
    assert max(sizes) - min(sizes) <= 1
    global_rate = ds.labels.mean()
    for t in tests:
        assert abs(ds.labels[t].mean() - global_rate) <= 1 / len(t) + 1e-12
    for f in range(k):
        train, test = plan.split(f)
        assert not set(train) & set(test)


def test_kfold_deterministic():
    ds = synthesize_biased(200, 2, 2, 0.4, seed=5)
    assert np.array_equal(kfold(ds, 5, 3).assignments, kfold(ds, 5, 3).assignments)


def test_kfold_falls_back_with_warning():
    ds = synthesize_biased(200, 2, 2, 0.4, seed=5, minority_share=0.02)
    with pytest.warns(UserWarning, match="label only"):
        plan = kfold(ds, 5, 0)
    assert not plan.stratified_by_group


def test_kfold_group_stratified_when_possible():
    ds = synthesize_biased(500, 2, 2, 0.4, seed=5)
    plan = kfold(ds, 5, 0)
    assert plan.stratified_by_group
    for f in range(5):
        test = plan.split(f)[1]
        share = (ds.protected[test] == 0).mean()
        assert abs(share - (ds.protected == 0).mean()) < 0.03


def test_kfold_bounds():
    ds = synthesize_biased(10, 2, 2, 0.0, seed=0)
    with pytest.raises(ValidationError):
        kfold(ds, 1, 0)
    with pytest.raises(ValidationError):
        kfold(ds, 11, 0)


def test_train_test_split():
    train, test = train_test_split(100, 0.2, seed=0)
    assert len(test) == 20 and len(train) == 80
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(100))

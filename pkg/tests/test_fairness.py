import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfld.data import TabularDataset, synthesize_biased
from pfld.fairness import (
    ConstraintError,
    FairnessNotion,
    build_constraints,
    fairness_violation_metric,
    max_pairwise_gap,
    mu,
    violation_vector,
)
from pfld.model import LOSS, PROBABILITY, init_params, predict, predict_proba, stat_values, zero_params


def toy(labels, protected, known=None, d=2, seed=0):
    labels = np.asarray(labels)
    protected = np.asarray(protected)
    known = np.ones(len(labels), bool) if known is None else np.asarray(known)
    x = np.random.default_rng(seed).normal(size=(len(labels), d))
    return TabularDataset(x, labels, np.where(known, protected, -1), known, int(protected.max()) + 1)


def test_dp_constraints():
    ds = toy([0, 1, 0, 1, 0, 1], [0, 0, 0, 1, 1, 1])
    cs = build_constraints(ds, "dp")
    assert len(cs) == 2
    assert cs.group_sizes().tolist() == [3, 3]
    assert [len(c.population) for c in cs] == [6, 6]


def test_eo_constraints():
    ds = toy([0, 0, 1, 1], [0, 1, 0, 1])
    cs = build_constraints(ds, FairnessNotion.EQUALIZED_ODDS)
    assert len(cs) == 4
    assert [len(c.population) for c in cs] == [2, 2, 2, 2]
    assert [c.descriptor for c in cs] == ["y=0,a=0", "y=0,a=1", "y=1,a=0", "y=1,a=1"]


def test_unknown_row_only_in_populations():
    ds = toy([0, 1, 0, 1, 1], [0, 0, 1, 1, 0], known=[1, 1, 1, 1, 0])
    for notion in FairnessNotion:
        cs = build_constraints(ds, notion)
        assert any(4 in c.population for c in cs)
        assert all(4 not in c.group for c in cs)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(list(FairnessNotion)))
def test_groups_inside_populations(seed, notion):
    ds = synthesize_biased(40, 2, 3, 0.3, seed).hide_protected(0.7, seed)
    cs = build_constraints(ds, notion, strict=False)
    assert len(cs) == (6 if notion is FairnessNotion.EQUALIZED_ODDS else 3)
    for c in cs:
        assert set(c.group) <= set(c.population)
        assert np.all(ds.protected_known[c.group])


def test_empty_group_error_carries_id():
    ds = toy([0, 1, 0, 1], [0, 0, 0, 1])
    with pytest.raises(ConstraintError) as err:
        build_constraints(ds, "eo")
    assert err.value.group == 1 and err.value.label == 0


def test_batch_indices_refer_to_dataset_rows():
    ds = toy([0, 1, 0, 1, 0, 1], [0, 0, 0, 1, 1, 1])
    cs = build_constraints(ds, "dp", indices=np.array([1, 4, 5]))
    assert cs.constraints[0].group.tolist() == [1]
    assert cs.constraints[1].group.tolist() == [4, 5]


def test_mu_constant_model():
    ds = toy([0, 1, 0, 1], [0, 0, 1, 1])
    assert mu(zero_params(2), ds, np.array([0, 3]), PROBABILITY) == 0.5


def test_mu_brute_force():
    ds = synthesize_biased(20, 3, 2, 0.2, 1)
    params = init_params(3, (5, 5), 2)
    rows = np.array([1, 4, 7, 11, 19])
    prob = predict_proba(params, ds.features)
    assert mu(params, ds, rows, PROBABILITY) == pytest.approx(sum(prob[r] for r in rows) / 5, rel=1e-14)


def test_mu_accuracy_parity_is_mean_cross_entropy():
    ds = synthesize_biased(20, 3, 2, 0.2, 1)
    params = init_params(3, (5, 5), 2)
    rows = np.arange(8)
    p = predict_proba(params, ds.features[rows])
    y = ds.labels[rows]
    ce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert mu(params, ds, rows, LOSS) == pytest.approx(ce.mean(), rel=1e-12)


def test_mu_empty_set():
    ds = toy([0, 1], [0, 1])
    with pytest.raises(ValueError):
        mu(zero_params(2), ds, np.array([], dtype=int), PROBABILITY)


def test_constant_model_has_no_violation():
    ds = synthesize_biased(30, 2, 3, 0.4, 0)
    for notion in FairnessNotion:
        assert np.allclose(violation_vector(zero_params(2), ds, build_constraints(ds, notion)), 0.0, atol=1e-14)


def test_two_group_toy_violations():
    # A model that outputs 0.8 for group-0 rows and 0.2 for group-1 rows.
    x = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    ds = TabularDataset(x, np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]), np.ones(4, bool), 2)
    logit = np.log(0.8 / 0.2)
    params = zero_params(1, (1, 1))
    params.w1[:] = 1.0
    params.b1[:] = 1.0
    params.w2[:] = 1.0
    params.w3[:] = logit
    params.b3[:] = -logit  # relu(x+1) is 2 or 0 -> logits +logit / -logit
    cs = build_constraints(ds, "dp")
    assert violation_vector(params, ds, cs) == pytest.approx([0.3, 0.3], abs=1e-12)


@pytest.mark.parametrize("notion", list(FairnessNotion))
def test_violations_brute_force(notion):
    ds = next(
        d for d in (synthesize_biased(8, 2, 2, 0.5, s) for s in range(100))
        if all(((d.labels == y) & (d.protected == g)).any() for y in (0, 1) for g in (0, 1))
    )
    params = init_params(2, (3, 3), 5)
    cs = build_constraints(ds, notion)
    h = stat_values(params, ds.features, ds.labels, notion.stat_kind)
    expected = []
    ys = (0, 1) if notion is FairnessNotion.EQUALIZED_ODDS else (None,)
    for y in ys:
        for g in range(2):
            pop = [i for i in range(8) if y is None or ds.labels[i] == y]
            grp = [i for i in pop if ds.protected[i] == g]
            expected.append(abs(sum(h[i] for i in pop) / len(pop) - sum(h[i] for i in grp) / len(grp)))
    assert violation_vector(params, ds, cs) == pytest.approx(expected, abs=1e-14)


def test_violations_permutation_invariant():
    ds = synthesize_biased(50, 3, 3, 0.4, 2)
    params = init_params(3, (4, 4), 1)
    perm = np.random.default_rng(0).permutation(50)
    shuffled = ds.subset(perm)
    a = violation_vector(params, ds, build_constraints(ds, "dp"))
    b = violation_vector(params, shuffled, build_constraints(shuffled, "dp"))
    assert np.allclose(a, b, atol=1e-14)


def test_max_pairwise_gap():
    assert max_pairwise_gap({None: {0: 0.9, 1: 0.6, 2: 0.7}}) == pytest.approx(0.3)
    assert max_pairwise_gap({None: {0: 0.4}}) == 0.0


def test_metric_identical_groups():
    assert fairness_violation_metric(zero_params(2), synthesize_biased(40, 2, 2, 0.4, 0), "dp") == 0.0


@pytest.mark.parametrize("notion", list(FairnessNotion))
def test_metric_two_groups_direct(notion):
    ds = synthesize_biased(400, 3, 2, 0.4, 7)
    params = init_params(3, (6, 6), 3)
    pred = predict(params, ds.features)
    g0, g1 = ds.protected == 0, ds.protected == 1
    if notion is FairnessNotion.DEMOGRAPHIC_PARITY:
        expected = abs(pred[g0].mean() - pred[g1].mean())
    elif notion is FairnessNotion.ACCURACY_PARITY:
        err = pred != ds.labels
        expected = abs(err[g0].mean() - err[g1].mean())
    else:
        expected = max(
            abs(pred[g0 & (ds.labels == y)].mean() - pred[g1 & (ds.labels == y)].mean()) for y in (0, 1)
        )
    value = fairness_violation_metric(params, ds, notion)
    assert value == pytest.approx(expected, abs=1e-12)
    assert 0.0 <= value <= 1.0


def test_metric_single_group_is_zero():
    ds = synthesize_biased(20, 2, 1, 0.0, 0)
    assert fairness_violation_metric(init_params(2, (3, 3), 0), ds, "dp") == 0.0


def test_soft_metric_available():
    ds = synthesize_biased(200, 3, 2, 0.4, 7)
    params = init_params(3, (6, 6), 3)
    p = predict_proba(params, ds.features)
    expected = abs(p[ds.protected == 0].mean() - p[ds.protected == 1].mean())
    assert fairness_violation_metric(params, ds, "dp", hard=False) == pytest.approx(expected, abs=1e-12)

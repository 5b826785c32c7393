import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcorb.evaluation import (N_BOOT, N_PERM, EvaluationError, auc_fast, balanced_accuracy,
                              bootstrap_auc_ci, evaluate, permutation_test, roc_auc, roc_curve)
from tcorb.lasso import choose_cutoff


def pair_count(p, y):
    pos, neg = p[y == 1], p[y == 0]
    wins = sum((a > b) + 0.5 * (a == b) for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def labelled(draw_y, draw_p):
    y = np.asarray(draw_y)
    if y.min() == y.max():
        y = np.r_[y, 1 - y[0]]
        draw_p = list(draw_p) + [0.5]
    return np.asarray(draw_p[: y.size], float), y


scores = st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.5, 0.7, 0.9, 1.0]), min_size=30, max_size=30)


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    p, y = np.array([0.2, 0.8, 0.6, 0.4]), np.array([0, 1, 1, 0])
    assert roc_auc(p, y) == 1.0 == pair_count(p, y)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=30), scores)
def test_auc_equals_pair_count(ys, ps):
    p, y = labelled(ys, ps)
    assert roc_auc(p, y) == pytest.approx(pair_count(p, y), abs=1e-12)
    assert auc_fast(p, y)[0] == pytest.approx(pair_count(p, y), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=30), scores)
def test_auc_antisymmetry_and_monotone_invariance(ys, ps):
    p, y = labelled(ys, ps)
    assert roc_auc(p, y) + roc_auc(-p, y) == pytest.approx(1.0, abs=1e-12)
    assert roc_auc(np.exp(3 * p) - 2, y) == pytest.approx(roc_auc(p, y), abs=1e-12)


def test_roc_curve_shape():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 50)
    c = roc_curve(rng.random(50), y)
    assert (c.fpr[0], c.tpr[0], c.fpr[-1], c.tpr[-1]) == (0, 0, 1, 1)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert 0 <= c.auc <= 1


def test_single_class_and_length_errors():
    with pytest.raises(EvaluationError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(EvaluationError):
        roc_auc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(EvaluationError):
        permutation_test([0.1, 0.2], [0.1], [0, 1])


def test_balanced_accuracy():
    assert balanced_accuracy([1, 0, 0, 0], [1, 1, 0, 0]) == 0.75


def test_balanced_accuracy_at_cutoff_beats_chance_when_auc_does():
    rng = np.random.default_rng(2)
    for _ in range(20):
        y = rng.integers(0, 2, 80)
        p = 1 / (1 + np.exp(-(y * 0.8 + rng.normal(size=80))))
        if roc_auc(p, y) > 0.5:
            assert balanced_accuracy((p > choose_cutoff(p, y)).astype(int), y) >= 0.5


# -- bootstrap -----------------------------------------------------------------

def test_bootstrap_defaults_and_reproducibility():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 100)
    p = y + rng.normal(size=100)
    a = bootstrap_auc_ci(p, y, seed=11)
    b = bootstrap_auc_ci(p, y, seed=11)
    assert N_BOOT == 250 and a.replicates.size == 250
    assert np.array_equal(a.replicates, b.replicates)
    assert a.lower <= a.estimate <= a.upper


def test_perfect_classifier_interval_collapses():
    y = np.r_[np.zeros(250, int), np.ones(250, int)]
    ci = bootstrap_auc_ci(np.arange(500.0), y)
    assert ci.upper - ci.lower < 0.02


def test_rare_class_resamples_are_redrawn():
    y = np.zeros(400, int)
    y[0] = 1
    ci = bootstrap_auc_ci(np.linspace(0, 1, 400), y, n_boot=100)
    assert np.isfinite(ci.replicates).all()


def test_bootstrap_coverage_small_study():
    mu = np.sqrt(2) * 0.6744897501960817        # true AUC 0.75
    hits = 0
    for r in range(40):
        rng = np.random.default_rng(r)
        y = (rng.random(200) < 0.3).astype(int)
        ci = bootstrap_auc_ci(rng.normal(size=200) + mu * y, y, seed=r)
        hits += ci.lower <= 0.75 <= ci.upper
    assert hits >= 33


# -- permutation tests ------------------------------------------------------------

def noisy(y, rng, shift=1.0):
    return shift * y + rng.normal(size=y.size)


def test_identical_predictions_give_half():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    p = noisy(y, rng)
    r = permutation_test(p, p, y, "greater", seed=1)
    assert r.statistic == 0 and r.B == N_PERM == 1000
    assert r.p_value == pytest.approx(0.5, abs=0.05)


def test_p_values_on_grid_and_directions():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 2, 150)
    strong, weak = noisy(y, rng, 2.0), noisy(y, rng, 0.3)
    g = permutation_test(strong, weak, y, "greater", n_perm=200, seed=0)
    l = permutation_test(strong, weak, y, "less", n_perm=200, seed=0)
    assert g.statistic > 0 and g.p_value < 0.05 and l.p_value > 0.95
    for r in (g, l):
        assert r.p_value * 200 == pytest.approx(round(r.p_value * 200))
    a1 = permutation_test(strong, weak, y, "greater", n_perm=200, seed=0, add_one=True)
    assert a1.p_value == pytest.approx((g.p_value * 200 + 1) / 201)
    with pytest.raises(EvaluationError):
        permutation_test(strong, weak, y, "two-sided")


def test_paired_mode():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, 150)
    strong, weak = noisy(y, rng, 2.0), noisy(y, rng, 0.3)
    r = permutation_test(strong, weak, y, "greater", n_perm=300, seed=0, paired=True)
    assert r.paired and r.p_value < 0.05
    assert abs(r.null.mean()) < 0.02


@pytest.mark.parametrize("paired", [False, True])
def test_null_p_values_look_uniform(paired):
    from scipy.stats import kstest
    ps = []
    for r in range(60):
        rng = np.random.default_rng(100 + r)
        y = (rng.random(80) < 0.4).astype(int)
        y[:2] = [0, 1]
        ps.append(permutation_test(noisy(y, rng), noisy(y, rng), y, "greater", 300,
                                   seed=r, paired=paired).p_value)
    assert kstest(ps, "uniform").statistic < 0.2


def test_results_independent_of_round_order():
    rng = np.random.default_rng(6)
    y = rng.integers(0, 2, 60)
    a, b = noisy(y, rng), noisy(y, rng)
    short = permutation_test(a, b, y, "greater", n_perm=50, seed=9)
    long = permutation_test(a, b, y, "greater", n_perm=100, seed=9)
    assert np.array_equal(short.null, long.null[:50])


def test_evaluate_bundle():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 2, 120)
    p = 1 / (1 + np.exp(-noisy(y, rng)))
    ev = evaluate(p, y, 0.5, n_boot=50)
    assert ev.auc == roc_auc(p, y) and ev.n == 120 and ev.n_positive == y.sum()
    assert ev.ci.replicates.size == 50

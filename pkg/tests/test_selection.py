import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cme.selection import (
    IntervalSet,
    coverage_and_width,
    credible_intervals,
    default_tol,
    mspe,
    mspe_grouped,
    prediction_risk,
    relative_metrics,
    s2m_counts,
    s2m_select,
    tpr_fpr,
)


def brute_two_means(v):
    # all contiguous splits of sorted values, minimising within-cluster SS
    v = np.sort(v)
    best = None
    for s in range(1, len(v)):
        a, b = v[:s], v[s:]
        ss = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
        if best is None or ss < best[0] - 1e-15:
            best = (ss, s, a.mean(), b.mean())
    return best[1:]


def brute_s2m(v, tol):
    v = np.sort(v)
    n = len(v)
    while n >= 2:
        s, lo, hi = brute_two_means(v[:n])
        if hi - lo < tol:
            break
        n = s
    return len(v) - n


def test_separation_oracle():
    rng = np.random.default_rng(0)
    T, p = 200, 300
    B = 1e-6 + 1e-8 * rng.standard_normal((T, p))
    B[:, [3, 50, 77, 120, 299]] = 1.0 + 0.01 * rng.standard_normal((T, 5))
    res = s2m_select(B, tol_b=0.1)
    assert list(res.indices) == [3, 50, 77, 120, 299]
    assert all(brute_s2m(np.abs(B[t]), 0.1) == 5 for t in range(5))


def test_all_zero_selects_nothing():
    res = s2m_select(np.zeros((10, 6)))
    assert res.chosen_count == 0 and not res.selected.any()


def test_single_coordinate():
    assert s2m_select(np.full((10, 1), 2.0), tol_b=1.0).chosen_count == 1
    assert s2m_select(np.full((10, 1), 0.5), tol_b=1.0).chosen_count == 0


@settings(max_examples=100)
@given(st.integers(0, 10**6))
def test_counts_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    B = np.abs(rng.standard_normal((5, int(rng.integers(2, 15))))) ** 2
    tol = float(rng.uniform(0.05, 1.5))
    got = s2m_counts(B, tol)
    assert list(got) == [brute_s2m(B[t], tol) for t in range(5)]


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_permutation_and_sign_invariance(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((30, 12)) * rng.uniform(0, 3, 12)
    perm = rng.permutation(12)
    signs = rng.choice([-1.0, 1.0], size=B.shape)
    a = s2m_select(B, tol_b=0.3)
    b = s2m_select(B[:, perm], tol_b=0.3)
    c = s2m_select(B * signs, tol_b=0.3)
    assert a.chosen_count == b.chosen_count == c.chosen_count
    assert np.array_equal(a.selected, c.selected)
    med = np.median(np.abs(B), axis=0)
    if len(np.unique(med)) == len(med):
        assert np.array_equal(a.selected[perm], b.selected)


def test_default_tol():
    B = np.tile([1.0, -4.0, 0.0], (16, 1))
    assert default_tol(B) == 1.0
    assert default_tol(np.zeros((4, 2))) > 0


def test_bad_inputs():
    with pytest.raises(ValueError):
        s2m_counts(np.ones((3, 2)), 0.0)
    with pytest.raises(ValueError):
        s2m_select(np.ones((1, 3)))


def test_credible_interval_examples():
    iv = credible_intervals(np.full((50, 2), 3.0))
    assert np.array_equal(iv.lower, [3.0, 3.0]) and np.array_equal(iv.upper, [3.0, 3.0])
    iv = credible_intervals(np.arange(1.0, 101.0)[:, None])
    np.testing.assert_allclose([iv.lower[0], iv.upper[0]], [3.475, 97.525], atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.floats(0.05, 0.99))
def test_interval_order(seed, level):
    A = np.random.default_rng(seed).standard_normal((20, 4))
    iv = credible_intervals(A, level)
    assert np.all(iv.lower <= iv.upper)


def test_coverage_examples():
    iv = IntervalSet(np.full(3, -10.0), np.full(3, 10.0), 0.95)
    assert coverage_and_width(iv, np.zeros(3)).coverage == 1.0
    iv = IntervalSet(np.full(3, -10.0), np.full(3, -5.0), 0.95)
    assert coverage_and_width(iv, np.zeros(3)).coverage == 0.0
    iv = IntervalSet(np.array([0.0, 0.0, 0.0, 0.0]), np.array([1.0, 2.0, 3.0, 4.0]), 0.95)
    rep = coverage_and_width(iv, np.array([0.5, 5.0, 2.0, -1.0]), signal=[True, True, False, False])
    assert rep.coverage == 0.5 and rep.width == 2.5
    assert rep.coverage_signal == 0.5 and rep.width_signal == 1.5
    assert rep.coverage_noise == 0.5 and rep.width_noise == 3.5


def test_tpr_fpr_examples():
    beta0 = np.zeros(300)
    beta0[:5] = 1.0
    assert tpr_fpr(beta0 != 0, beta0) == (1.0, 0.0)
    assert tpr_fpr(np.ones(300, bool), beta0) == (1.0, 1.0)
    sel = np.zeros(300, bool)
    sel[:4] = True
    sel[10:20] = True
    tpr, fpr = tpr_fpr(sel, beta0)
    assert tpr == 0.8 and fpr == 10 / 295
    assert np.isnan(tpr_fpr(np.zeros(3, bool), np.zeros(3))[0])


def test_mspe_examples():
    y = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
    assert mspe(y, y) == 0.0
    pred = [y[0] - 1.0, y[1] - 2.0]
    assert mspe(y, pred) == 2.5
    scaled = [y[0] - 3.0, y[1] - 6.0]
    assert mspe(y, scaled) == pytest.approx(9 * 2.5)
    assert mspe_grouped(np.array([1.0, 2, 3, 4]), np.array([0.0, 1, 1, 2]), [2, 2]) == 2.5
    with pytest.raises(ValueError):
        mspe(y, y[:1])


def test_relative_metrics():
    assert relative_metrics(2.0, 2.0) == 1.0
    assert relative_metrics(1.07, 1.0) == pytest.approx(1.07)
    with pytest.raises(ValueError):
        relative_metrics(1.0, 0.0)


def test_prediction_risk():
    X = np.eye(4)
    assert prediction_risk(X, np.ones(4), np.ones(4)) == 0.0
    assert prediction_risk(X, np.ones(4), np.zeros(4)) == 1.0

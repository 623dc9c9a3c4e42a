import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipslae.errors import ConfigError
from ipslae.evaluation import top_n
from ipslae.propensity import (PropensityVector, clip_propensity, item_counts, make_propensity,
                               marginal_utility_log, marginal_utility_powerlaw,
                               propensity_logsigmoid, propensity_powerlaw, weight_curve,
                               write_weight_curve)
from ipslae.solver import gram

counts_st = st.lists(st.integers(0, 10**6), min_size=1, max_size=40).map(np.array)


# --- power law -------------------------------------------------------------

def test_powerlaw_example():
    pv = propensity_powerlaw(np.array([0, 3, 8]), 0.5)
    np.testing.assert_allclose(pv.p, [1 / 3, 2 / 3, 1], rtol=1e-15)
    np.testing.assert_allclose(pv.w, [3, 1.5, 1], rtol=1e-15)
    assert pv.family == "power-law" and pv.params == {"gamma": 0.5}


def test_powerlaw_uniform_and_anchor():
    pv = propensity_powerlaw(np.full(4, 7), 0.8)
    np.testing.assert_array_equal(pv.p, 1.0)
    np.testing.assert_array_equal(pv.w, 1.0)
    assert propensity_powerlaw(np.array([0, 50]), 1.0).w[1] == 1.0
    np.testing.assert_array_equal(propensity_powerlaw(np.zeros(3), 0.5).p, 1.0)


def test_powerlaw_validation():
    with pytest.raises(ConfigError):
        propensity_powerlaw(np.array([1, 2]), 0.0)
    with pytest.raises(ValueError):
        propensity_powerlaw(np.array([]), 0.5)
    with pytest.raises(ValueError):
        propensity_powerlaw(np.array([1, -2]), 0.5)


# --- clipping --------------------------------------------------------------

def fixed(p):
    return PropensityVector.from_scores(np.array(p), "power-law", {"gamma": 1.0})


def test_clip_example():
    pv = clip_propensity(fixed([0.02, 0.5]), 0.05)
    np.testing.assert_allclose(pv.p, [0.05, 0.5])
    np.testing.assert_allclose(pv.w, [20, 2])
    assert pv.family == "power-law-clipped" and pv.params == {"gamma": 1.0, "C": 0.05}


def test_clip_inactive_below_min():
    base = fixed([0.2, 0.5, 1.0])
    np.testing.assert_array_equal(clip_propensity(base, 0.1).p, base.p)


def test_clip_table_arm_configuration():
    counts = np.array([0, 10, 1000, 99999])
    pv = make_propensity(counts, "power-law-clipped", gamma=0.5, C=0.1)
    assert pv.params == {"gamma": 0.5, "C": 0.1}
    assert pv.w.max() == pytest.approx(10.0)
    raw = propensity_powerlaw(counts, 0.5)
    np.testing.assert_allclose(pv.p, np.maximum(raw.p, 0.1))


@pytest.mark.parametrize("c", [0.0, 1.0, -0.1, 1.5])
def test_clip_range(c):
    with pytest.raises(ConfigError):
        clip_propensity(fixed([0.5]), c)


# --- log-sigmoid -----------------------------------------------------------

def test_logsigmoid_unit_values():
    pv = propensity_logsigmoid(np.array([1, 3, 7]), 1.0)
    np.testing.assert_allclose(pv.p, [1 / 3, 1 / 2, 2 / 3], rtol=1e-15)
    np.testing.assert_allclose(pv.w, [3, 2, 1.5], rtol=1e-15)
    assert pv.params["alpha"] == pytest.approx(-math.log(4))
    assert pv.params["log_base"] == "e" and pv.params["alpha_rule"] == "midpoint"


def test_logsigmoid_flat_limit():
    pv = propensity_logsigmoid(np.array([0, 5, 500, 10**6]), 1e-9)
    np.testing.assert_allclose(pv.p, 0.5, atol=1e-7)
    np.testing.assert_allclose(pv.w, 2.0, atol=1e-6)


def test_logsigmoid_alpha_override():
    pv = propensity_logsigmoid(np.array([0, 9]), 2.0, alpha_override=0.0)
    np.testing.assert_allclose(pv.p, [0.5, 1 / (1 + 10.0 ** -2)])
    assert pv.params["alpha_rule"] == "override"


def test_logsigmoid_validation():
    with pytest.raises(ConfigError):
        propensity_logsigmoid(np.array([1, 2]), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**5), st.integers(1, 10**5), st.floats(0.01, 5.0))
def test_midpoint_law(lo, span, beta):
    hi = lo + span
    # log(mid + 1) is the midpoint of log(lo + 1) and log(hi + 1)
    mid = math.sqrt((lo + 1) * (hi + 1)) - 1
    counts = np.array([lo, hi, mid])
    pv = propensity_logsigmoid(counts, beta)
    assert pv.p[2] == pytest.approx(0.5, abs=1e-12)
    assert pv.w[2] == pytest.approx(2.0, abs=1e-11)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 300), st.integers(1, 300), st.floats(0.01, 5.0))
def test_midpoint_law_integer_counts(root, k, beta):
    # with lo + 1 = r and hi + 1 = r k^2 the geometric mean r k is an integer
    r = root + 1
    counts = np.array([r - 1, r * k * k - 1, r * k - 1])
    pv = propensity_logsigmoid(counts, beta)
    assert pv.p[2] == pytest.approx(0.5, abs=1e-12)


# --- family-wide properties ------------------------------------------------

family_st = st.sampled_from([
    ("power-law", {"gamma": 0.5}), ("power-law", {"gamma": 1.7}),
    ("power-law-clipped", {"gamma": 0.5, "C": 0.05}),
    ("log-sigmoid", {"beta": 0.3}), ("log-sigmoid", {"beta": 2.0}),
])


@settings(max_examples=200, deadline=None)
@given(counts_st, family_st)
def test_scores_weights_and_monotonicity(counts, fam):
    family, params = fam
    pv = make_propensity(counts, family, **params)
    assert np.all((pv.p > 0) & (pv.p <= 1))
    assert np.all(np.isfinite(pv.w)) and np.all(pv.w >= 1)
    np.testing.assert_array_equal(pv.w, 1.0 / pv.p)
    order = np.argsort(counts, kind="stable")
    assert np.all(np.diff(pv.p[order]) >= 0)
    assert np.all(np.diff(pv.w[order]) <= 0)


@settings(max_examples=100, deadline=None)
@given(counts_st, st.floats(0.1, 2.0), st.floats(0.001, 0.999))
def test_clipping_dominance(counts, gamma, c):
    raw = propensity_powerlaw(counts, gamma)
    clipped = clip_propensity(raw, c)
    assert np.all(clipped.p >= raw.p)
    assert np.all(clipped.w <= raw.w)
    assert np.all(clipped.w <= 1 / c + 1e-12)


@settings(max_examples=100, deadline=None)
@given(counts_st, st.floats(0.05, 3.0))
def test_logsigmoid_bounded_by_least_popular(counts, beta):
    pv = propensity_logsigmoid(counts, beta)
    w_min_count = 1.0 / pv.p[np.argmin(counts)]
    assert np.all(pv.w <= w_min_count)


def test_logsigmoid_asymptote():
    counts = np.array([0, 10, 10**4, 10**8, 10**12])
    pv = propensity_logsigmoid(counts, 1.0, alpha_override=-3.0)
    assert np.all(np.diff(pv.w) < 0)
    assert pv.w[-1] == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 1000.0))
def test_scale_free_rankings(seed, scale):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((12, 12))
    x = (rng.random((5, 12)) < 0.3).astype(float)
    w = propensity_logsigmoid(rng.integers(0, 500, 12), 0.5).w
    ref = top_n(x @ (b * w), 12)
    scaled = top_n(x @ (b * (scale * w)), 12)
    for a, c in zip(ref.items, scaled.items):
        np.testing.assert_array_equal(a, c)


# --- marginal utilities ----------------------------------------------------

def test_marginal_utility_powerlaw():
    assert all(marginal_utility_powerlaw(n, 1.0) == 1.0 for n in (1, 7, 1000))
    assert marginal_utility_powerlaw(4, 0.5) == pytest.approx(0.25)
    assert marginal_utility_powerlaw(100, 0.5) == pytest.approx(0.05)
    vals = [marginal_utility_powerlaw(n, 2.0) for n in range(1, 20)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        marginal_utility_powerlaw(0, 0.5)


def test_marginal_utility_log():
    assert marginal_utility_log(0) == 1.0
    assert marginal_utility_log(99) == pytest.approx(0.01)
    vals = [marginal_utility_log(n) for n in range(1, 11)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


# --- weight curves ---------------------------------------------------------

def test_weight_curve_logsigmoid_example():
    curve = weight_curve(np.array([7, 1, 3, 3]), "log-sigmoid", beta=1.0)
    assert [c for c, _ in curve] == [1, 3, 7]
    np.testing.assert_allclose([w for _, w in curve], [3, 2, 1.5], rtol=1e-15)


def test_weight_curve_uniform_counts():
    curve = weight_curve(np.full(5, 4), "power-law", gamma=0.5)
    assert curve == [(4, 1.0)]


def test_log_sigmoid_flatter_than_power_law():
    counts = np.unique(np.floor(10000 / np.arange(1, 2001) ** 1.1).astype(int))
    ls = [w for _, w in weight_curve(counts, "log-sigmoid", beta=0.5)]
    pl = [w for _, w in weight_curve(counts, "power-law", gamma=0.5)]
    assert max(ls) / min(ls) < max(pl) / min(pl)


def test_weight_tables(tmp_path):
    pv = propensity_powerlaw(np.array([0, 3, 8]), 0.5)
    text = pv.to_tsv(tmp_path / "w.tsv", ["a", "b", "c"]).read_text()
    assert text.splitlines() == ["item_id\tweight", "a\t3.0", "b\t1.5", "c\t1.0"]
    curve = write_weight_curve(tmp_path / "c.tsv", [(1, 3.0), (3, 2.0)]).read_text()
    assert curve.splitlines() == ["count\tweight", "1\t3.0", "3\t2.0"]


def test_counts_from_gram_and_matrix():
    from ipslae.dataset import InteractionMatrix
    X = np.array([[1, 0, 1], [1, 1, 0]])
    np.testing.assert_array_equal(item_counts(gram(X.astype(float))), [2, 1, 1])
    np.testing.assert_array_equal(item_counts(InteractionMatrix.from_dense(X > 0)), [2, 1, 1])


def test_unknown_family_and_missing_params():
    with pytest.raises(ConfigError):
        make_propensity(np.array([1]), "inverse")
    with pytest.raises(ConfigError, match="gamma"):
        make_propensity(np.array([1]), "power-law")

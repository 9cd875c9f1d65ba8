import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critspine.prm import (FiniteMeasure, brute_force_expectation, laplace_exact, sample_prm,
                           sample_prm_counts, sample_size_biased, sample_size_biased_counts,
                           size_biased_law, tv_distance)

N_AB = FiniteMeasure.from_dict({"a": 2.0, "b": 3.0})
CAMPBELL_AB = math.exp(-(2 * -math.expm1(-1.0) + 3 * -math.expm1(-0.5)))


def test_validation():
    with pytest.raises(ValueError):
        FiniteMeasure.from_dict({"a": -1.0})
    with pytest.raises(ValueError):
        N_AB.transform([0.0, 0.0])
    with pytest.raises(ValueError):
        laplace_exact(N_AB, [-1.0, 0.0])


def test_empty_measure_gives_empty_samples(rng):
    N = FiniteMeasure.from_dict({"a": 0.0, "b": 0.0})
    assert sample_prm(N, rng).counts == {}
    assert not sample_prm_counts(N, 1000, rng).any()


def test_laplace_values():
    assert laplace_exact(N_AB, [0.0, 0.0]) == 1.0
    assert laplace_exact(N_AB, [1.0, 0.5]) == pytest.approx(CAMPBELL_AB, rel=1e-14)
    assert laplace_exact(N_AB, [1.0, 0.5]) == pytest.approx(0.08675657, rel=1e-7)
    assert laplace_exact(FiniteMeasure.from_dict({"a": 1.0}), [math.inf]) == pytest.approx(math.exp(-1))


def test_sampled_moments(rng):
    c = sample_prm_counts(N_AB, 100_000, rng)
    se = np.sqrt(N_AB.weights / c.shape[0])
    assert np.all(np.abs(c.mean(axis=0) - N_AB.weights) <= 3 * se)
    vals = np.exp(-(c @ np.array([1.0, 0.5])))
    assert abs(vals.mean() - CAMPBELL_AB) <= 3 * vals.std() / math.sqrt(vals.size)


def test_size_biased_marks(rng):
    counts, theta = sample_size_biased_counts(N_AB, [1.0, 2.0], 100_000, rng)
    p = np.mean(theta == 0)
    assert abs(p - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / theta.size)
    f = np.array([1.0, 0.5])
    target = CAMPBELL_AB * (2 * math.exp(-1) + 6 * math.exp(-0.5)) / 8
    assert target == pytest.approx(0.04744438, rel=1e-7)
    vals = np.exp(-(counts @ f))
    assert abs(vals.mean() - target) <= 3 * vals.std() / math.sqrt(vals.size)


def test_constant_transform_is_normalised_measure():
    np.testing.assert_allclose(N_AB.transform([3.0, 3.0]).weights, N_AB.weights / N_AB.total)


def test_single_sample_api(rng):
    s = sample_size_biased(N_AB, {"a": 1.0, "b": 2.0}, rng)
    assert sum(s.counts.values()) >= 1
    assert s.integrate({"a": 1.0, "b": 0.0}) == s.counts.get("a", 0)


def test_size_biased_tv_is_small(rng):
    counts, _ = sample_size_biased_counts(N_AB, [1.0, 2.0], 100_000, rng)
    grid, law = size_biased_law(N_AB, [1.0, 2.0])
    assert law.sum() == pytest.approx(1.0, abs=1e-12)
    # Sampling noise alone puts TV near 0.0096 at this size; 0.012 is a 2.5 sd margin.
    assert tv_distance(counts, grid, law) < 0.012


small_measures = st.lists(st.floats(0.05, 2.5), min_size=1, max_size=2).map(
    lambda w: FiniteMeasure(tuple(enumerate(w))))
pos = st.floats(0.0, 3.0)


@settings(max_examples=40, deadline=None)
@given(small_measures, st.data())
def test_identities_by_enumeration(N, data):
    k = len(N.atoms)
    F = np.array(data.draw(st.lists(pos, min_size=k, max_size=k)))
    f = np.array(data.draw(st.lists(pos, min_size=k, max_size=k)))
    g = np.array(data.draw(st.lists(pos, min_size=k, max_size=k)))
    lhs = brute_force_expectation(N, lambda c: (c @ F) * np.exp(-(c @ f)))
    rhs = laplace_exact(N, f) * N.integrate(F * np.exp(-f))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-300)
    lhs = brute_force_expectation(N, lambda c: (c @ g) * (c @ f))
    rhs = N.integrate(g) * N.integrate(f) + N.integrate(g * f)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(small_measures, st.data())
def test_transform_chain_rule(N, data):
    k = len(N.atoms)
    F = np.array(data.draw(st.lists(st.floats(0.1, 3.0), min_size=k, max_size=k)))
    G = np.array(data.draw(st.lists(st.floats(0.1, 3.0), min_size=k, max_size=k)))
    np.testing.assert_allclose(N.transform(F).transform(G).weights, N.transform(F * G).weights, rtol=1e-14)

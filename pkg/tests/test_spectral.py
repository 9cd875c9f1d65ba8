import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critspine.model import ModelError, fixture, model_from_dict, model_to_dict
from critspine.spectral import (calibrate_critical, iu_gap, iu_ratio, kernel, mean_semigroup_apply,
                                principal_triple, semigroup_matrix, spine_generator)


def test_semigroup_examples(m1, m2, m3):
    assert mean_semigroup_apply(m1, 3.0, [2.0]) == pytest.approx([2.0])
    e = math.exp(-2)
    assert mean_semigroup_apply(m2, 1.0, [1, 0]) == pytest.approx([(1 + e) / 2, (1 - e) / 2], rel=1e-12)
    phi = principal_triple(m3).phi
    np.testing.assert_allclose(mean_semigroup_apply(m3, 5.0, phi), phi, rtol=1e-10)


def test_negative_time_rejected(m2):
    with pytest.raises(ValueError):
        mean_semigroup_apply(m2, -1.0, [1, 1])


def test_semigroup_property(m3):
    f = np.array([0.7, 2.1])
    for t, s in [(0.3, 1.1), (1.1, 0.3), (0.3, 0.3)]:
        a = mean_semigroup_apply(m3, t + s, f)
        b = mean_semigroup_apply(m3, t, mean_semigroup_apply(m3, s, f))
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_adjointness(m3, rng):
    D = np.diag(m3.m)
    Lstar = np.linalg.solve(D, m3.L.T @ D)
    from scipy.linalg import expm
    for _ in range(5):
        f, g = rng.random(2), rng.random(2)
        lhs = np.sum(mean_semigroup_apply(m3, 1.3, f) * g * m3.m)
        rhs = np.sum(f * (expm(1.3 * Lstar) @ g) * m3.m)
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_triples(m1, m2):
    sd = principal_triple(m1)
    assert (sd.lam, sd.phi[0], sd.phi_star[0], sd.c0, sd.gap_c) == pytest.approx((0, 1, 1, 1, 0), abs=1e-12)
    assert math.isinf(sd.gap_gamma)
    assert sd.to_dict()["gap_gamma"] is None
    sd = principal_triple(m2)
    np.testing.assert_allclose(sd.phi, [1, 1], rtol=1e-12)
    np.testing.assert_allclose(sd.phi_star, [1, 1], rtol=1e-12)
    assert sd.c0 == pytest.approx(1.0, rel=1e-12)
    assert sd.gap_gamma == pytest.approx(2.0, rel=1e-12)


def test_m3_triple_invariants(m3):
    sd = principal_triple(m3)
    m = m3.m
    assert abs(sd.lam) <= 1e-10
    assert np.all(sd.phi > 0) and np.all(sd.phi_star > 0)
    assert np.sum(sd.phi ** 2 * m) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(sd.phi * sd.phi_star * m) == pytest.approx(1.0, abs=1e-12)
    Lstar = np.linalg.solve(np.diag(m), m3.L.T @ np.diag(m))
    assert np.max(np.abs(m3.L @ sd.phi - sd.lam * sd.phi)) <= 1e-10
    assert np.max(np.abs(Lstar @ sd.phi_star - sd.lam * sd.phi_star)) <= 1e-10
    # frozen reference values from an independent eigen-solve
    np.testing.assert_allclose(sd.phi, [1.03308796, 0.9657791], rtol=1e-7)
    np.testing.assert_allclose(sd.phi_star, [0.70452324, 1.31724276], rtol=1e-7)
    assert sd.c0 == pytest.approx(1.1470482668390596, rel=1e-10)
    assert sd.gap_gamma == pytest.approx(2.939387691339814, rel=1e-10)


def test_calibration():
    raw = fixture("M3_raw")
    assert principal_triple(raw).lam == pytest.approx(-0.030306154330093316, rel=1e-9)
    cal = calibrate_critical(raw)
    assert cal.critical
    assert abs(principal_triple(cal).lam) <= 1e-10
    again = calibrate_critical(cal)
    assert np.max(np.abs(again.mech.beta - cal.mech.beta)) <= 1e-10

    d = model_to_dict(fixture("M1"))
    d["mechanism"]["beta"] = [0.7]
    assert calibrate_critical(model_from_dict(d)).mech.beta == pytest.approx([0.0], abs=1e-14)

    m2 = fixture("M2")
    np.testing.assert_allclose(calibrate_critical(m2).mech.beta, m2.mech.beta, atol=1e-12)


def test_spine_generator(m1, m2, m3):
    assert spine_generator(m1) == pytest.approx(np.zeros((1, 1)))
    np.testing.assert_allclose(spine_generator(m2), m2.motion.q, atol=1e-12)
    Qd = spine_generator(m3)
    sd = principal_triple(m3)
    assert np.max(np.abs(Qd.sum(axis=1))) <= 1e-12
    assert np.max(np.abs((sd.phi * sd.phi_star * m3.m) @ Qd)) <= 1e-10


def test_spine_generator_needs_criticality():
    with pytest.raises(ModelError):
        spine_generator(fixture("M3_raw"))


def test_iu_gap(m1, m2, m3):
    c, g = iu_gap(m2)
    assert g == pytest.approx(2.0)
    assert iu_gap(m1)[0] == 0
    c, g = iu_gap(m3)
    assert np.isfinite(c)
    for t in (2.0, 4.0, 8.0):
        assert iu_ratio(m3, t) <= c * math.exp(-g * t) * (1 + 1e-9)


def test_kernel_density(m3):
    q = kernel(m3, 0.8)
    np.testing.assert_allclose(q * m3.m[None, :], semigroup_matrix(m3, 0.8))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 3.0), min_size=6, max_size=6), st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_random_three_site_models(rates, beta):
    q = [[0, rates[0], rates[1]], [rates[2], 0, rates[3]], [rates[4], rates[5], 0]]
    for i in range(3):
        q[i][i] = -sum(q[i])
    model = calibrate_critical(model_from_dict({
        "space": {"m": [0.2, 0.3, 0.5]}, "motion": {"q": q},
        "mechanism": {"beta": beta, "alpha": [1.0, 0.5, 2.0]},
    }))
    sd = principal_triple(model)
    assert abs(sd.lam) <= 1e-10
    assert np.all(sd.phi > 0) and np.all(sd.phi_star > 0)
    Qd = spine_generator(model)
    assert np.max(np.abs((sd.phi * sd.phi_star * model.m) @ Qd)) <= 1e-9

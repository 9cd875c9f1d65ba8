import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from critspine.cumulant import TestFunctional, occupation_u
from critspine.pathsim import (SimConfig, ptilde_start_masses, sample_excursion_approx,
                               sample_feller_exact, sample_ptilde, simulate_batch,
                               simulate_superprocess)
from critspine.model import model_from_dict
from critspine.spectral import principal_triple, semigroup_matrix


def within(values, target, k=3.0, slack=0.0):
    values = np.asarray(values, dtype=float)
    se = values.std(ddof=1) / math.sqrt(values.size)
    return abs(values.mean() - target) <= k * se + slack


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(eps_excursion=0.5)
    with pytest.raises(ValueError):
        SimConfig(dt=0.1).steps(1.0)


def test_null_start_stays_null(m3, rng):
    path = simulate_superprocess(m3, [0.0, 0.0], 1.0, SimConfig(dt=1e-2), rng)
    assert not path.mass.any()
    assert path.extinct_at == pytest.approx(0.01)


def test_paths_nonnegative_and_absorbed(m3, rng):
    res = simulate_batch(m3, [0.3, 0.2], 2.0, SimConfig(dt=1e-2), rng, size=500,
                         record=np.linspace(0, 2, 41))
    assert np.all(res.mass >= 0)
    for b in np.flatnonzero(~np.isnan(res.extinct_at)):
        after = res.grid >= res.extinct_at[b] - 1e-12
        assert not res.mass[b, after].any()


def test_m1_extinction_frequency(m1, rng):
    res = simulate_batch(m1, [1.0], 1.0, SimConfig(dt=1e-3), rng, size=10_000)
    dead = (res.terminal.sum(axis=1) == 0).astype(float)
    assert within(dead, math.exp(-1))


@pytest.mark.slow
def test_m1_mean_and_second_moment(m1, rng):
    res = simulate_batch(m1, [1.0], 5.0, SimConfig(dt=1e-3), rng, size=20_000)
    x = res.terminal[:, 0]
    assert within(x, 1.0)
    # O(dt) weak bias of the clamped scheme is below 0.05 here
    assert within(x ** 2, 11.0, slack=0.05)


@pytest.mark.parametrize("name", ["M2", "M3"])
def test_mean_flow(name, rng):
    from critspine.model import fixture
    model = fixture(name)
    mu = np.array([1.0, 0.5])
    res = simulate_batch(model, mu, 1.0, SimConfig(dt=1e-3), rng, size=10_000)
    for f in (np.ones(2), principal_triple(model).phi):
        assert within(res.terminal @ f, mu @ semigroup_matrix(model, 1.0) @ f, slack=2e-3)


def test_laplace_functional_and_branching(m3, rng):
    kf = TestFunctional(1.0, ((0.5, [0.4, 1.0]), (1.0, [1.0, 0.3])))
    mu1, mu2 = np.array([0.6, 0.0]), np.array([0.0, 0.9])
    cfg = SimConfig(dt=1e-3)
    rec = [0.5, 1.0]

    def laplace(mu, size):
        res = simulate_batch(m3, mu, 1.0, cfg, rng, size=size, record=rec)
        return np.exp(-kf.evaluate(res.grid, res.mass))

    target = math.exp(-(mu1 + mu2) @ occupation_u(m3, kf).u0)
    joint = laplace(mu1 + mu2, 10_000)
    assert within(joint, target)
    split = laplace(mu1, 10_000) * laplace(mu2, 10_000)
    se = math.hypot(joint.std(), split.std()) / math.sqrt(10_000)
    assert abs(joint.mean() - split.mean()) <= 3 * se


def test_feller_exact_sampler(rng):
    x = sample_feller_exact(1.0, 1.0, 1.0, rng, size=100_000)
    assert within((x == 0).astype(float), math.exp(-1))
    assert within(np.exp(-x), math.exp(-0.5))
    short = sample_feller_exact(1.0, 1.0, 1e-3, rng, size=10_000)
    assert within(short, 1.0)
    with pytest.raises(ValueError):
        sample_feller_exact(0.0, 1.0, 1.0, rng)


def test_feller_exact_matches_euler(m1, rng):
    exact = sample_feller_exact(1.0, 1.0, 1.0, rng, size=10_000)
    euler = simulate_batch(m1, [1.0], 1.0, SimConfig(dt=1e-3), rng, size=10_000).terminal[:, 0]
    assert ks_2samp(exact, euler).pvalue > 0.01


def test_split_law_starts(m1, m3, rng):
    assert not ptilde_start_masses(m1, np.zeros(1000, dtype=int), rng).any()
    pure = model_from_dict({
        "space": {"m": [1.0]}, "motion": {"q": [[0.0]]},
        "mechanism": {"beta": [0.0], "alpha": [0.0], "pi": [[{"y": 1.0, "p": 1.0}]]},
    })
    assert np.all(ptilde_start_masses(pure, np.zeros(1000, dtype=int), rng) == 1.0)
    s = ptilde_start_masses(m3, np.zeros(20_000, dtype=int), rng)
    assert set(np.unique(s)) <= {0.0, 1.0}
    assert within((s == 0).astype(float), 1 / 1.2)
    assert sample_ptilde(m1, 0, 1.0, SimConfig(dt=1e-2), rng).extinct_at == 0.0


def test_excursion_device(m1, m3, rng):
    eps = 1e-3
    res = simulate_batch(m1, [eps], 1.0, SimConfig(dt=1e-3), rng, size=20_000)
    alive = (res.terminal.sum(axis=1) > 0).astype(float)
    assert within(alive, -math.expm1(-eps))
    res = simulate_batch(m3, [0.0, 0.01], 1.0, SimConfig(dt=1e-3), rng, size=20_000)
    target = semigroup_matrix(m3, 1.0)[1] @ np.ones(2)
    assert within(res.terminal.sum(axis=1) / 0.01, target, slack=2e-3)
    path = sample_excursion_approx(m3, 0, 0.01, 1.0, SimConfig(dt=1e-2), rng)
    assert path.mass[0, 0] == 0.01


def test_split_scheme_has_no_boundary_bias_from_small_mass(m3, rng):
    mu = [0.0, 0.01]
    target = semigroup_matrix(m3, 1.0)[1].sum()
    split = simulate_batch(m3, mu, 1.0, SimConfig(dt=1e-3), rng, size=40_000).terminal.sum(axis=1) / 0.01
    assert within(split, target)
    # Clamping the Gaussian step at zero inflates the mean by roughly half at this start.
    clamped = simulate_batch(m3, mu, 1.0, SimConfig(dt=1e-3, scheme="euler"), rng,
                             size=40_000).terminal.sum(axis=1) / 0.01
    assert clamped.mean() - target > 4 * clamped.std() / math.sqrt(clamped.size)


def test_unknown_scheme_rejected():
    with pytest.raises(ValueError):
        SimConfig(scheme="milstein")

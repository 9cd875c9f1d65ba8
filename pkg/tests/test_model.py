import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critspine.model import (ModelError, fixture, load_model, mechanism_eval, model_from_dict,
                             model_to_dict, validate_model)


def one_site(alpha=0.0, atoms=()):
    return model_from_dict({
        "space": {"labels": ["x"], "m": [1.0]},
        "motion": {"q": [[0.0]]},
        "mechanism": {"beta": [0.0], "alpha": [alpha], "pi": [[{"y": y, "p": p} for y, p in atoms]]},
    })


@pytest.mark.parametrize("name", ["M1", "M2", "M3"])
def test_fixtures_validate(name):
    rep = validate_model(fixture(name))
    assert rep.passed, rep.to_dict()
    assert rep["criticality"].value <= 1e-10


def test_negative_rate_names_entry():
    d = model_to_dict(fixture("M2"))
    d["motion"]["q"][0][1] = -0.5
    with pytest.raises(ModelError) as exc:
        model_from_dict(d)
    assert exc.value.field == "motion.q[0][1]"


@pytest.mark.parametrize("patch, field", [
    (lambda d: d["space"].__setitem__("m", [0.5, 0.0]), "space.m[1]"),
    (lambda d: d["space"].update(labels=[], m=[]), "space.labels"),
])
def test_structural_errors(patch, field):
    d = model_to_dict(fixture("M2"))
    patch(d)
    with pytest.raises(ModelError) as exc:
        model_from_dict(d)
    assert exc.value.field == field


def test_degenerate_mechanism_flagged():
    rep = validate_model(one_site(alpha=0.0))
    assert not rep["psi0_nondegenerate"].passed


def test_pure_jump_site_fails_grey_check():
    # Finite-activity jumps only: the process never hits zero, v_t blows up.
    rep = validate_model(one_site(alpha=0.0, atoms=[(1.0, 1.0)]))
    assert not rep["extinction_grey"].passed


def test_mechanism_m1(m1):
    r = mechanism_eval(m1, 0, 2.0)
    assert (r.psi, r.psi0, r.psi_prime, r.psi0_prime, r.psi0_second, r.A, r.R, r.e_bound) == \
        pytest.approx((4, 4, 4, 4, 2, 2, 0, 0))


def test_mechanism_at_zero(m3):
    for x in range(2):
        r = mechanism_eval(m3, x, 0.0)
        assert r.psi == r.psi0 == r.psi0_prime == r.R == 0
        assert r.psi0_second == pytest.approx(r.A)


def test_mechanism_single_atom():
    r = mechanism_eval(one_site(atoms=[(1.0, 1.0)]), 0, 1.0)
    assert r.psi0 == pytest.approx(math.exp(-1), rel=1e-12)
    assert r.A == 1
    assert r.R == pytest.approx(math.exp(-1) - 0.5, rel=1e-12)
    assert r.e_bound == pytest.approx(1 / 6)
    assert abs(r.R) <= r.e_bound


def test_negative_z_rejected(m1):
    with pytest.raises(ValueError):
        mechanism_eval(m1, 0, -1.0)


def test_json_roundtrip(tmp_path, m3):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(model_to_dict(m3)))
    back = load_model(p)
    np.testing.assert_array_equal(back.L, m3.L)
    assert back.mech.pi == m3.mech.pi


mech_models = st.builds(
    lambda a, atoms: one_site(a, atoms),
    st.floats(0.0, 3.0),
    st.lists(st.tuples(st.floats(0.05, 4.0), st.floats(0.0, 2.0)), min_size=0, max_size=3),
)


@settings(max_examples=60, deadline=None)
@given(mech_models, st.floats(0.0, 10.0))
def test_mechanism_inequalities(model, z):
    r = mechanism_eval(model, 0, z)
    assert r.psi0 >= -1e-15
    assert abs(r.R) <= r.e_bound * z * z * (1 + 1e-9) + 1e-14
    assert r.e_bound <= r.A * (1 + 1e-12) + 1e-15
    assert r.psi_prime == pytest.approx(-model.mech.beta[0] + r.psi0_prime, abs=1e-12)
    assert r.psi0_second <= r.A + 1e-12


@settings(max_examples=40, deadline=None)
@given(mech_models)
def test_mechanism_derivatives_match_differences(model):
    for z in (0.1, 1.0, 5.0):
        h = 1e-5 * max(z, 1.0)
        lo, mid, hi = (mechanism_eval(model, 0, z + d) for d in (-h, 0.0, h))
        fd1 = (hi.psi0 - lo.psi0) / (2 * h)
        fd2 = (hi.psi0_prime - lo.psi0_prime) / (2 * h)
        assert fd1 == pytest.approx(mid.psi0_prime, rel=1e-6, abs=1e-10)
        assert fd2 == pytest.approx(mid.psi0_second, rel=1e-6, abs=1e-10)
        # convexity and monotone second derivative
        assert lo.psi0 + hi.psi0 - 2 * mid.psi0 >= -1e-12
        assert hi.psi0_second <= lo.psi0_second + 1e-12

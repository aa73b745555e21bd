import numpy as np
import pytest

from perilayer.expansion import (LEVELS, approximation_error, build_composite, evaluate_composite,
                                 match_low_order, omega_alpha)
from perilayer.fem import Field
from perilayer.macro import solve_macro_correction


def test_match_low_order_example():
    m = match_low_order({"plus": {1: 2.0, 2: 5.0}, "minus": {1: -1.0}},
                        {"plus": 0.1, "minus": 0.2})
    assert m.L1_U10_plus == 2.0 and m.L1_U10_minus == -1.0
    assert m.lm1_u20_plus == pytest.approx(0.2)
    assert m.lm1_u20_minus == pytest.approx(-0.2)
    assert m.u1q_zero and m.U0q_zero


def test_match_low_order_scalar_form():
    a = match_low_order({"plus": 3.0, "minus": 4.0}, {"plus": 0.5, "minus": 0.25})
    b = match_low_order({"plus": {1: 3.0}, "minus": {1: 4.0}}, {"plus": 0.5, "minus": 0.25})
    assert a.record() == b.record()


def test_levels_nested():
    assert LEVELS["5/3"] == LEVELS["4/3"]
    for lo, hi in (("2/3", "1"), ("1", "4/3")):
        assert set(LEVELS[lo]) < set(LEVELS[hi])


def test_profile_plateau_and_periodicity(disk_tc, rng):
    W1n = disk_tc.profiles[("n", 1)]
    W0 = disk_tc.profiles[("t", 0)]
    X1 = rng.uniform(0.0, 1.0, 20)
    X2 = rng.uniform(-4.0, 4.0, 20)
    for W in (W0, W1n):
        assert np.allclose(W.evaluate(X1 + 1.0, X2), W.evaluate(X1, X2), atol=1e-12)
    far = np.full(20, 5.0)
    assert np.allclose(W0.evaluate(X1, far), 0.0, atol=1e-12)


@pytest.fixture(scope="module")
def empty_composite(domain, u00, empty_tc):
    u01 = solve_macro_correction(u00, empty_tc, domain)
    return build_composite(domain, empty_tc, u00, u01)


def test_empty_composite_is_u00(empty_composite, limit_mesh):
    v = limit_mesh.vertices
    ids = np.arange(limit_mesh.n_vertices)
    base = empty_composite.terms["u00"].nodal_total()
    delta = 0.125
    far = ~(np.abs(v[:, 1]) < 2 * delta)
    for lv in LEVELS:
        c = evaluate_composite(empty_composite, delta, v[:, 0], v[:, 1], lv, ids)
        assert np.abs(c[far] - base[far]).max() <= 1e-9 * np.abs(base).max()
        # in the layer the corrector replaces u00 by its trace, an O(delta) change
        assert np.abs(c - base).max() <= 2 * delta * np.abs(base).max()


def test_composite_linear_in_delta_powers(domain, u00, disk_tc, limit_mesh):
    u01 = solve_macro_correction(u00, disk_tc, domain)
    ap = build_composite(domain, disk_tc, u00, u01)
    v = limit_mesh.vertices
    ids = np.arange(limit_mesh.n_vertices)
    delta = 0.125
    # the layer profiles decay like exp(-2 pi |X2|); beyond 4 delta they are negligible
    far = ~(np.abs(v[:, 1]) < 4 * delta)
    c0 = evaluate_composite(ap, delta, v[:, 0], v[:, 1], "2/3", ids)
    c1 = evaluate_composite(ap, delta, v[:, 0], v[:, 1], "1", ids)
    assert np.allclose((c1 - c0)[far], delta * u01.nodal_total()[far], atol=1e-10)


def test_omega_alpha_predicate(domain):
    pred = omega_alpha(domain, 0.15)
    assert not pred(np.array([0.0]), np.array([0.1]))[0]
    assert pred(np.array([0.0]), np.array([0.2]))[0]
    # the excluded strip reaches alpha past each corner
    assert not pred(np.array([1.1]), np.array([0.05]))[0]
    assert pred(np.array([1.2]), np.array([0.05]))[0]


@pytest.mark.parametrize("alpha", [0.0, -0.1, 0.75, 1.0])
def test_alpha_out_of_range(empty_composite, u00, alpha):
    with pytest.raises(ValueError):
        approximation_error(Field(u00.mesh, u00.nodal_total()), empty_composite, 0.125, alpha)

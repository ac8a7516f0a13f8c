import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from roughrobust.noise_models import mollifier
from roughrobust.policy import (
    CertificationError, LipschitzPolicy, PolicyError, certify, from_selector, mollify, sampled_lipschitz_check,
)

X = np.linspace(-2.0, 2.0, 41)  # spacing 0.1


def bang_bang():
    # nodes straddle the switch, so one cell jumps from 1 to -1
    xs = np.linspace(-1.95, 1.95, 40)
    return from_selector(xs, -np.sign(xs), (-1.0, 1.0))


def test_constant_selector_has_zero_slope():
    p = from_selector(X, np.full(X.size, 0.3), (-1.0, 1.0))
    assert p.certified_lipschitz == 0.0


def test_bang_bang_slope_at_switch():
    assert bang_bang().raw_lipschitz() == pytest.approx(20.0)


def test_clamped_linear_selector():
    p = from_selector(X, 0.5 * X, (-0.5, 0.5))
    assert p.raw_lipschitz() == pytest.approx(0.5)
    q = from_selector(X, 3 * X, (-1.0, 1.0))
    assert q.values.max() == 1.0 and q.values.min() == -1.0


def test_mollify_constant_and_linear():
    c = from_selector(X, np.full(X.size, -0.4), (-1.0, 1.0))
    np.testing.assert_allclose(mollify(c, 0.3).values, c.values, atol=1e-12)
    lin = from_selector(X, 0.2 * X, (-1.0, 1.0))
    m = mollify(lin, 0.3)
    inner = np.abs(X) <= 2.0 - 0.3
    np.testing.assert_allclose(m.values[inner], lin.values[inner], atol=1e-12)


def _convolved_sign(x, eps):
    # minus sign(x) smoothed by the bump: 1 - 2 * mass of the kernel below x
    below, _ = quad(lambda y: mollifier(y, eps), -eps, min(max(x, -eps), eps))
    return 1.0 - 2.0 * below


def test_mollified_bang_bang_against_quadrature():
    eps = 0.2
    m = mollify(bang_bang(), eps)
    exact = np.array([_convolved_sign(x, eps) for x in m.state_grid])
    # the table is a convolution of the nodal values, so the oracle holds up to the cell size
    assert np.abs(m.values - exact).max() <= 0.15
    assert m.raw_lipschitz() <= 2 * (1.0 - (-1.0)) / eps
    assert m.certified_lipschitz <= bang_bang().raw_lipschitz()
    assert m.certified_lipschitz >= m.raw_lipschitz()


def test_mollify_converges_at_continuity_points():
    fine = np.linspace(-2.0, 2.0, 401)
    p = from_selector(fine, -np.sign(fine), (-1.0, 1.0))
    probe = np.array([-0.6, -0.3, 0.3, 0.6])
    errs = [np.abs(mollify(p, eps).evaluate(probe) - p.evaluate(probe)).max() for eps in (0.8, 0.4, 0.1)]
    assert errs[0] > errs[1] > errs[2] == pytest.approx(0.0, abs=1e-12)


def test_mollify_rejects_small_bandwidth():
    with pytest.raises(PolicyError):
        mollify(bang_bang(), 0.1)
    with pytest.raises(PolicyError):
        mollify(bang_bang(), 0.05)


def test_evaluate_nodes_midpoints_and_outside():
    p = from_selector(X, np.tanh(X), (-1.0, 1.0))
    np.testing.assert_allclose(p.evaluate(X), np.tanh(X), atol=1e-14)
    mid = 0.5 * (X[:-1] + X[1:])
    np.testing.assert_allclose(p.evaluate(mid), 0.5 * (np.tanh(X[:-1]) + np.tanh(X[1:])), atol=1e-14)
    assert p.evaluate(5.0) == pytest.approx(np.tanh(2.0))
    assert p.evaluate(-7.0) == pytest.approx(np.tanh(-2.0))


def test_time_varying_evaluation():
    ts = np.array([0.0, 0.5, 1.0])
    vals = np.stack([np.zeros_like(X), 0.5 * np.ones_like(X), np.ones_like(X)])
    p = from_selector(X, vals, (0.0, 1.0), time_grid=ts)
    assert p.evaluate(0.3, t=0.25) == pytest.approx(0.25)
    assert p.evaluate(0.3, t=2.0) == pytest.approx(1.0)
    assert p.time_slope() == pytest.approx(1.0)
    with pytest.raises(PolicyError):
        p.evaluate(0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=5, max_size=30))
def test_sampled_check_holds_for_certified_tables(vals):
    xs = np.linspace(-1.0, 1.0, len(vals))
    p = from_selector(xs, vals, (-1.0, 1.0))
    passed, worst = sampled_lipschitz_check(p, n_pairs=2000)
    assert passed and worst <= 1.0 + 1e-12


def test_sampled_check_time_varying():
    ts = np.linspace(0.0, 1.0, 6)
    vals = np.sin(ts[:, None] * 3 + X[None, :])
    p = from_selector(X, vals, (-1.0, 1.0), time_grid=ts)
    passed, _ = sampled_lipschitz_check(p, n_pairs=2000)
    assert passed


def test_sampled_check_catches_understated_constant():
    p = from_selector(X, 0.5 * X, (-1.0, 1.0))
    fake = object.__new__(LipschitzPolicy)
    for k in ("state_grid", "values", "u_bounds", "time_grid"):
        object.__setattr__(fake, k, getattr(p, k))
    object.__setattr__(fake, "certified_lipschitz", 0.1)
    passed, worst = sampled_lipschitz_check(fake, n_pairs=2000)
    assert not passed and worst > 1.0


def test_constructor_rejects_understated_constant():
    with pytest.raises(CertificationError):
        LipschitzPolicy(X, 0.5 * X / 2, (-1.0, 1.0), 0.1)


def test_certify():
    certify(from_selector(X, 0.5 * X / 2, (-1.0, 1.0)), 0.25)
    with pytest.raises(CertificationError):
        certify(bang_bang(), 10.0)


def test_values_outside_action_interval_rejected():
    with pytest.raises(PolicyError):
        LipschitzPolicy(X, 2 * np.ones_like(X), (-1.0, 1.0), 0.0)


def test_json_round_trip(tmp_path):
    p = mollify(bang_bang(), 0.3)
    path = tmp_path / "p.json"
    p.save(str(path))
    q = LipschitzPolicy.load(str(path))
    np.testing.assert_array_equal(q.values, p.values)
    assert q.certified_lipschitz == p.certified_lipschitz
    assert q.fingerprint() == p.fingerprint()
    with pytest.raises(PolicyError):
        LipschitzPolicy.from_json('{"format": "other"}')

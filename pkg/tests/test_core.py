import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from ecap.core import (ConditionalMoments, excess_certainty, expected_ec_loss, flip, flip_array, h_theta,
                       h_theta_inverse, h_theta_prime, oracle_adjust, oracle_loss_gap_bound, unflip,
                       unflip_array)
from ecap.errors import DomainError

probs = st.floats(0.0, 1.0, allow_nan=False)
interior = st.floats(1e-6, 1 - 1e-6, allow_nan=False)
thetas = st.sampled_from([-4.0, -3.0, -1.0, -0.3, 0.0, 0.7, 1.0, 2.0])


# ---- excess certainty -----------------------------------------------------

@pytest.mark.parametrize("p, est, expected", [
    (0.26, 0.25, 0.04),
    (0.01, 0.0001, 99.0),
    (0.3, 0.3, 0.0),
    (0.7, 0.75, -0.2),
])
def test_excess_certainty_examples(p, est, expected):
    assert excess_certainty(p, est) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("est", [0.0, 1.0])
def test_excess_certainty_rejects_boundary(est):
    with pytest.raises(DomainError):
        excess_certainty(0.5, est)


def test_excess_certainty_rejects_out_of_range():
    with pytest.raises(DomainError):
        excess_certainty(1.2, 0.5)


@given(probs, interior)
def test_excess_certainty_complement_antisymmetric(p, est):
    assert excess_certainty(1 - p, 1 - est) == pytest.approx(-excess_certainty(p, est), rel=1e-9, abs=1e-9)


def test_excess_certainty_vectorised():
    out = excess_certainty([0.26, 0.01], [0.25, 0.0001])
    np.testing.assert_allclose(out, [0.04, 99.0])


# ---- oracle --------------------------------------------------------------

@pytest.mark.parametrize("mean, var, expected", [
    (0.1, 0.01, 0.2),
    (0.3, 0.0, 0.3),
    (0.45, 0.04, 0.5),
])
def test_oracle_lower_examples(mean, var, expected):
    assert oracle_adjust(ConditionalMoments(mean, var), True) == pytest.approx(expected)


def test_oracle_upper_branch_mirrors_lower():
    lo = oracle_adjust(ConditionalMoments(0.1, 0.01), True)
    hi = oracle_adjust(ConditionalMoments(0.9, 0.01), False)
    assert hi == pytest.approx(1 - lo)


def test_conditional_moments_validates():
    with pytest.raises(DomainError):
        ConditionalMoments(0.0, 0.1)
    with pytest.raises(DomainError):
        ConditionalMoments(0.3, -1e-3)


@given(st.floats(1e-4, 0.9999), st.floats(0, 0.25))
def test_oracle_stays_between_mean_and_half(mean, var):
    m = ConditionalMoments(mean, var)
    lo = oracle_adjust(m, True)
    assert min(mean, 0.5) - 1e-15 <= lo <= 0.5
    hi = oracle_adjust(m, False)
    assert 0.5 <= hi <= max(mean, 0.5) + 1e-15


def _discrete_posterior(rng, k=10_000):
    support = np.sort(rng.beta(2, 12, k))
    weights = rng.random(k)
    return support, weights / weights.sum()


@pytest.mark.parametrize("seed", range(5))
def test_oracle_matches_brute_force_minimiser(seed):
    rng = np.random.default_rng(seed)
    s, w = _discrete_posterior(rng)
    mean = float(np.sum(w * s))
    var = float(np.sum(w * (s - mean) ** 2))
    closed = oracle_adjust(ConditionalMoments(mean, var), True)
    res = optimize.minimize_scalar(lambda a: expected_ec_loss(a, s, w), bounds=(1e-4, 0.5),
                                   method="bounded", options={"xatol": 1e-12})
    assert res.x == pytest.approx(closed, abs=1e-6)


def test_gap_bound_example_and_zero():
    assert oracle_loss_gap_bound(0.1, 0.2, 0.05) == pytest.approx(1.25)
    assert oracle_loss_gap_bound(0.2, 0.2, 0.05) == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_gap_bound_holds_on_discrete_posterior(seed):
    rng = np.random.default_rng(100 + seed)
    s, w = _discrete_posterior(rng)
    mean = float(np.sum(w * s))
    var = float(np.sum(w * (s - mean) ** 2))
    p0 = oracle_adjust(ConditionalMoments(mean, var), True)
    second = float(np.sum(w * s ** 2))
    l0 = expected_ec_loss(p0, s, w)
    for p_prime in rng.uniform(0.01, 0.5, 100):
        gap = expected_ec_loss(p_prime, s, w) - l0
        assert gap >= oracle_loss_gap_bound(p_prime, p0, second) - 1e-12


def test_gap_bound_at_half_uses_side_of_mean():
    # two-point posterior with mean 0.75 and large variance: the oracle is pinned at 0.5
    s, w = np.array([0.3, 0.9]), np.array([0.25, 0.75])
    mean = float(np.sum(w * s))
    var = float(np.sum(w * (s - mean) ** 2))
    p0 = oracle_adjust(ConditionalMoments(mean, var), False)
    assert p0 == 0.5
    l0 = expected_ec_loss(p0, s, w)
    upper = float(np.sum(w * (1 - s) ** 2))
    lower = float(np.sum(w * s ** 2))
    grid = np.linspace(0.01, 0.99, 99)
    gaps = np.array([expected_ec_loss(a, s, w) - l0 for a in grid])
    assert np.all(gaps >= [oracle_loss_gap_bound(a, p0, upper) - 1e-12 for a in grid])
    # the other side's second moment is not a valid bound here
    assert np.any(gaps < [oracle_loss_gap_bound(a, p0, lower) for a in grid])


# ---- bias link -------------------------------------------------------------

@pytest.mark.parametrize("x, theta, expected", [
    (0.3, 0.0, 0.3),
    (0.5, -3.0, 0.5),
    (0.25, 2.0, 0.15625),
])
def test_h_theta_examples(x, theta, expected):
    assert h_theta(x, theta) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("theta", [-4.0, -1.0, 0.0, 1.0, 2.0])
def test_h_theta_symmetry_and_fixed_points(theta):
    x = np.linspace(0, 1, 201)
    np.testing.assert_allclose(h_theta(1 - x, theta), 1 - h_theta(x, theta), atol=1e-14)
    np.testing.assert_allclose(h_theta(np.array([0.0, 0.5, 1.0]), theta), [0.0, 0.5, 1.0], atol=1e-15)


@pytest.mark.parametrize("theta", [-4.0, -3.0, -1.0, 0.0, 1.0, 2.0])
def test_h_theta_monotone_and_inverse(theta):
    x = np.linspace(0, 1, 1001)
    assert np.all(h_theta_prime(x, theta) >= 0)
    np.testing.assert_allclose(h_theta_inverse(h_theta(x, theta), theta), x, atol=1e-10)


@given(probs, thetas)
def test_h_theta_inverse_roundtrip_scalar(y, theta):
    assert h_theta(h_theta_inverse(y, theta), theta) == pytest.approx(y, abs=1e-10)


def test_h_theta_inverse_rejects_theta_outside_range():
    with pytest.raises(DomainError):
        h_theta_inverse(0.3, 3.0)


# ---- flipping --------------------------------------------------------------

@given(probs)
def test_flip_roundtrip(p):
    v = flip(p)
    assert v.value <= 0.5
    assert unflip(v) == pytest.approx(p, abs=1e-15)


def test_half_is_not_flipped():
    assert flip(0.5).flipped is False


@settings(max_examples=50)
@given(st.lists(probs, min_size=1, max_size=50))
def test_flip_array_roundtrip(ps):
    v, m = flip_array(ps)
    assert np.all(v <= 0.5)
    np.testing.assert_allclose(unflip_array(v, m), ps, atol=1e-15)

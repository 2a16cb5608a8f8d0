"""Scalar mathematics of the ECAP model.

Excess certainty, the expected loss it induces, the closed-form oracle that
minimises that loss, the cubic bias link and the flip transform about 0.5.
Everything here is a pure function.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

THETA_MIN = -4.0
THETA_MAX = 2.0


def check_probability(p, name="p"):
    """Return ``p`` as float(s), raising DomainError unless every value is in [0, 1]."""
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"{name} must lie in [0, 1], got {p!r}")
    return float(arr) if arr.ndim == 0 else arr


def check_theta(theta):
    theta = float(theta)
    if not THETA_MIN <= theta <= THETA_MAX:
        raise DomainError(f"theta must lie in [{THETA_MIN}, {THETA_MAX}], got {theta}")
    return theta


@dataclass(frozen=True)
class ConditionalMoments:
    """Mean and variance of the true probability given an observed one."""

    mean: float
    variance: float

    def __post_init__(self):
        if not 0.0 < self.mean < 1.0:
            raise DomainError(f"conditional mean must lie in (0, 1), got {self.mean}")
        if not self.variance >= 0.0:
            raise DomainError(f"conditional variance must be >= 0, got {self.variance}")


@dataclass(frozen=True)
class FlippedValue:
    value: float
    flipped: bool


def excess_certainty(p_true, p_est):
    """Relative error ``(p_true - p_est) / min(p_est, 1 - p_est)``.

    Positive values mean ``p_est`` was too close to its nearer boundary.
    Accepts scalars or arrays; ``p_est`` equal to 0 or 1 is rejected.
    """
    p_true = check_probability(p_true, "p_true")
    p_est = check_probability(p_est, "p_est")
    denom = np.minimum(p_est, 1.0 - p_est)
    if np.any(denom == 0.0):
        raise DomainError("excess certainty is undefined for p_est in {0, 1}")
    return (p_true - p_est) / denom


def expected_ec_loss(a, support, weights):
    """E[EC(a)^2] when the true probability is distributed on ``support`` with ``weights``."""
    a = float(a)
    if not 0.0 < a < 1.0:
        raise DomainError(f"a must lie in (0, 1), got {a}")
    support = np.asarray(support, dtype=float)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return float(np.sum(w * ((support - a) / min(a, 1.0 - a)) ** 2))


def oracle_adjust(moments, side_le_half=True):
    """Loss-minimising estimate given the conditional mean and variance.

    On the lower side the conditional mean is pushed up by variance/mean and
    capped at 0.5; on the upper side it is pushed down by
    variance/(1 - mean) and floored at 0.5.
    """
    m, v = moments.mean, moments.variance
    if side_le_half:
        if m <= 0.0:
            raise DomainError("conditional mean must be positive on the lower branch")
        return min(m + v / m, 0.5)
    if m >= 1.0:
        raise DomainError("conditional mean must be below 1 on the upper branch")
    return max(0.5, m - v / (1.0 - m))


def oracle_loss_gap_bound(p_prime, p0, second_moment):
    """Lower bound on ``L(p_prime) - L(p0)`` for the oracle ``p0``.

    ``second_moment`` is E(p^2 | p_tilde) when the conditional mean is at
    most 0.5 and E((1 - p)^2 | p_tilde) otherwise. Choose it by the side of
    the mean, not of ``p0``: when the oracle is pinned at 0.5 from above,
    E(p^2) does not give a valid bound.
    """
    p_prime = check_probability(p_prime, "p_prime")
    p0 = check_probability(p0, "p0")
    if p_prime in (0.0, 1.0) or p0 in (0.0, 1.0):
        raise DomainError("bound is undefined at 0 or 1")
    if p0 <= 0.5:
        return second_moment * (1.0 / p_prime - 1.0 / p0) ** 2
    return second_moment * (1.0 / (1.0 - p_prime) - 1.0 / (1.0 - p0)) ** 2


def h_theta(x, theta):
    """Cubic bias link ``(1 - theta/2) x - theta (x^3 - 1.5 x^2)``.

    Maps E(p_tilde | p) to the true probability. Identity at theta = 0,
    fixes 0, 0.5 and 1, and satisfies h(1 - x) = 1 - h(x).
    """
    x = np.asarray(x, dtype=float)
    out = (1.0 - 0.5 * theta) * x - theta * (x ** 3 - 1.5 * x ** 2)
    return float(out) if out.ndim == 0 else out


def h_theta_prime(x, theta):
    x = np.asarray(x, dtype=float)
    return 1.0 - 0.5 * theta + 3.0 * theta * x * (1.0 - x)


def h_theta_inverse(y, theta, tol=1e-12):
    """Solve ``h_theta(x) = y`` for x in [0, 1].

    Bisection on the bracket [0, 1] (h is monotone for theta in [-4, 2]),
    vectorised over ``y``.
    """
    theta = check_theta(theta)
    y = check_probability(y, "y")
    scalar = np.ndim(y) == 0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if theta == 0.0:
        x = y.copy()
    else:
        lo = np.zeros_like(y)
        hi = np.ones_like(y)
        # 2^-50 < 1e-15, comfortably inside tol
        n_iter = max(1, int(np.ceil(np.log2(1.0 / tol))) + 4)
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            below = h_theta(mid, theta) < y
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        x = 0.5 * (lo + hi)
        x[y == 0.0] = 0.0
        x[y == 1.0] = 1.0
        x[y == 0.5] = 0.5
    return float(x[0]) if scalar else x


def flip(p):
    """Reflect ``p > 0.5`` to ``1 - p``; 0.5 itself stays unflipped."""
    p = check_probability(p)
    if p > 0.5:
        return FlippedValue(1.0 - p, True)
    return FlippedValue(p, False)


def unflip(v):
    return 1.0 - v.value if v.flipped else v.value


def flip_array(p):
    """Vectorised flip: returns (values on [0, 0.5], boolean flipped mask)."""
    p = np.asarray(p, dtype=float)
    mask = p > 0.5
    return np.where(mask, 1.0 - p, p), mask


def unflip_array(values, mask):
    values = np.asarray(values, dtype=float)
    return np.where(mask, 1.0 - values, values)

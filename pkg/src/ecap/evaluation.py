"""Empirical excess certainty of forecasts whose outcomes are known.

Forecasts above 0.5 are flipped together with their outcomes. Within a window
of flipped values the observed event rate is compared with the mean of the
(adjusted or raw) forecasts:

    EC = (mean outcome - mean forecast) / mean forecast

Weights, when given, are frequency weights.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import check_probability
from .errors import DomainError, InsufficientDataError

log = logging.getLogger(__name__)

DEFAULT_DRAWS = 2000


@dataclass(frozen=True)
class ForecastRecord:
    p_tilde: float
    z: int
    group: str = None
    weight: float = 1.0

    def __post_init__(self):
        check_probability(self.p_tilde, "p_tilde")
        if self.z not in (0, 1):
            raise DomainError(f"outcome must be 0 or 1, got {self.z!r}")
        if not self.weight > 0:
            raise DomainError("weight must be positive")


@dataclass(frozen=True)
class Window:
    """Closed interval ``[lower, upper]`` of flipped probabilities."""

    lower: float
    upper: float

    def __post_init__(self):
        if not 0.0 <= self.lower < self.upper <= 0.5:
            raise DomainError(f"window needs 0 <= lower < upper <= 0.5, got [{self.lower}, {self.upper}]")

    @classmethod
    def parse(cls, text):
        """From ``"lo,hi"``."""
        try:
            lo, hi = (float(v) for v in text.split(","))
        except ValueError as exc:
            raise DomainError(f"window must look like 'lo,hi', got {text!r}") from exc
        return cls(lo, hi)

    def contains(self, x):
        return (x >= self.lower) & (x <= self.upper)


@dataclass(frozen=True)
class EcPoint:
    key: object
    ec: float
    lo: float
    hi: float
    n_delta: int

    @property
    def missing(self):
        return np.isnan(self.ec)


def _columns(records):
    p = np.array([r.p_tilde for r in records], dtype=float)
    z = np.array([r.z for r in records], dtype=float)
    w = np.array([r.weight for r in records], dtype=float)
    return p, z, w


def _select(p_tilde, z, adjusted, weights, window):
    """Flip, select the window, and return (z, adjusted, weights) inside it."""
    p_tilde = check_probability(np.asarray(p_tilde, dtype=float), "p_tilde")
    z = np.asarray(z, dtype=float)
    adjusted = check_probability(np.asarray(adjusted, dtype=float), "adjusted")
    w = np.ones_like(p_tilde) if weights is None else np.asarray(weights, dtype=float)
    if not (p_tilde.shape == z.shape == adjusted.shape == w.shape):
        raise DomainError("p_tilde, z, adjusted and weights must have the same length")
    upper = p_tilde > 0.5
    x = np.where(upper, 1.0 - p_tilde, p_tilde)
    zf = np.where(upper, 1.0 - z, z)
    af = np.where(upper, 1.0 - adjusted, adjusted)
    keep = window.contains(x)
    return zf[keep], af[keep], w[keep]


def _ec(z, a, w):
    abar = np.sum(a * w) / np.sum(w)
    if not abar > 0:
        raise DomainError("mean adjusted probability in the window is zero")
    return (np.sum(z * w) / np.sum(w) - abar) / abar


def empirical_ec(p_tilde, z, adjusted, window, weights=None):
    """Empirical excess certainty inside ``window``.

    Parameters
    ----------
    p_tilde : array_like
        Raw forecasts; they decide window membership (after flipping).
    z : array_like of {0, 1}
        Outcomes.
    adjusted : array_like
        The forecasts being evaluated, aligned with ``p_tilde``. Pass
        ``p_tilde`` itself to evaluate the raw forecasts.
    window : Window
    weights : array_like, optional
        Frequency weights.
    """
    zs, a, w = _select(p_tilde, z, adjusted, weights, window)
    if zs.size == 0:
        raise InsufficientDataError(f"no forecasts fall in [{window.lower}, {window.upper}]")
    return float(_ec(zs, a, w))


def bootstrap_ci(p_tilde, z, adjusted, window, level=0.9, draws=DEFAULT_DRAWS, seed=0, weights=None):
    """Percentile bootstrap interval for :func:`empirical_ec`.

    Records inside the window are resampled with replacement; the interval
    runs between the ``(1 - level)/2`` and ``(1 + level)/2`` quantiles.
    """
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    if draws < 1:
        raise DomainError("draws must be positive")
    zs, a, w = _select(p_tilde, z, adjusted, weights, window)
    if zs.size < 2:
        raise InsufficientDataError("bootstrap needs at least two forecasts in the window")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, zs.size, size=(draws, zs.size))
    stats = _kernels.bootstrap_ec(zs, a, w, idx)
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(stats, [tail, 1.0 - tail])
    return float(lo), float(hi)


def grouped_ec_curve(p_tilde, z, adjusted, window, groups, weights=None, level=0.9,
                     draws=DEFAULT_DRAWS, seed=0):
    """EC with a bootstrap interval for each group, in order of first appearance.

    Groups with fewer than two forecasts in the window are returned with NaN
    values rather than raising, since sparse windows are routine in real
    archives. Each group draws from its own seeded stream, so results for one
    group do not depend on the others.
    """
    groups = np.asarray(groups, dtype=object)
    p_tilde = np.asarray(p_tilde, dtype=float)
    z = np.asarray(z, dtype=float)
    adjusted = np.asarray(adjusted, dtype=float)
    w = None if weights is None else np.asarray(weights, dtype=float)
    keys = list(dict.fromkeys(groups.tolist()))
    out = []
    for key in keys:
        m = groups == key
        wm = None if w is None else w[m]
        zs, _, _ = _select(p_tilde[m], z[m], adjusted[m], wm, window)
        if zs.size < 2:
            log.warning("group %r has %d forecasts in the window; reported as missing", key, zs.size)
            out.append(EcPoint(key, float("nan"), float("nan"), float("nan"), int(zs.size)))
            continue
        group_seed = np.random.SeedSequence([int(seed), keys.index(key)])
        try:
            ec = empirical_ec(p_tilde[m], z[m], adjusted[m], window, wm)
            lo, hi = bootstrap_ci(p_tilde[m], z[m], adjusted[m], window, level, draws, group_seed, wm)
        except DomainError as exc:
            log.warning("group %r skipped: %s", key, exc)
            out.append(EcPoint(key, float("nan"), float("nan"), float("nan"), int(zs.size)))
            continue
        out.append(EcPoint(key, ec, lo, hi, int(zs.size)))
    return out


def records_to_arrays(records):
    """(p_tilde, z, weights, groups) arrays from a list of ForecastRecord."""
    p, z, w = _columns(records)
    return p, z, w, np.array([r.group for r in records], dtype=object)


def split_average_ec(p_tilde, z, window, n_splits=100, seed=0, config=None):
    """Average EC of adjusted forecasts over random half splits.

    Each split fits the adjustment on one half (outcomes included) and
    evaluates it on the other half. Returns (mean EC, per-split values);
    splits whose evaluation half misses the window are skipped.
    """
    from .estimator import adjust_array, fit

    p_tilde = np.asarray(p_tilde, dtype=float)
    z = np.asarray(z, dtype=float)
    rng = np.random.default_rng(seed)
    vals = []
    for s in range(n_splits):
        perm = rng.permutation(p_tilde.size)
        a, b = perm[: p_tilde.size // 2], perm[p_tilde.size // 2:]
        cfg = config.with_cv_seed(s) if config is not None else None
        model = fit(p_tilde[a], cfg, z=z[a])
        try:
            vals.append(empirical_ec(p_tilde[b], z[b], adjust_array(model, p_tilde[b]), window))
        except InsufficientDataError:
            continue
    if not vals:
        raise InsufficientDataError("no split had forecasts in the window")
    return float(np.mean(vals)), vals

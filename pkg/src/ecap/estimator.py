"""The adjustment pipeline: flip, fit the score spline, form conditional
moments, apply the loss-minimising rule and select the noise level (and bias
parameter) from a grid.
"""
import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import (THETA_MAX, THETA_MIN, ConditionalMoments, check_probability, flip_array,
                   oracle_adjust, unflip_array)
from .errors import ConfigurationError, DomainError, InsufficientDataError
from .spline import DEFAULT_MAX_KNOTS, CvConfig, ScoreSplineFit, SplineBasis, fit_score

DEFAULT_GAMMA_GRID = tuple(np.logspace(-4, -1, 30))
DEFAULT_THETA_GRID = tuple(np.round(np.linspace(THETA_MIN, THETA_MAX, 61), 10))
DEFAULT_VAR_FLOOR = 1e-12
DEFAULT_EPS_LIK = 1e-6
MIN_SAMPLES = 20
SCHEMA_VERSION = 1
MLE_MODES = ("in_sample", "split")


@dataclass(frozen=True)
class MixtureSpec:
    """Scale mixture of the noise model: weights ``w_k`` and mean scales ``c_k``.

    Both ``sum(w)`` and ``sum(w * c)`` must equal 1.
    """

    weights: tuple
    scales: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        c = tuple(float(v) for v in self.scales)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "scales", c)
        if len(w) == 0 or len(w) != len(c):
            raise ConfigurationError("mixture needs equally many weights and scales")
        if min(w) <= 0 or min(c) <= 0:
            raise ConfigurationError("mixture weights and scales must be positive")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights must sum to 1")
        if abs(math.fsum(a * b for a, b in zip(w, c)) - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights times scales must sum to 1")

    @property
    def inv_first(self):
        """``sum(w / c)``"""
        return math.fsum(a / b for a, b in zip(self.weights, self.scales))

    @property
    def inv_second(self):
        """``sum(w / c^2)``"""
        return math.fsum(a / (b * b) for a, b in zip(self.weights, self.scales))

    def to_dict(self):
        return {"weights": list(self.weights), "scales": list(self.scales)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["weights"]), tuple(d["scales"]))


@dataclass(frozen=True)
class VarianceFloor:
    """Lower bound applied to estimated conditional variances.

    ``kind="absolute"`` uses ``eps``. ``kind="theoretical"`` uses
    ``c * sqrt(r_n * s_n)`` with ``r_n = n^(-4/7)/lam + n^(-2/7) + lam`` and
    ``s_n = 1 + n^(-4/7)/lam^2``, which shrinks to zero slowly as n grows.
    """

    kind: str = "absolute"
    eps: float = DEFAULT_VAR_FLOOR
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in ("absolute", "theoretical"):
            raise ConfigurationError(f"unknown variance floor kind {self.kind!r}")
        if not self.eps >= 0 or not self.c > 0:
            raise ConfigurationError("variance floor needs eps >= 0 and c > 0")

    def value(self, n, lam):
        if self.kind == "absolute":
            return float(self.eps)
        a = n ** (-4.0 / 7.0)
        r = a / lam + n ** (-2.0 / 7.0) + lam
        s = 1.0 + a / lam ** 2
        return max(float(self.eps), self.c * math.sqrt(r * s))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EcapConfig:
    """Everything that controls a fit.

    A singleton ``theta_grid`` of ``(0.0,)`` switches bias correction off;
    ``mixture=None`` switches the mixture extension off. ``mle_mode="split"``
    picks (gamma, theta) on a random half of the data using a spline fitted
    on the other half.
    """

    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    theta_grid: tuple = DEFAULT_THETA_GRID
    cv: CvConfig = field(default_factory=CvConfig)
    variance_floor: VarianceFloor = field(default_factory=VarianceFloor)
    eps_lik: float = DEFAULT_EPS_LIK
    mixture: MixtureSpec = None
    max_knots: int = DEFAULT_MAX_KNOTS
    mle_mode: str = "in_sample"
    split_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gamma_grid", tuple(float(v) for v in self.gamma_grid))
        object.__setattr__(self, "theta_grid", tuple(float(v) for v in self.theta_grid))
        if not self.gamma_grid or min(self.gamma_grid) <= 0:
            raise ConfigurationError("gamma_grid must be non-empty and positive")
        if not self.theta_grid or min(self.theta_grid) < THETA_MIN or max(self.theta_grid) > THETA_MAX:
            raise ConfigurationError(f"theta_grid must be non-empty within [{THETA_MIN}, {THETA_MAX}]")
        if not 0.0 < self.eps_lik <= 0.01:
            raise ConfigurationError("eps_lik must lie in (0, 0.01]")
        if self.mle_mode not in MLE_MODES:
            raise ConfigurationError(f"mle_mode must be one of {MLE_MODES}")
        if self.max_knots < 4:
            raise ConfigurationError("max_knots must be at least 4")

    @property
    def trivial_grid(self):
        return len(self.gamma_grid) == 1 and len(self.theta_grid) == 1

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_cv_seed(self, seed):
        return self.replace(cv=dataclasses.replace(self.cv, rng_seed=int(seed)))

    def to_dict(self):
        return {
            "gamma_grid": list(self.gamma_grid),
            "theta_grid": list(self.theta_grid),
            "cv": {"num_folds": self.cv.num_folds, "lambda_grid": list(self.cv.lambda_grid),
                   "rng_seed": self.cv.rng_seed, "rule": self.cv.rule},
            "variance_floor": self.variance_floor.to_dict(),
            "eps_lik": self.eps_lik,
            "mixture": self.mixture.to_dict() if self.mixture else None,
            "max_knots": self.max_knots,
            "mle_mode": self.mle_mode,
            "split_seed": self.split_seed,
        }

    @classmethod
    def from_dict(cls, d):
        """Build from a (possibly partial) dict; missing keys keep their defaults."""
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        try:
            if "cv" in d:
                d["cv"] = CvConfig(**d["cv"])
            if "variance_floor" in d:
                d["variance_floor"] = VarianceFloor(**d["variance_floor"])
            if d.get("mixture") is not None:
                d["mixture"] = MixtureSpec.from_dict(d["mixture"])
            return cls(**d)
        except (TypeError, KeyError, DomainError) as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc


@dataclass(frozen=True)
class AdjustedProbability:
    """One adjusted probability. ``mu_hat`` and ``sigma2_hat`` are on the flipped scale."""

    p_tilde: float
    p_hat: float
    mu_hat: float
    sigma2_hat: float
    flipped: bool

    def __post_init__(self):
        if self.sigma2_hat < 0:
            raise DomainError("sigma2_hat must be non-negative")
        if not self.flipped and self.p_hat > 0.5:
            raise DomainError("unflipped estimate must not exceed 0.5")
        if self.flipped and self.p_hat < 0.5:
            raise DomainError("flipped estimate must not fall below 0.5")


@dataclass(frozen=True)
class EcapModel:
    """A fitted adjustment: score spline plus the selected gamma and theta."""

    spline: ScoreSplineFit
    gamma_hat: float
    theta_hat: float
    config: EcapConfig
    var_floor: float = DEFAULT_VAR_FLOOR
    n_train: int = 0
    selection: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def mixture(self):
        return self.config.mixture

    def to_dict(self):
        from . import __version__

        return {
            "schema_version": SCHEMA_VERSION,
            "library_version": __version__,
            "knots": self.spline.basis.knots.tolist(),
            "eta": self.spline.eta.tolist(),
            "lambda": self.spline.lam,
            "gamma_hat": self.gamma_hat,
            "theta_hat": self.theta_hat,
            "var_floor": self.var_floor,
            "n_train": self.n_train,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported model schema version {version!r}")
        try:
            basis = SplineBasis(d["knots"])
            eta = np.asarray(d["eta"], dtype=float)
            if eta.shape != (basis.dim,):
                raise ConfigurationError("coefficient vector does not match the knots")
            spline = ScoreSplineFit(basis=basis, eta=eta, lam=float(d["lambda"]))
            return cls(spline=spline, gamma_hat=float(d["gamma_hat"]), theta_hat=float(d["theta_hat"]),
                       config=EcapConfig.from_dict(d["config"]), var_floor=float(d["var_floor"]),
                       n_train=int(d.get("n_train", 0)))
        except (KeyError, TypeError, DomainError) as exc:
            raise ConfigurationError(f"invalid model file: {exc}") from exc


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)


def load_model(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"model file {path} is not valid JSON: {exc}") from exc
    return EcapModel.from_dict(d)


# --------------------------------------------------------------------------
# moments, one observation at a time
# --------------------------------------------------------------------------

def _finish(mean, var, var_floor, eps_lik):
    return ConditionalMoments(min(max(mean, eps_lik), 1.0 - eps_lik), max(var, var_floor))


def plug_in_moments(p_tilde_flipped, fit, gamma, var_floor=DEFAULT_VAR_FLOOR, eps_lik=DEFAULT_EPS_LIK):
    """Conditional mean and variance of p from the estimated score.

    ``mu = x + gamma (g(x) + 1 - 2x)`` and
    ``sigma2 = gamma x(1-x) + gamma^2 x(1-x)(g'(x) - 2)``; the variance is
    floored and the mean clamped into ``(eps_lik, 1 - eps_lik)``.

    ``fit`` is a ScoreSplineFit or a callable returning ``(g, g')``.
    """
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    x = float(p_tilde_flipped)
    if not 0.0 <= x <= 0.5:
        raise DomainError("expected a flipped value in [0, 0.5]")
    g, gp = fit.evaluate(x) if isinstance(fit, ScoreSplineFit) else fit(x)
    v = x * (1.0 - x)
    mu = x + gamma * (g + 1.0 - 2.0 * x)
    s2 = gamma * v + gamma * gamma * v * (gp - 2.0)
    # floor before clamping, to mirror the vectorised kernel
    s2 = max(s2, var_floor)
    return _finish(mu, s2, var_floor, eps_lik)


def bias_corrected_moments(moments, theta, var_floor=DEFAULT_VAR_FLOOR, eps_lik=DEFAULT_EPS_LIK):
    """Moments of ``p = h_theta(E(p_tilde | p))`` to second order in the noise."""
    if theta == 0.0:
        return moments
    mu, s2 = moments.mean, moments.variance
    mean = mu + 0.5 * theta * (3.0 * s2 - 6.0 * mu * s2 + 3.0 * mu * mu - mu - 2.0 * mu ** 3)
    w = mu * (1.0 - mu)
    var = (1.0 - 0.5 * theta) ** 2 * s2 + theta * s2 * (3.0 * w * (3.0 * theta * w - 0.5 * theta + 1.0))
    return _finish(mean, var, var_floor, eps_lik)


def mixture_moments(moments, spec, var_floor=DEFAULT_VAR_FLOOR, eps_lik=DEFAULT_EPS_LIK):
    """Moments under the scale mixture: the mean scales by ``sum(w/c)``."""
    mu, s2 = moments.mean, moments.variance
    a1, a2 = spec.inv_first, spec.inv_second
    var = (s2 + mu * mu) * a2 - mu * mu * a1 * a1
    return _finish(mu * a1, var, var_floor, eps_lik)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def _mixture_args(config):
    if config.mixture is None:
        return False, 1.0, 1.0
    return True, config.mixture.inv_first, config.mixture.inv_second


def _prepare(p_tilde):
    p = check_probability(np.asarray(p_tilde, dtype=float).ravel(), "p_tilde")
    if p.size < MIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_SAMPLES} probabilities, got {p.size}")
    return p


def _select(scores, gammas, thetas):
    """Index pair of the best (largest) score; ties go to smaller |theta|, then smaller gamma."""
    s = np.where(np.isnan(scores), -np.inf, scores)
    G, T = np.meshgrid(gammas, thetas, indexing="ij")
    order = np.lexsort((G.ravel(), np.abs(T).ravel()))
    flat = order[np.argmax(s.ravel()[order])]
    return np.unravel_index(flat, s.shape)


def _grid_search(x, target, spline, config, var_floor, mode):
    gammas = np.asarray(config.gamma_grid)
    thetas = np.asarray(config.theta_grid)
    g, gp = spline.evaluate(x)
    use_mix, a1, a2 = _mixture_args(config)
    raw = _kernels.grid_objective(np.ascontiguousarray(x), g, gp, np.ascontiguousarray(target), gammas,
                                  thetas, use_mix, a1, a2, var_floor, config.eps_lik, mode)
    scores = raw if mode == _kernels.MODE_LOGLIK else -raw
    i, j = _select(scores, gammas, thetas)
    return float(gammas[i]), float(thetas[j]), raw


def _fit_spline(x, config):
    return fit_score(x, config.cv, config.max_knots)


def fit(p_tilde, config=None, z=None, spline=None):
    """Fit the adjustment to observed probabilities.

    Parameters
    ----------
    p_tilde : array_like
        Observed probability estimates in [0, 1].
    config : EcapConfig, optional
    z : array_like of {0, 1}, optional
        Realised outcomes. Required unless both grids are singletons; used to
        pick (gamma, theta) by maximum likelihood.
    spline : ScoreSplineFit, optional
        Reuse an already fitted score spline instead of cross-validating a
        new one. The spline does not depend on gamma or theta.

    Returns
    -------
    EcapModel
    """
    config = config or EcapConfig()
    p = _prepare(p_tilde)
    x, mask = flip_array(p)
    if not config.trivial_grid and z is None:
        raise ConfigurationError("outcomes z are required to select gamma/theta from a grid")
    if spline is None:
        spline = _fit_spline(x, config)
    var_floor = config.variance_floor.value(p.size, spline.lam)
    if config.trivial_grid:
        return EcapModel(spline, config.gamma_grid[0], config.theta_grid[0], config, var_floor, p.size)

    z = np.asarray(z, dtype=float).ravel()
    if z.shape != p.shape or np.any((z != 0) & (z != 1)):
        raise ConfigurationError("z must be a 0/1 vector of the same length as p_tilde")
    zf = np.where(mask, 1.0 - z, z)
    if config.mle_mode == "split":
        perm = np.random.default_rng(config.split_seed).permutation(p.size)
        half_a, half_b = perm[: p.size // 2], perm[p.size // 2:]
        sel_spline = _fit_spline(x[half_a], config)
        gamma, theta, scores = _grid_search(x[half_b], zf[half_b], sel_spline, config, var_floor,
                                            _kernels.MODE_LOGLIK)
    else:
        gamma, theta, scores = _grid_search(x, zf, spline, config, var_floor, _kernels.MODE_LOGLIK)
    return EcapModel(spline, gamma, theta, config, var_floor, p.size, selection=scores)


def fit_opt(p_tilde, p_true, config=None, spline=None):
    """Oracle variant of :func:`fit` that picks (gamma, theta) to minimise the
    mean squared excess certainty against known true probabilities."""
    config = config or EcapConfig()
    if p_true is None:
        raise ConfigurationError("fit_opt needs the true probabilities")
    p = _prepare(p_tilde)
    pt = check_probability(np.asarray(p_true, dtype=float).ravel(), "p_true")
    if pt.shape != p.shape:
        raise ConfigurationError("p_true must match p_tilde in length")
    x, mask = flip_array(p)
    if spline is None:
        spline = _fit_spline(x, config)
    var_floor = config.variance_floor.value(p.size, spline.lam)
    if config.trivial_grid:
        return EcapModel(spline, config.gamma_grid[0], config.theta_grid[0], config, var_floor, p.size)
    target = np.where(mask, 1.0 - pt, pt)
    gamma, theta, scores = _grid_search(x, target, spline, config, var_floor, _kernels.MODE_EC2)
    return EcapModel(spline, gamma, theta, config, var_floor, p.size, selection=scores)


# --------------------------------------------------------------------------
# adjustment
# --------------------------------------------------------------------------

def adjust_detail(model, p_tilde):
    """Vectorised adjustment. Returns (p_hat, mu_hat, sigma2_hat, flipped) arrays."""
    p = check_probability(np.atleast_1d(np.asarray(p_tilde, dtype=float)), "p_tilde")
    x, mask = flip_array(p)
    g, gp = model.spline.evaluate(x)
    use_mix, a1, a2 = _mixture_args(model.config)
    p_hat, mu, s2 = _kernels.adjust_flipped(np.ascontiguousarray(x), g, gp, model.gamma_hat, model.theta_hat,
                                            use_mix, a1, a2, model.var_floor, model.config.eps_lik)
    return unflip_array(p_hat, mask), mu, s2, mask


def adjust_array(model, p_tilde):
    return adjust_detail(model, p_tilde)[0]


def adjust(model, p_tilde):
    """Adjust a single probability and return the full record."""
    p = check_probability(p_tilde, "p_tilde")
    x = min(p, 1.0 - p)
    cfg = model.config
    m = plug_in_moments(x, model.spline, model.gamma_hat, model.var_floor, cfg.eps_lik)
    m = bias_corrected_moments(m, model.theta_hat, model.var_floor, cfg.eps_lik)
    if cfg.mixture is not None:
        m = mixture_moments(m, cfg.mixture, model.var_floor, cfg.eps_lik)
    p_hat = oracle_adjust(m, side_le_half=True)
    flipped = p > 0.5
    return AdjustedProbability(p_tilde=p, p_hat=1.0 - p_hat if flipped else p_hat,
                               mu_hat=m.mean, sigma2_hat=m.variance, flipped=flipped)

"""Synthetic studies: data generation, the James-Stein baseline, the
train/test comparison harness, and a quadrature reference for the true
score function and conditional moments.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, special, stats

from .core import check_theta, flip_array, h_theta, h_theta_inverse, h_theta_prime, unflip_array
from .errors import ConfigurationError, DomainError, NumericError

log = logging.getLogger(__name__)

METHODS = ("Unadjusted", "ECAP-Opt", "ECAP-MLE", "JS-Opt", "JS-MLE")
DEFAULT_C_GRID = tuple(np.linspace(0.0, 1.0, 101))
# what the prior draw represents when the estimates are biased: the centre
# m = E(p_tilde | p), with p = h(m), or the true probability p, with m = h^{-1}(p)
PRIOR_TARGETS = ("mean", "truth")


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Beta prior, or an equal mixture of two betas when ``a2``/``b2`` are set."""

    a: float
    b: float
    a2: float = None
    b2: float = None

    def __post_init__(self):
        shapes = [self.a, self.b] + ([self.a2, self.b2] if self.is_mixture else [])
        if (self.a2 is None) != (self.b2 is None):
            raise DomainError("mixture prior needs both a2 and b2")
        if any(s is None or not s > 0 for s in shapes):
            raise DomainError("beta shape parameters must be positive")

    @property
    def is_mixture(self):
        return self.a2 is not None

    @property
    def kind(self):
        return "mixture" if self.is_mixture else "beta"

    @classmethod
    def beta(cls, a, b):
        return cls(a, b)

    @classmethod
    def mixture(cls, a1, b1, a2, b2):
        return cls(a1, b1, a2, b2)

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind", "beta")
        if kind == "beta":
            return cls(float(d["a"]), float(d["b"]))
        if kind == "mixture":
            return cls(float(d["a"]), float(d["b"]), float(d["a2"]), float(d["b2"]))
        raise ConfigurationError(f"unknown prior kind {kind!r}")

    def to_dict(self):
        d = {"kind": self.kind, "a": self.a, "b": self.b}
        if self.is_mixture:
            d.update(a2=self.a2, b2=self.b2)
        return d

    def logpdf(self, p):
        lp = stats.beta.logpdf(p, self.a, self.b)
        if self.is_mixture:
            lp = np.logaddexp(lp, stats.beta.logpdf(p, self.a2, self.b2)) - math.log(2.0)
        return lp

    def scalar_logpdf(self, p):
        lp = _beta_logpdf(p, self.a, self.b)
        if self.is_mixture:
            lp2 = _beta_logpdf(p, self.a2, self.b2)
            hi = max(lp, lp2)
            lp = hi + math.log(0.5 * (math.exp(lp - hi) + math.exp(lp2 - hi)))
        return lp

    def pdf(self, p):
        return np.exp(self.logpdf(p))

    def cdf(self, p):
        c = stats.beta.cdf(p, self.a, self.b)
        if self.is_mixture:
            c = 0.5 * (c + stats.beta.cdf(p, self.a2, self.b2))
        return c

    def sample(self, rng, n):
        if not self.is_mixture:
            return rng.beta(self.a, self.b, n)
        first = rng.random(n) < 0.5
        return np.where(first, rng.beta(self.a, self.b, n), rng.beta(self.a2, self.b2, n))

    @property
    def symmetric(self):
        if self.is_mixture:
            return (self.a2, self.b2) == (self.b, self.a) or (self.a == self.b and self.a2 == self.b2)
        return self.a == self.b


# --------------------------------------------------------------------------
# quadrature reference
# --------------------------------------------------------------------------

def _beta_logpdf(x, a, b):
    return (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - (
        math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


def _posterior_integrals(prior, gamma_star, x, funcs, theta=0.0):
    """Integrals of ``func(p) * f(x | p) * prior(p)`` over p, for each func.

    With ``theta != 0`` the observation is centred at ``m = h_theta^{-1}(p)``;
    integration then runs over m with the change of variables p = h(m).
    All integrals share one log-scale shift, so only ratios are meaningful.
    """
    if not 0.0 < x < 1.0:
        raise DomainError("p_tilde must lie in (0, 1)")
    lx, l1x = math.log(x), math.log1p(-x)
    prior_lp = prior.scalar_logpdf

    def log_kernel(m):
        p = h_theta(m, theta) if theta else m
        if not 0.0 < p < 1.0:
            return -math.inf
        lp = prior_lp(p)
        if theta:
            lp += math.log(h_theta_prime(m, theta))
        a, b = m / gamma_star, (1.0 - m) / gamma_star
        return (a - 1.0) * lx + (b - 1.0) * l1x - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)) + lp

    # locate the peak (vectorised) to anchor the log shift and the breakpoints
    grid = np.linspace(1e-6, 1 - 1e-6, 4001)
    pg = h_theta(grid, theta) if theta else grid
    lk = ((grid / gamma_star - 1.0) * lx + ((1.0 - grid) / gamma_star - 1.0) * l1x
          - special.betaln(grid / gamma_star, (1.0 - grid) / gamma_star)
          + prior.logpdf(np.clip(pg, 1e-300, 1 - 1e-16)))
    if theta:
        lk = lk + np.log(h_theta_prime(grid, theta))
    k = int(np.nanargmax(lk))
    shift = max(lk[k], log_kernel(grid[k]))
    width = math.sqrt(gamma_star * max(x * (1.0 - x), 1e-12))
    pts = sorted({min(max(grid[k] + d * width, 1e-9), 1 - 1e-9) for d in (-8, -3, -1, 0, 1, 3, 8)})

    out = []
    for func in funcs:
        def integrand(m):
            lk_m = log_kernel(m)
            if lk_m == -math.inf:
                return 0.0
            p = h_theta(m, theta) if theta else m
            return func(p, m) * math.exp(lk_m - shift)

        val, err = integrate.quad(integrand, 0.0, 1.0, points=pts, limit=400,
                                  epsabs=0.0, epsrel=1e-10)
        if not np.isfinite(val):
            raise NumericError(f"quadrature failed at p_tilde={x}")
        out.append(val)
    return out


def true_score_numeric(prior, gamma_star, p_tilde, step=1e-5):
    """Reference score g*(x) = x(1 - x) f'(x)/f(x) of the marginal density.

    f and f' are integrated over the prior by adaptive quadrature (f' by
    differentiating the beta density under the integral); the derivative of
    g* is a central difference with the given step.
    """
    def g_at(x):
        def dlog(p, m):
            a, b = p / gamma_star, (1.0 - p) / gamma_star
            return (a - 1.0) / x - (b - 1.0) / (1.0 - x)

        f, fp = _posterior_integrals(prior, gamma_star, x, [lambda p, m: 1.0, dlog])
        if not f > 0:
            raise NumericError(f"marginal density vanished at p_tilde={x}")
        return x * (1.0 - x) * fp / f

    x = float(p_tilde)
    h = min(step, 0.5 * x, 0.5 * (1.0 - x))
    return g_at(x), (g_at(x + h) - g_at(x - h)) / (2.0 * h)


def posterior_moments(prior, gamma_star, p_tilde, theta=0.0):
    """Exact E(p | p_tilde) and Var(p | p_tilde) under the (biased) beta model."""
    x = float(p_tilde)
    f, m1, m2 = _posterior_integrals(
        prior, gamma_star, x,
        [lambda p, m: 1.0, lambda p, m: p, lambda p, m: p * p], theta=theta)
    mean = m1 / f
    return mean, max(m2 / f - mean * mean, 0.0)


def tabulate(fn, xs):
    """Evaluate a scalar reference function on a grid; returns an array per output."""
    vals = np.array([fn(x) for x in xs], dtype=float)
    return vals.T


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    prior: PriorSpec
    gamma_star: float
    q: float = 0.0
    theta_star: float = 0.0
    n: int = 1000
    replicates: int = 100
    rng_seed: int = 0
    methods: tuple = METHODS
    estimate_theta: bool = False
    n_test: int = None
    prior_on: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.prior_on not in PRIOR_TARGETS:
            raise ConfigurationError(f"prior_on must be one of {PRIOR_TARGETS}")
        if not self.gamma_star > 0:
            raise ConfigurationError("gamma_star must be positive")
        if self.q < 0:
            raise ConfigurationError("q must be non-negative")
        try:
            check_theta(self.theta_star)
        except DomainError as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.n < 20:
            raise ConfigurationError("n must be at least 20")
        if self.replicates < 1:
            raise ConfigurationError("replicates must be at least 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigurationError(f"unknown methods {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            d["prior"] = PriorSpec.from_dict(d["prior"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"invalid experiment spec: {exc}") from exc

    def to_dict(self):
        d = asdict(self)
        d["prior"] = self.prior.to_dict()
        d["methods"] = list(self.methods)
        return d


@dataclass
class Dataset:
    p: np.ndarray
    p_tilde: np.ndarray
    z: np.ndarray


def _replicate_rng(seed, replicate_index, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate_index), int(stream)]))


def draw_dataset(spec, replicate_index, stream=0, n=None):
    """Draw (p, p_tilde, Z) for one replicate.

    ``stream`` separates independent draws within a replicate (0 = train,
    1 = test). With ``prior_on="mean"`` the prior draw is the centre
    m = E(p_tilde | p) and p = h(m); with ``prior_on="truth"`` it is p and
    m = h^{-1}(p). The two coincide when theta_star is 0. The beta
    deviation is scaled by min(m, 1 - m)^q, which keeps estimates from
    collapsing onto either boundary, and the result is clipped into [0, 1].
    """
    rng = _replicate_rng(spec.rng_seed, replicate_index, stream)
    n = spec.n if n is None else n
    draw = spec.prior.sample(rng, n)
    if spec.theta_star == 0:
        p = m = draw
    elif spec.prior_on == "mean":
        m, p = draw, h_theta(draw, spec.theta_star)
    else:
        p, m = draw, h_theta_inverse(draw, spec.theta_star)
    g = spec.gamma_star
    raw = rng.beta(m / g, (1.0 - m) / g)
    # damping by the distance to the nearer boundary keeps both tails symmetric
    p_tilde = m + np.minimum(m, 1.0 - m) ** spec.q * (raw - m) if spec.q else raw
    p_tilde = np.clip(p_tilde, 0.0, 1.0)
    z = (rng.random(n) < p).astype(float)
    return Dataset(p=p, p_tilde=p_tilde, z=z)


def james_stein_adjust(values, c):
    """Shrink flipped values toward their mean by a factor (1 - c), then unflip."""
    if not 0.0 <= c <= 1.0:
        raise DomainError("c must lie in [0, 1]")
    x, mask = flip_array(values)
    xbar = x.mean()
    return unflip_array(xbar + (1.0 - c) * (x - xbar), mask)


def mean_squared_ec(p_true, p_hat):
    """Mean of EC(p_hat)^2; infinite when some p_hat sits exactly on 0 or 1."""
    p_true = np.asarray(p_true, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ec = (p_true - p_hat) / np.minimum(p_hat, 1.0 - p_hat)
        ec = np.where(p_true == p_hat, 0.0, ec)
        return float(np.mean(ec ** 2))


def log_likelihood(z, p_hat, eps=1e-6):
    pc = np.clip(p_hat, eps, 1.0 - eps)
    return float(np.sum(z * np.log(pc) + (1.0 - z) * np.log1p(-pc)))


def tune_js(values, mode, c_grid=DEFAULT_C_GRID, p_true=None, z=None, eps_lik=1e-6):
    """Pick the shrinkage weight c by true loss ("opt") or outcome likelihood ("mle").

    Ties go to the smaller c.
    """
    c_grid = np.asarray(c_grid, dtype=float)
    if mode == "opt":
        if p_true is None:
            raise ConfigurationError("JS opt tuning needs the true probabilities")
        scores = np.array([mean_squared_ec(p_true, james_stein_adjust(values, c)) for c in c_grid])
    elif mode == "mle":
        if z is None:
            raise ConfigurationError("JS mle tuning needs observed outcomes")
        scores = np.array([-log_likelihood(z, james_stein_adjust(values, c), eps_lik) for c in c_grid])
    else:
        raise ConfigurationError(f"unknown tuning mode {mode!r}")
    scores = np.where(np.isnan(scores), np.inf, scores)
    order = np.argsort(c_grid, kind="stable")
    return float(c_grid[order[np.argmin(scores[order])]])


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    mean: dict
    se: dict
    replicates: list = field(default_factory=list)

    def rows(self):
        out = []
        for method in self.spec.methods:
            out.append({
                "method": method,
                "mean_ec2": self.mean.get(method, float("nan")),
                "se": self.se.get(method),
                "replicates": sum(1 for r in self.replicates if method in r["loss"]),
            })
        return out


def _ecap_config(spec, base=None):
    from .estimator import EcapConfig, DEFAULT_THETA_GRID

    base = base or EcapConfig()
    theta_grid = DEFAULT_THETA_GRID if spec.estimate_theta else (0.0,)
    return base.replace(theta_grid=theta_grid)


def run_replicate(spec, r, ecap_config=None, c_grid=DEFAULT_C_GRID):
    """Fit every requested method on a training draw and score it on a test draw."""
    from .estimator import adjust_array, fit, fit_opt

    train = draw_dataset(spec, r, stream=0)
    test = draw_dataset(spec, r, stream=1, n=spec.n_test or spec.n)
    cfg = _ecap_config(spec, ecap_config)
    cfg = cfg.with_cv_seed(np.random.SeedSequence([spec.rng_seed, r, 2]).generate_state(1)[0])
    record = {"replicate": r, "loss": {}, "params": {}, "errors": {}}
    needs_ecap = {"ECAP-Opt", "ECAP-MLE"} & set(spec.methods)
    base_model = None
    for method in spec.methods:
        try:
            if method == "Unadjusted":
                p_hat = test.p_tilde
            elif method in ("JS-Opt", "JS-MLE"):
                if method == "JS-Opt":
                    c = tune_js(train.p_tilde, "opt", c_grid, p_true=train.p)
                else:
                    c = tune_js(train.p_tilde, "mle", c_grid, z=train.z, eps_lik=cfg.eps_lik)
                record["params"][method] = {"c": c}
                p_hat = james_stein_adjust(test.p_tilde, c)
            else:
                if base_model is None and needs_ecap:
                    base_model = fit(train.p_tilde, cfg.replace(gamma_grid=cfg.gamma_grid[:1],
                                                              theta_grid=(0.0,)))
                if method == "ECAP-Opt":
                    model = fit_opt(train.p_tilde, train.p, cfg, spline=base_model.spline)
                else:
                    model = fit(train.p_tilde, cfg, z=train.z, spline=base_model.spline)
                record["params"][method] = {"gamma": model.gamma_hat, "theta": model.theta_hat,
                                            "lambda": model.spline.lam}
                p_hat = adjust_array(model, test.p_tilde)
            record["loss"][method] = mean_squared_ec(test.p, p_hat)
        except Exception as exc:  # one failed method must not sink the sweep
            log.warning("replicate %d, %s failed: %s", r, method, exc)
            record["errors"][method] = f"{type(exc).__name__}: {exc}"
    return record


def run_experiment(spec, ecap_config=None, c_grid=DEFAULT_C_GRID, n_jobs=1):
    """Run all replicates and aggregate mean loss and its standard error per method."""
    if n_jobs == 1:
        records = [run_replicate(spec, r, ecap_config, c_grid) for r in range(spec.replicates)]
    else:
        from joblib import Parallel, delayed

        records = Parallel(n_jobs=n_jobs)(
            delayed(run_replicate)(spec, r, ecap_config, c_grid) for r in range(spec.replicates))
    mean, se = {}, {}
    for method in spec.methods:
        vals = np.array([rec["loss"][method] for rec in records if method in rec["loss"]])
        if vals.size == 0:
            continue
        mean[method] = float(vals.mean())
        se[method] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else None
    return ExperimentResult(spec=spec, mean=mean, se=se, replicates=records)

"""Penalised natural-cubic-spline estimate of the scaled score function.

The score function g(x) = x (1 - x) d/dx log f(x) of the observed
probabilities is estimated on the flipped scale [0, 0.5] by minimising

    (1/n) sum g(x_i)^2 + (2/n) sum [g(x_i)(1 - 2 x_i) + x_i (1 - x_i) g'(x_i)]
        + lam * int g''(x)^2 dx

over natural cubic splines with g(0.5) = 0. The first two terms are an
unbiased (up to a constant) estimate of E[g - g*]^2, so no density estimate
is ever divided by.

Basis: the constrained point 0.5 is appended as the right boundary knot and
each basis function is the natural cubic spline interpolating a unit vector
on one of the data knots (and 0 on the others, including 0.5). Coefficients
are therefore the values of g at the data knots.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import DomainError, InsufficientDataError, NumericError

CENTER = 0.5
DEFAULT_MAX_KNOTS = 400
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-6, 2, 40))
DEFAULT_NUM_FOLDS = 10
# knots closer than this fraction of the knot span are merged; near-duplicate
# knots make the value-parametrised system numerically singular
DEFAULT_MIN_GAP = 1e-3
CV_RULES = ("one_se", "min")


class SplineBasis:
    """Natural cubic spline basis on the data knots, vanishing at 0.5.

    Parameters
    ----------
    knots : array_like
        Strictly increasing data knots in [0, 0.5]. A knot at 0.5 is allowed
        and simply merges with the constrained point.
    """

    def __init__(self, knots):
        knots = np.asarray(knots, dtype=float)
        if knots.ndim != 1 or knots.size < 1:
            raise DomainError("knots must be a non-empty 1-d array")
        if np.any(np.diff(knots) <= 0):
            raise DomainError("knots must be strictly increasing")
        if knots[0] < 0.0 or knots[-1] > CENTER:
            raise DomainError("knots must lie in [0, 0.5]")
        self.knots = knots
        self.center = CENTER
        t = knots if knots[-1] == CENTER else np.append(knots, CENTER)
        if t.size < 2:
            raise DomainError("need at least one knot below 0.5")
        self.t = t
        self.S = _cardinal_second_derivatives(t)

    @property
    def dim(self):
        return self.t.size - 1

    def __repr__(self):
        return f"SplineBasis(dim={self.dim}, range=[{self.t[0]:.4g}, {self.t[-1]:.4g}])"

    def design(self, x):
        """Basis values and first derivatives at ``x``, each of shape (len(x), dim)."""
        x = np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))
        return _kernels.design_rows(x, self.t, self.S)

    def second_derivative(self, x):
        """Basis second derivatives at ``x``; zero outside the knot range."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        t, S = self.t, self.S
        idx = np.clip(np.searchsorted(t, x, side="right") - 1, 0, t.size - 2)
        h = t[idx + 1] - t[idx]
        b = (x - t[idx]) / h
        out = (1.0 - b)[:, None] * S[idx] + b[:, None] * S[idx + 1]
        out[(x < t[0]) | (x > t[-1])] = 0.0
        return out

    def _segment_factor(self):
        """Cholesky factor of the tridiagonal Gram matrix of hat functions.

        Second derivatives are linear between knots, so each segment
        contributes h/3 (M_i^2 + M_i M_{i+1} + M_{i+1}^2) to the roughness.
        """
        h = np.diff(self.t)
        ab = np.zeros((2, self.t.size))
        ab[0, :-1] += h / 3.0
        ab[0, 1:] += h / 3.0
        ab[1, :-1] = h / 6.0
        return linalg.cholesky_banded(ab, lower=True)

    def penalty_root(self):
        """``W`` with ``W^T W`` equal to the roughness matrix."""
        L = self._segment_factor()
        # W = L^T S with L lower bidiagonal
        W = L[0][:, None] * self.S
        W[:-1] += L[1][:-1, None] * self.S[1:]
        return W

    def penalty(self):
        """Exact roughness matrix ``int b''(x) b''(x)^T dx``, built as W^T W so it is PSD."""
        W = self.penalty_root()
        return W.T @ W

    def null_vector(self):
        """Coefficients of the linear function 0.5 - x, which has zero roughness."""
        return CENTER - self.t[:-1]

    def roughness(self, eta):
        """``int g''(x)^2 dx`` for coefficients ``eta``; never negative."""
        M = self.S @ eta
        h = np.diff(self.t)
        return float(np.sum(h / 3.0 * (M[:-1] ** 2 + M[:-1] * M[1:] + M[1:] ** 2)))


def _cardinal_second_derivatives(t):
    """Second derivatives at the knots of the natural splines interpolating unit vectors.

    Column j belongs to the spline equal to 1 at t[j] and 0 at the other
    knots; the last knot (the constrained point) gets no column.
    """
    m1 = t.size
    S_full = np.zeros((m1, m1))
    if m1 > 2:
        h = np.diff(t)
        k = m1 - 2
        ab = np.zeros((3, k))
        ab[0, 1:] = h[1:-1]
        ab[1, :] = 2.0 * (h[:-1] + h[1:])
        ab[2, :-1] = h[1:-1]
        rhs = np.zeros((k, m1))
        rows = np.arange(k)
        rhs[rows, rows] = 6.0 / h[:-1]
        rhs[rows, rows + 1] = -6.0 / h[:-1] - 6.0 / h[1:]
        rhs[rows, rows + 2] = 6.0 / h[1:]
        S_full[1:-1] = linalg.solve_banded((1, 1), ab, rhs)
    return np.ascontiguousarray(S_full[:, :-1])


def _merge_close(knots, gap):
    """Greedy left-to-right thinning so consecutive knots are at least ``gap`` apart.

    Both end knots are kept.
    """
    if knots.size < 3 or gap <= 0:
        return knots
    keep = [knots[0]]
    for v in knots[1:-1]:
        if v - keep[-1] >= gap:
            keep.append(v)
    if len(keep) > 1 and knots[-1] - keep[-1] < gap:
        keep.pop()
    keep.append(knots[-1])
    return np.asarray(keep)


def build_basis(flipped_values, max_knots=DEFAULT_MAX_KNOTS, min_gap=DEFAULT_MIN_GAP):
    """Basis with knots at the distinct flipped values.

    More than ``max_knots`` distinct values are replaced by that many
    quantiles; knots closer than ``min_gap`` times the knot span are merged.
    """
    x = np.asarray(flipped_values, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > CENTER):
        raise DomainError("flipped values must lie in [0, 0.5]")
    distinct = np.unique(x)
    if distinct.size < 4:
        raise InsufficientDataError(f"need at least 4 distinct values, got {distinct.size}")
    if max_knots < 4:
        raise DomainError("max_knots must be at least 4")
    if distinct.size > max_knots:
        knots = np.quantile(distinct, np.linspace(0.0, 1.0, max_knots))
        knots[0], knots[-1] = distinct[0], distinct[-1]
        knots = np.unique(knots)
    else:
        knots = distinct
    return SplineBasis(_merge_close(knots, min_gap * (knots[-1] - knots[0])))


@dataclass
class ScoreSplineFit:
    """Fitted score function: ``g(x) = b(x)^T eta`` on [0, 0.5], odd about 0.5."""

    basis: SplineBasis
    eta: np.ndarray
    lam: float
    risk_curve: list = field(default_factory=list)

    def evaluate(self, p_tilde):
        """Return (g, g') at ``p_tilde``; values above 0.5 use g(x) = -g(1 - x)."""
        p = np.asarray(p_tilde, dtype=float)
        scalar = p.ndim == 0
        p = np.atleast_1d(p)
        upper = p > CENTER
        x = np.where(upper, 1.0 - p, p)
        B, D = self.basis.design(x)
        g = B @ self.eta
        gp = D @ self.eta
        g = np.where(upper, -g, g)
        if scalar:
            return float(g[0]), float(gp[0])
        return g, gp

    def second_derivative(self, x):
        return self.basis.second_derivative(x) @ self.eta

    def roughness(self):
        """``int g''(x)^2 dx`` over [0, 0.5]."""
        return self.basis.roughness(self.eta)


def evaluate_g(fit, p_tilde):
    return fit.evaluate(p_tilde)


def _system(x, basis):
    B, D = basis.design(x)
    G = B.T @ B
    c = B.T @ (1.0 - 2.0 * x) + D.T @ (x * (1.0 - x))
    return G, c


def solve_penalized(G, c, omega, n, lam):
    """Solve ``(G + n lam omega) eta = -c`` by Cholesky, with ridge jitter on failure."""
    A = G + n * lam * omega
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=True, check_finite=False), -c)
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(A) / A.shape[0]
    try:
        A = A + jitter * np.eye(A.shape[0])
        return linalg.cho_solve(linalg.cho_factor(A, lower=True, check_finite=False), -c)
    except linalg.LinAlgError as exc:
        raise NumericError("penalised system is singular even after ridge jitter") from exc


class PenalizedSolver:
    """Closed-form minimiser of the penalised risk for many lambdas at once.

    Works in the basis that whitens G and diagonalises the penalty, so each
    lambda costs O(m^2) and the penalty's huge eigenvalues (it scales like
    the cube of the inverse knot spacing) never meet G in one matrix. The
    zero-roughness direction is the known linear function and is pinned to
    eigenvalue 0 exactly; otherwise its rounding-level eigenvalue, times a
    large n * lam, would shrink the linear part of the fit.
    Falls back to a direct solve when G is singular (fewer points than knots).
    """

    def __init__(self, G, c, basis):
        self.G, self.c, self.basis = G, c, basis
        try:
            R = linalg.cholesky(G, lower=False, check_finite=False)
        except linalg.LinAlgError:
            self.T = None
            return
        v = R @ basis.null_vector()
        v /= np.linalg.norm(v)
        Q, _ = np.linalg.qr(v[:, None], mode="complete")
        Q[:, 0] = v
        # C = W R^{-1}, restricted to the whitened complement of v
        C = linalg.solve_triangular(R, basis.penalty_root().T, trans="T", check_finite=False).T
        _, s, Vt = linalg.svd(C @ Q[:, 1:], full_matrices=False, check_finite=False)
        E = np.column_stack([v, Q[:, 1:] @ Vt.T])
        self.T = linalg.solve_triangular(R, E, check_finite=False)
        self.d = np.concatenate([[0.0], s * s])
        self.b = self.T.T @ c

    def solve(self, n, lam):
        if self.T is None:
            return solve_penalized(self.G, self.c, self.basis.penalty(), n, lam)
        return -self.T @ (self.b / (1.0 + n * lam * self.d))


def penalized_objective(eta, flipped_values, basis, lam):
    """The penalised criterion Q_n(eta); used by tests as an independent check."""
    x = np.asarray(flipped_values, dtype=float)
    B, D = basis.design(x)
    g = B @ eta
    gp = D @ eta
    risk = np.mean(g ** 2) + 2.0 * np.mean(g * (1.0 - 2.0 * x) + x * (1.0 - x) * gp)
    return float(risk + lam * eta @ basis.penalty() @ eta)


def fit_g(flipped_values, basis, lam):
    """Closed-form minimiser of the penalised risk for a fixed basis and ``lam``."""
    if not lam > 0:
        raise DomainError("lambda must be positive")
    x = np.asarray(flipped_values, dtype=float)
    G, c = _system(x, basis)
    eta = PenalizedSolver(G, c, basis).solve(x.size, lam)
    return ScoreSplineFit(basis=basis, eta=eta, lam=float(lam))


def empirical_risk(fit_or_fn, values):
    """Unbiased-up-to-a-constant estimate of E[g - g*]^2 on ``values``.

    ``fit_or_fn`` is a ScoreSplineFit or a callable returning ``(g, g')``
    arrays for an array argument.
    """
    x = np.asarray(values, dtype=float)
    if isinstance(fit_or_fn, ScoreSplineFit):
        g, gp = fit_or_fn.evaluate(x)
    else:
        g, gp = fit_or_fn(x)
    g = np.broadcast_to(np.asarray(g, dtype=float), x.shape)
    gp = np.broadcast_to(np.asarray(gp, dtype=float), x.shape)
    return float(np.mean(g ** 2) + 2.0 * np.mean(g * (1.0 - 2.0 * x) + x * (1.0 - x) * gp))


@dataclass(frozen=True)
class CvConfig:
    num_folds: int = DEFAULT_NUM_FOLDS
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    rng_seed: int = 0
    rule: str = "one_se"

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if self.rule not in CV_RULES:
            raise DomainError(f"rule must be one of {CV_RULES}")
        if self.num_folds < 2:
            raise DomainError("num_folds must be at least 2")
        if not self.lambda_grid or min(self.lambda_grid) <= 0:
            raise DomainError("lambda_grid must be non-empty and positive")
        if self.rng_seed < 0:
            raise DomainError("rng_seed must be non-negative")


def fold_indices(n, num_folds, seed):
    """Seeded shuffle split into ``num_folds`` contiguous blocks of near-equal size."""
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, num_folds)


def cross_validate_lambda(values, config=CvConfig(), basis=None, max_knots=DEFAULT_MAX_KNOTS):
    """K-fold cross-validated choice of the smoothing parameter.

    For each fold the spline is fit on the other folds and the risk is
    evaluated on the held-out points; the per-point held-out losses are
    pooled over folds and averaged. By default the basis is rebuilt from each
    training split; passing ``basis`` uses that one basis for every split.

    With ``rule="min"`` the minimiser of the pooled risk is returned. With
    ``rule="one_se"`` (default) it is the largest lambda whose risk is within
    one standard error of the minimum, the standard error being that of the
    mean held-out loss at the minimiser. At small lambda the held-out loss is
    unbiased but very noisy, and plain minimisation often lands there.

    Returns
    -------
    lambda_hat : float
        Ties go to the larger lambda.
    risk_curve : list of (lambda, risk)
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if config.num_folds > n:
        raise InsufficientDataError("more folds than observations")
    grid = np.asarray(config.lambda_grid)
    losses = np.empty((n, grid.size))
    for held in fold_indices(n, config.num_folds, config.rng_seed):
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        train, test = x[mask], x[held]
        if np.unique(train).size < 4:
            raise InsufficientDataError("a training split has fewer than 4 distinct values")
        b = basis if basis is not None else build_basis(train, max_knots)
        solver = PenalizedSolver(*_system(train, b), b)
        etas = np.column_stack([solver.solve(train.size, lam) for lam in grid])
        B, D = b.design(test)
        g, gp = B @ etas, D @ etas
        losses[held] = g * g + 2.0 * (g * (1.0 - 2.0 * test)[:, None] + (test * (1.0 - test))[:, None] * gp)
    risks = losses.mean(axis=0)
    # reversed argmin breaks ties toward the larger lambda
    order = np.argsort(grid)[::-1]
    best = order[np.argmin(risks[order])]
    if config.rule == "one_se":
        bound = risks[best] + losses[:, best].std(ddof=1) / np.sqrt(n)
        best = order[np.argmax(risks[order] <= bound)]
    return float(grid[best]), [(float(l), float(r)) for l, r in zip(grid, risks)]


def fit_score(flipped_values, config=CvConfig(), max_knots=DEFAULT_MAX_KNOTS):
    """Cross-validate lambda, then fit on all values with a basis built from all of them."""
    x = np.asarray(flipped_values, dtype=float)
    lam, curve = cross_validate_lambda(x, config, max_knots=max_knots)
    fit = fit_g(x, build_basis(x, max_knots), lam)
    fit.risk_curve = curve
    return fit

"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names at the bottom dispatch to the numba versions unless numba
is unavailable or ``ECAP_DISABLE_NUMBA`` is set. Both flavours are importable
directly (``*_numpy`` / ``*_numba``) so tests and the benchmark can compare
them.

Conventions: every kernel works on the flipped scale, i.e. on observed values
``x`` in [0, 0.5] with targets flipped alongside them.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

MODE_LOGLIK = 0
MODE_EC2 = 1


# --------------------------------------------------------------------------
# natural cubic spline design rows
# --------------------------------------------------------------------------

def _local_weights_numpy(x, t):
    n_seg = t.shape[0] - 1
    idx = np.clip(np.searchsorted(t, x, side="right") - 1, 0, n_seg - 1)
    t0 = t[idx]
    t1 = t[idx + 1]
    h = t1 - t0
    a = (t1 - x) / h
    b = (x - t0) / h
    wy0 = a.copy()
    wy1 = b.copy()
    wm0 = h * h / 6.0 * (a ** 3 - a)
    wm1 = h * h / 6.0 * (b ** 3 - b)
    dy0 = -1.0 / h
    dy1 = 1.0 / h
    dm0 = -h * (3.0 * a ** 2 - 1.0) / 6.0
    dm1 = h * (3.0 * b ** 2 - 1.0) / 6.0

    left = x < t[0]
    if np.any(left):
        dx = x[left] - t[0]
        hl = h[left]
        dy0[left] = -1.0 / hl
        dy1[left] = 1.0 / hl
        dm0[left] = -hl / 3.0
        dm1[left] = -hl / 6.0
        wy0[left] = 1.0 + dx * dy0[left]
        wy1[left] = dx * dy1[left]
        wm0[left] = dx * dm0[left]
        wm1[left] = dx * dm1[left]
    right = x > t[-1]
    if np.any(right):
        dx = x[right] - t[-1]
        hr = h[right]
        dy0[right] = -1.0 / hr
        dy1[right] = 1.0 / hr
        dm0[right] = hr / 6.0
        dm1[right] = hr / 3.0
        wy0[right] = dx * dy0[right]
        wy1[right] = 1.0 + dx * dy1[right]
        wm0[right] = dx * dm0[right]
        wm1[right] = dx * dm1[right]
    return idx, (wy0, wy1, wm0, wm1), (dy0, dy1, dm0, dm1)


def design_rows_numpy(x, t, S):
    """Values and first derivatives of every basis function at ``x``.

    ``t`` are the knots (last one is the constrained point), ``S`` holds the
    second derivatives of each basis function at each knot, shape
    ``(len(t), m)`` with ``m`` basis functions; basis function ``j``
    interpolates the unit vector on knot ``j``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    m = S.shape[1]
    idx, (wy0, wy1, wm0, wm1), (dy0, dy1, dm0, dm1) = _local_weights_numpy(x, t)
    S0 = S[idx]
    S1 = S[idx + 1]
    B = wm0[:, None] * S0 + wm1[:, None] * S1
    D = dm0[:, None] * S0 + dm1[:, None] * S1
    rows = np.arange(n)
    ok0 = idx < m
    ok1 = idx + 1 < m
    B[rows[ok0], idx[ok0]] += wy0[ok0]
    B[rows[ok1], idx[ok1] + 1] += wy1[ok1]
    D[rows[ok0], idx[ok0]] += dy0[ok0]
    D[rows[ok1], idx[ok1] + 1] += dy1[ok1]
    return B, D


@njit(cache=True)
def design_rows_numba(x, t, S):
    n = x.shape[0]
    n_seg = t.shape[0] - 1
    m = S.shape[1]
    B = np.zeros((n, m))
    D = np.zeros((n, m))
    for r in range(n):
        xr = x[r]
        i = np.searchsorted(t, xr, side="right") - 1
        if i < 0:
            i = 0
        elif i > n_seg - 1:
            i = n_seg - 1
        h = t[i + 1] - t[i]
        if xr < t[0]:
            dx = xr - t[0]
            dy0 = -1.0 / h
            dy1 = 1.0 / h
            dm0 = -h / 3.0
            dm1 = -h / 6.0
            wy0 = 1.0 + dx * dy0
            wy1 = dx * dy1
            wm0 = dx * dm0
            wm1 = dx * dm1
        elif xr > t[n_seg]:
            dx = xr - t[n_seg]
            dy0 = -1.0 / h
            dy1 = 1.0 / h
            dm0 = h / 6.0
            dm1 = h / 3.0
            wy0 = dx * dy0
            wy1 = 1.0 + dx * dy1
            wm0 = dx * dm0
            wm1 = dx * dm1
        else:
            a = (t[i + 1] - xr) / h
            b = (xr - t[i]) / h
            wy0 = a
            wy1 = b
            wm0 = h * h / 6.0 * (a * a * a - a)
            wm1 = h * h / 6.0 * (b * b * b - b)
            dy0 = -1.0 / h
            dy1 = 1.0 / h
            dm0 = -h * (3.0 * a * a - 1.0) / 6.0
            dm1 = h * (3.0 * b * b - 1.0) / 6.0
        for j in range(m):
            B[r, j] = wm0 * S[i, j] + wm1 * S[i + 1, j]
            D[r, j] = dm0 * S[i, j] + dm1 * S[i + 1, j]
        if i < m:
            B[r, i] += wy0
            D[r, i] += dy0
        if i + 1 < m:
            B[r, i + 1] += wy1
            D[r, i + 1] += dy1
    return B, D


# --------------------------------------------------------------------------
# plug-in moments -> bias correction -> mixture -> oracle
# --------------------------------------------------------------------------

def adjust_flipped_numpy(x, g, gp, gamma, theta, use_mix, a1, a2, var_floor, eps_lik):
    """ECAP estimate on the flipped scale. Returns (p_hat, mu_hat, sigma2_hat)."""
    v = x * (1.0 - x)
    mu = x + gamma * (g + 1.0 - 2.0 * x)
    s2 = gamma * v + gamma * gamma * v * (gp - 2.0)
    s2 = np.maximum(s2, var_floor)
    mu = np.clip(mu, eps_lik, 1.0 - eps_lik)
    if theta != 0.0:
        mu_b = mu + 0.5 * theta * (3.0 * s2 - 6.0 * mu * s2 + 3.0 * mu * mu - mu - 2.0 * mu * mu * mu)
        w = mu * (1.0 - mu)
        s2_b = (1.0 - 0.5 * theta) ** 2 * s2 + theta * s2 * (3.0 * w * (3.0 * theta * w - 0.5 * theta + 1.0))
        s2 = np.maximum(s2_b, var_floor)
        mu = np.clip(mu_b, eps_lik, 1.0 - eps_lik)
    if use_mix:
        s2 = np.maximum((s2 + mu * mu) * a2 - mu * mu * a1 * a1, var_floor)
        mu = np.clip(mu * a1, eps_lik, 1.0 - eps_lik)
    p_hat = np.minimum(mu + s2 / mu, 0.5)
    return p_hat, mu, s2


@njit(cache=True)
def _adjust_one(x, g, gp, gamma, theta, use_mix, a1, a2, var_floor, eps_lik):
    v = x * (1.0 - x)
    mu = x + gamma * (g + 1.0 - 2.0 * x)
    s2 = gamma * v + gamma * gamma * v * (gp - 2.0)
    if s2 < var_floor:
        s2 = var_floor
    if mu < eps_lik:
        mu = eps_lik
    elif mu > 1.0 - eps_lik:
        mu = 1.0 - eps_lik
    if theta != 0.0:
        mu_b = mu + 0.5 * theta * (3.0 * s2 - 6.0 * mu * s2 + 3.0 * mu * mu - mu - 2.0 * mu * mu * mu)
        w = mu * (1.0 - mu)
        s2_b = (1.0 - 0.5 * theta) ** 2 * s2 + theta * s2 * (3.0 * w * (3.0 * theta * w - 0.5 * theta + 1.0))
        s2 = s2_b if s2_b > var_floor else var_floor
        mu = mu_b
        if mu < eps_lik:
            mu = eps_lik
        elif mu > 1.0 - eps_lik:
            mu = 1.0 - eps_lik
    if use_mix:
        s2 = (s2 + mu * mu) * a2 - mu * mu * a1 * a1
        if s2 < var_floor:
            s2 = var_floor
        mu = mu * a1
        if mu < eps_lik:
            mu = eps_lik
        elif mu > 1.0 - eps_lik:
            mu = 1.0 - eps_lik
    p = mu + s2 / mu
    if p > 0.5:
        p = 0.5
    return p, mu, s2


@njit(cache=True)
def adjust_flipped_numba(x, g, gp, gamma, theta, use_mix, a1, a2, var_floor, eps_lik):
    n = x.shape[0]
    p_hat = np.empty(n)
    mu = np.empty(n)
    s2 = np.empty(n)
    for i in range(n):
        p_hat[i], mu[i], s2[i] = _adjust_one(x[i], g[i], gp[i], gamma, theta, use_mix,
                                             a1, a2, var_floor, eps_lik)
    return p_hat, mu, s2


def grid_objective_numpy(x, g, gp, target, gammas, thetas, use_mix, a1, a2, var_floor, eps_lik, mode):
    """Objective over the (gamma, theta) grid.

    ``mode`` MODE_LOGLIK: total Bernoulli log-likelihood of flipped outcomes
    ``target`` with p_hat clamped to [eps_lik, 1 - eps_lik].
    ``mode`` MODE_EC2: mean squared excess certainty against flipped true
    probabilities ``target``.
    """
    out = np.empty((len(gammas), len(thetas)))
    for a, gamma in enumerate(gammas):
        for b, theta in enumerate(thetas):
            p, _, _ = adjust_flipped_numpy(x, g, gp, gamma, theta, use_mix, a1, a2, var_floor, eps_lik)
            if mode == MODE_LOGLIK:
                pc = np.clip(p, eps_lik, 1.0 - eps_lik)
                out[a, b] = np.sum(target * np.log(pc) + (1.0 - target) * np.log1p(-pc))
            else:
                out[a, b] = np.mean(((target - p) / p) ** 2)
    return out


@njit(cache=True)
def grid_objective_numba(x, g, gp, target, gammas, thetas, use_mix, a1, a2, var_floor, eps_lik, mode):
    n = x.shape[0]
    out = np.empty((gammas.shape[0], thetas.shape[0]))
    for a in range(gammas.shape[0]):
        for b in range(thetas.shape[0]):
            acc = 0.0
            for i in range(n):
                p, _, _ = _adjust_one(x[i], g[i], gp[i], gammas[a], thetas[b], use_mix,
                                      a1, a2, var_floor, eps_lik)
                if mode == 0:
                    pc = p
                    if pc < eps_lik:
                        pc = eps_lik
                    elif pc > 1.0 - eps_lik:
                        pc = 1.0 - eps_lik
                    t = target[i]
                    # outcomes are 0/1, so usually only one log is needed
                    if t == 1.0:
                        acc += np.log(pc)
                    elif t == 0.0:
                        acc += np.log1p(-pc)
                    else:
                        acc += t * np.log(pc) + (1.0 - t) * np.log1p(-pc)
                else:
                    e = (target[i] - p) / p
                    acc += e * e
            out[a, b] = acc if mode == 0 else acc / n
    return out


# --------------------------------------------------------------------------
# windowed bootstrap of the empirical excess certainty
# --------------------------------------------------------------------------

def bootstrap_ec_numpy(z, adj, w, idx):
    """Empirical EC for each row of the resampling index matrix ``idx``."""
    ww = w[idx]
    tot = ww.sum(axis=1)
    zbar = (z[idx] * ww).sum(axis=1) / tot
    abar = (adj[idx] * ww).sum(axis=1) / tot
    return (zbar - abar) / abar


@njit(cache=True)
def bootstrap_ec_numba(z, adj, w, idx):
    n_draws, k = idx.shape
    out = np.empty(n_draws)
    for d in range(n_draws):
        sz = 0.0
        sa = 0.0
        sw = 0.0
        for j in range(k):
            i = idx[d, j]
            sz += z[i] * w[i]
            sa += adj[i] * w[i]
            sw += w[i]
        abar = sa / sw
        out[d] = (sz / sw - abar) / abar
    return out


if HAVE_NUMBA:
    design_rows = design_rows_numba
    adjust_flipped = adjust_flipped_numba
    grid_objective = grid_objective_numba
    bootstrap_ec = bootstrap_ec_numba
else:
    design_rows = design_rows_numpy
    adjust_flipped = adjust_flipped_numpy
    grid_objective = grid_objective_numpy
    bootstrap_ec = bootstrap_ec_numpy

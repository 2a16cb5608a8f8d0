import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import draw_flipped
from ecap.core import ConditionalMoments, h_theta
from ecap.errors import ConfigurationError, DomainError, InsufficientDataError
from ecap.estimator import (DEFAULT_GAMMA_GRID, EcapConfig, EcapModel, MixtureSpec, VarianceFloor, _grid_search,
                            adjust, adjust_array, adjust_detail, bias_corrected_moments, fit, fit_opt, load_model,
                            mixture_moments, plug_in_moments, save_model)
from ecap.simulation import ExperimentSpec, PriorSpec, draw_dataset, log_likelihood, mean_squared_ec, \
    posterior_moments
from ecap.spline import ScoreSplineFit, SplineBasis

from ecap import _kernels


def const_score(g, gp):
    return lambda x: (g, gp)


def table1_data(n=5000, q=0.05, theta=0.0, seed=11, gamma=0.005):
    spec = ExperimentSpec(prior=PriorSpec(4, 4), gamma_star=gamma, q=q, theta_star=theta, n=n, replicates=1,
                          rng_seed=seed)
    return draw_dataset(spec, 0)


@pytest.fixture(scope="module")
def table1():
    return table1_data()


@pytest.fixture(scope="module")
def fitted(table1):
    return fit(table1.p_tilde, EcapConfig(theta_grid=(0.0,)), z=table1.z)


# ---- moments ---------------------------------------------------------------

def test_plug_in_examples():
    m = plug_in_moments(0.2, const_score(0.4, 5.0), 0.01)
    assert m.mean == pytest.approx(0.21, abs=1e-15)
    m = plug_in_moments(0.2, const_score(0.4, 2.0), 0.01)
    assert m.variance == pytest.approx(0.0016, abs=1e-15)


def test_plug_in_center_with_fitted_spline():
    x = draw_flipped(500, 1)
    from ecap.spline import fit_score
    m = plug_in_moments(0.5, fit_score(x), 0.01)
    assert m.mean == pytest.approx(0.5, abs=1e-15)


def test_plug_in_floors_and_clamps():
    m = plug_in_moments(0.01, const_score(-5.0, -1e4), 0.05, var_floor=1e-9, eps_lik=1e-6)
    assert m.variance == 1e-9
    assert m.mean == 1e-6


def test_plug_in_rejects_bad_gamma_and_unflipped():
    with pytest.raises(DomainError):
        plug_in_moments(0.2, const_score(0, 0), 0.0)
    with pytest.raises(DomainError):
        plug_in_moments(0.7, const_score(0, 0), 0.01)


def test_bias_examples():
    m = ConditionalMoments(0.2, 0.001)
    assert bias_corrected_moments(m, 0.0) is m
    assert bias_corrected_moments(ConditionalMoments(0.5, 0.0), 2.0).mean == pytest.approx(0.5, abs=1e-15)
    assert bias_corrected_moments(m, 1.0).mean == pytest.approx(0.1529, abs=1e-12)


def test_bias_mean_is_second_order_delta_method():
    # h(mu) + h''(mu) sigma^2 / 2, with h'' = -theta (6 mu - 3)
    for mu, s2, th in [(0.1, 0.002, -3.0), (0.3, 0.01, 2.0), (0.45, 0.0005, -1.0)]:
        expected = h_theta(mu, th) - 0.5 * th * (6 * mu - 3) * s2
        got = bias_corrected_moments(ConditionalMoments(mu, s2), th).mean
        assert got == pytest.approx(expected, abs=1e-14)


def test_mixture_examples():
    m = ConditionalMoments(0.3, 0.01)
    one = mixture_moments(m, MixtureSpec((1.0,), (1.0,)))
    assert one.mean == pytest.approx(0.3, abs=1e-15)
    assert one.variance == pytest.approx(0.01, abs=1e-15)
    two = mixture_moments(m, MixtureSpec((0.5, 0.5), (0.5, 1.5)))
    assert two.mean == pytest.approx(0.4, abs=1e-15)


def test_mixture_spec_validation():
    with pytest.raises(ConfigurationError):
        MixtureSpec((0.5, 0.4), (1.0, 1.0))
    with pytest.raises(ConfigurationError):
        MixtureSpec((0.5, 0.5), (1.0, 1.5))


def _random_mixture(rng):
    k = int(rng.integers(2, 5))
    w = rng.dirichlet(np.ones(k))
    c = rng.uniform(0.3, 2.0, k)
    c = c / np.dot(w, c)  # enforce sum w c = 1
    return MixtureSpec(tuple(w), tuple(c))


@pytest.mark.parametrize("seed", range(10))
def test_mixture_variance_matches_discrete_brute_force(seed):
    rng = np.random.default_rng(seed)
    spec = _random_mixture(rng)
    # a two-point base distribution with the requested mean and variance
    mu, sd = rng.uniform(0.05, 0.4), rng.uniform(0.0, 0.04)
    base = np.array([mu - sd, mu + sd])
    vals = np.concatenate([base / c for c in spec.scales])
    probs = np.concatenate([np.full(2, 0.5 * w) for w in spec.weights])
    mean = np.dot(probs, vals)
    var = np.dot(probs, (vals - mean) ** 2)
    got = mixture_moments(ConditionalMoments(mu, sd * sd), spec, var_floor=0.0)
    assert got.mean == pytest.approx(mean, rel=1e-12)
    assert got.variance == pytest.approx(var, rel=1e-9, abs=1e-15)
    assert got.variance >= 0.0


# ---- config ------------------------------------------------------------------

def test_config_validation_and_round_trip():
    with pytest.raises(ConfigurationError):
        EcapConfig(gamma_grid=())
    with pytest.raises(ConfigurationError):
        EcapConfig(eps_lik=0.02)
    with pytest.raises(ConfigurationError):
        EcapConfig(theta_grid=(3.0,))
    with pytest.raises(ConfigurationError):
        EcapConfig.from_dict({"gamma_grd": [0.1]})
    cfg = EcapConfig(theta_grid=(0.0, 1.0), mixture=MixtureSpec((0.5, 0.5), (0.5, 1.5)),
                     variance_floor=VarianceFloor("theoretical", c=0.5), mle_mode="split")
    assert EcapConfig.from_dict(cfg.to_dict()) == cfg


def test_theoretical_floor_shrinks_with_n():
    vf = VarianceFloor("theoretical")
    assert vf.value(10_000, 1e-3) < vf.value(100, 1e-3)
    assert VarianceFloor().value(10, 1.0) == 1e-12


# ---- fit -------------------------------------------------------------------------

def test_fit_trivial_grid_needs_no_outcomes(table1):
    cfg = EcapConfig(gamma_grid=(0.004,), theta_grid=(0.0,))
    model = fit(table1.p_tilde, cfg)
    assert model.gamma_hat == 0.004 and model.theta_hat == 0.0
    assert model.selection is None


def test_fit_requires_outcomes_for_grid(table1):
    with pytest.raises(ConfigurationError):
        fit(table1.p_tilde, EcapConfig())


def test_fit_rejects_small_samples():
    with pytest.raises(InsufficientDataError):
        fit(np.linspace(0.1, 0.9, 19), EcapConfig(gamma_grid=(0.01,), theta_grid=(0.0,)))


def test_fit_estimates_are_grid_members(fitted):
    assert fitted.gamma_hat in fitted.config.gamma_grid
    assert fitted.theta_hat in fitted.config.theta_grid


def _loglik_surface(p_tilde, z, model, gammas, thetas=(0.0,)):
    out = np.empty((len(gammas), len(thetas)))
    for i, g in enumerate(gammas):
        for j, t in enumerate(thetas):
            m = EcapModel(model.spline, float(g), float(t), model.config, model.var_floor, model.n_train)
            out[i, j] = log_likelihood(z, adjust_array(m, p_tilde), model.config.eps_lik)
    return out


def test_fit_is_exhaustive_likelihood_scan(table1):
    """Recompute the likelihood at every grid point through the public adjust path."""
    cfg = EcapConfig(gamma_grid=tuple(np.logspace(-3.5, -1.5, 9)), theta_grid=(-1.0, -0.5, 0.0, 0.5))
    model = fit(table1.p_tilde, cfg, z=table1.z)
    surf = _loglik_surface(table1.p_tilde, table1.z, model, cfg.gamma_grid, cfg.theta_grid)
    np.testing.assert_allclose(model.selection, surf, rtol=1e-9)
    chosen = surf[cfg.gamma_grid.index(model.gamma_hat), cfg.theta_grid.index(model.theta_hat)]
    assert chosen >= surf.max() - 1e-9 * abs(surf.max())


def test_fit_ties_prefer_small_theta_then_small_gamma():
    from ecap.estimator import _select
    scores = np.zeros((3, 3))
    i, j = _select(scores, np.array([0.01, 0.02, 0.03]), np.array([-1.0, 0.0, 1.0]))
    assert (i, j) == (0, 1)
    scores[2, 0] = scores[1, 2] = 1.0
    i, j = _select(scores, np.array([0.01, 0.02, 0.03]), np.array([-1.0, 0.0, 1.0]))
    assert (i, j) == (1, 2)  # |theta| ties, smaller gamma wins


def test_fit_gamma_within_one_step_of_fine_grid(table1, fitted):
    coarse = np.asarray(DEFAULT_GAMMA_GRID)
    fine = np.logspace(np.log10(coarse[0]), np.log10(coarse[-1]), 10 * coarse.size)
    surf = _loglik_surface(table1.p_tilde, table1.z, fitted, fine)[:, 0]
    best_fine = fine[np.argmax(surf)]
    step = np.log(coarse[1] / coarse[0])
    assert abs(np.log(fitted.gamma_hat / best_fine)) <= step + 1e-12


def test_fit_recovers_strong_bias():
    data = table1_data(theta=-3.0, seed=12)
    model = fit(data.p_tilde, EcapConfig(), z=data.z)
    assert abs(model.theta_hat - (-3.0)) <= 0.3


def test_split_mode_runs_and_keeps_full_spline(table1, fitted):
    cfg = EcapConfig(theta_grid=(0.0,), mle_mode="split", split_seed=3)
    model = fit(table1.p_tilde, cfg, z=table1.z)
    np.testing.assert_array_equal(model.spline.eta, fitted.spline.eta)
    assert model.gamma_hat in cfg.gamma_grid


def test_fit_opt_needs_truth(table1):
    with pytest.raises(ConfigurationError):
        fit_opt(table1.p_tilde, None)


def test_fit_opt_single_point_grid_equals_fit(table1):
    cfg = EcapConfig(gamma_grid=(0.006,), theta_grid=(0.0,))
    a = fit(table1.p_tilde, cfg)
    b = fit_opt(table1.p_tilde, table1.p, cfg)
    assert (a.gamma_hat, a.theta_hat) == (b.gamma_hat, b.theta_hat)
    np.testing.assert_array_equal(a.spline.eta, b.spline.eta)
    np.testing.assert_array_equal(adjust_array(a, table1.p_tilde), adjust_array(b, table1.p_tilde))


def test_fit_opt_beats_fit_on_its_own_metric(table1, fitted):
    opt = fit_opt(table1.p_tilde, table1.p, fitted.config, spline=fitted.spline)
    loss_opt = mean_squared_ec(table1.p, adjust_array(opt, table1.p_tilde))
    loss_mle = mean_squared_ec(table1.p, adjust_array(fitted, table1.p_tilde))
    assert loss_opt <= loss_mle


def test_fit_opt_gamma_near_truth_on_clean_data():
    data = table1_data(q=0.0, seed=13)
    model = fit_opt(data.p_tilde, data.p, EcapConfig(theta_grid=(0.0,)))
    grid = np.asarray(model.config.gamma_grid)
    step = np.log(grid[1] / grid[0])
    assert abs(np.log(model.gamma_hat / 0.005)) <= step


def test_grid_search_objective_matches_direct_ec2(table1, fitted):
    x = np.minimum(table1.p_tilde, 1 - table1.p_tilde)
    target = np.where(table1.p_tilde > 0.5, 1 - table1.p, table1.p)
    cfg = fitted.config.replace(gamma_grid=(0.003, 0.006))
    _, _, raw = _grid_search(x, target, fitted.spline, cfg, fitted.var_floor, _kernels.MODE_EC2)
    for i, g in enumerate(cfg.gamma_grid):
        m = EcapModel(fitted.spline, g, 0.0, cfg, fitted.var_floor)
        assert raw[i, 0] == pytest.approx(mean_squared_ec(table1.p, adjust_array(m, table1.p_tilde)), rel=1e-10)


# ---- adjust ------------------------------------------------------------------------

def _zero_model(gamma):
    basis = SplineBasis([0.1, 0.2, 0.3, 0.4])
    spline = ScoreSplineFit(basis, np.zeros(basis.dim), 1.0)
    return EcapModel(spline, gamma, 0.0, EcapConfig(gamma_grid=(gamma,), theta_grid=(0.0,)), 1e-300)


def test_adjust_vanishes_with_noise():
    p = np.array([0.01, 0.2, 0.5, 0.73, 0.999])
    np.testing.assert_allclose(adjust_array(_zero_model(1e-10), p), p, atol=1e-8)


def test_adjust_mirror(fitted):
    lo, hi = adjust(fitted, 0.2), adjust(fitted, 0.8)
    assert hi.p_hat == pytest.approx(1 - lo.p_hat, abs=1e-15)
    assert hi.flipped and not lo.flipped


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_adjust_properties(p):
    model = _fitted_for_hypothesis()
    rec = adjust(model, p)
    x = min(p, 1 - p)
    lo = rec.p_hat if p <= 0.5 else 1 - rec.p_hat
    assert lo <= 0.5
    assert lo >= min(rec.mu_hat, 0.5) - 1e-15
    assert rec.sigma2_hat >= 0
    arr = adjust_array(model, [p])[0]
    assert arr == pytest.approx(rec.p_hat, rel=1e-12, abs=1e-15)
    assert adjust(model, p) == rec
    assert x <= 0.5


_HYP_MODEL = {}


def _fitted_for_hypothesis():
    if "m" not in _HYP_MODEL:
        d = table1_data(n=1000, seed=21)
        cfg = EcapConfig(gamma_grid=(0.005,), theta_grid=(-1.0,),
                         mixture=MixtureSpec((0.5, 0.5), (0.8, 1.2)))
        _HYP_MODEL["m"] = fit(d.p_tilde, cfg)
    return _HYP_MODEL["m"]


def test_adjust_detail_shapes(fitted, table1):
    p_hat, mu, s2, flipped = adjust_detail(fitted, table1.p_tilde)
    assert p_hat.shape == mu.shape == s2.shape == flipped.shape == table1.p_tilde.shape
    assert np.all(s2 >= 0)
    x_hat = np.where(flipped, 1 - p_hat, p_hat)
    assert np.all(x_hat <= 0.5) and np.all(x_hat >= np.minimum(mu, 0.5) - 1e-15)


def test_adjust_deterministic(fitted, table1):
    a = adjust_array(fitted, table1.p_tilde)
    b = adjust_array(fitted, table1.p_tilde)
    assert a.tobytes() == b.tobytes()


def test_model_save_load_round_trip(tmp_path, fitted, table1):
    path = tmp_path / "m.json"
    save_model(fitted, path)
    loaded = load_model(path)
    assert adjust_array(loaded, table1.p_tilde).tobytes() == adjust_array(fitted, table1.p_tilde).tobytes()
    assert loaded.config == fitted.config


def test_model_load_rejects_other_schema(tmp_path, fitted):
    d = fitted.to_dict()
    d["schema_version"] = 99
    with pytest.raises(ConfigurationError):
        EcapModel.from_dict(d)


def test_adjustment_improves_calibration_uniform_prior():
    """Binned E(p | estimate) / estimate is nearer 1 after adjustment."""
    spec = ExperimentSpec(prior=PriorSpec(1, 1), gamma_star=0.01, n=20_000, replicates=1, rng_seed=5)
    d = draw_dataset(spec, 0)
    model = fit(d.p_tilde, EcapConfig(theta_grid=(0.0,)), z=d.z)
    x = np.minimum(d.p_tilde, 1 - d.p_tilde)
    xp = np.where(d.p_tilde > 0.5, 1 - d.p, d.p)
    xh = np.minimum(adjust_array(model, d.p_tilde), 1 - adjust_array(model, d.p_tilde))

    def ratio_gap(est):
        edges = np.quantile(est[est < 0.1], np.linspace(0, 1, 11))
        idx = np.digitize(est, edges[1:-1])
        sel = est < 0.1
        return np.mean([abs(xp[sel & (idx == k)].mean() / est[sel & (idx == k)].mean() - 1) for k in range(10)])

    assert ratio_gap(xh) < ratio_gap(x)


# ---- identities against exact posterior moments --------------------------------------

def test_bias_approximation_against_monte_carlo():
    """E(p | p_tilde) for p = h(m), m ~ prior, against the second-order
    formula with exact posterior moments of m."""
    rng = np.random.default_rng(77)
    gamma, n, x0, half = 0.005, 2_000_000, 0.3, 0.002
    prior = PriorSpec(4, 4)
    m = rng.beta(4, 4, n)
    pt = rng.beta(m / gamma, (1 - m) / gamma)
    sel = np.abs(pt - x0) < half
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mu, s2 = posterior_moments(prior, gamma, x0)
    for theta in (-3.0, 2.0):
        p = h_theta(m[sel], theta)
        approx = bias_corrected_moments(ConditionalMoments(mu, s2), theta).mean
        se = p.std() / np.sqrt(p.size)
        assert abs(p.mean() - approx) <= 5 * gamma ** 1.5 * abs(theta) + 3 * se

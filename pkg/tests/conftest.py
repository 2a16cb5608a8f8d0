import warnings

import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from ecap.simulation import PriorSpec, tabulate, true_score_numeric

GAMMA_REF = 0.005


class ScoreReference:
    """Quadrature g* for Beta(4, 4) at GAMMA_REF, tabulated and interpolated."""

    def __init__(self, prior, gamma, grid):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            g, gp = tabulate(lambda x: true_score_numeric(prior, gamma, x), grid)
        self.prior, self.gamma = prior, gamma
        self._g = CubicSpline(grid, g)
        self._gp = CubicSpline(grid, gp)
        self.lo, self.hi = grid[0], grid[-1]

    def g(self, x):
        return self._g(np.clip(x, self.lo, self.hi))

    def gp(self, x):
        return self._gp(np.clip(x, self.lo, self.hi))


@pytest.fixture(scope="session")
def score_ref():
    return ScoreReference(PriorSpec(4, 4), GAMMA_REF, np.linspace(0.001, 0.5, 300))


def draw_flipped(n, seed, a=4.0, b=4.0, gamma=GAMMA_REF):
    rng = np.random.default_rng(seed)
    p = rng.beta(a, b, n)
    pt = rng.beta(p / gamma, (1 - p) / gamma)
    return np.minimum(pt, 1 - pt)

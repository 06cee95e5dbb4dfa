"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

from t1map.imaging import Grid2D
from t1map.phantom import default_spec, make_phantom
from t1map.signal import molli_signal, stone_signal


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid8():
    return Grid2D(8, 8)


@pytest.fixture
def grid16():
    return Grid2D(16, 16)


@pytest.fixture(scope="session")
def clean_stone_case():
    """Noiseless, motion-free STONE phantom at modest size."""
    return make_phantom(default_spec("STONE", size=96))


@pytest.fixture(scope="session")
def moving_stone_case():
    """Motion-corrupted noisy STONE phantom (thin annulus, 3 px motion)."""
    spec = replace(
        default_spec("STONE", size=96),
        inner_radius_px=17.0, outer_radius_px=22.0, lv_radius_px=17.0,
        motion_amplitude_px=3.0, motion_smoothness_px=5.0,
        noise_sigma=0.02, seed=11,
    )
    return make_phantom(spec)


# ---------------------------------------------------------------------------
# Brute-force fit oracle: polarity sweep + coarse grid + simplex refinement.
# Deliberately independent of the production Levenberg-Marquardt path.
# ---------------------------------------------------------------------------

def oracle_fit_stone(samples, times, m0_box=(100.0, 2000.0),
                     t1_box=(100.0, 3000.0), n_grid=48):
    samples = np.asarray(samples, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    n = times.size
    order = np.argsort(times, kind="stable")
    m0s = np.linspace(*m0_box, n_grid)
    t1s = np.linspace(*t1_box, n_grid)
    grid_model = stone_signal(m0s[:, None, None], t1s[None, :, None],
                              times[None, None, :])
    best = (np.inf, None)
    for flips in range(n):
        signs = np.ones(n)
        signs[order[:flips]] = -1.0
        y = signs * samples
        ssr = np.sum((grid_model - y[None, None, :]) ** 2, axis=2)
        i, j = np.unravel_index(np.argmin(ssr), ssr.shape)

        def objective(p, y=y):
            if p[1] <= 0:
                return np.inf
            return float(np.sum((stone_signal(p[0], p[1], times) - y) ** 2))

        res = minimize(objective, x0=[m0s[i], t1s[j]], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-18,
                                "maxiter": 4000})
        if res.fun < best[0]:
            best = (res.fun, res.x)
    return best[1]


def oracle_fit_molli(samples, times, a_box=(100.0, 2000.0),
                     b_box=(200.0, 4000.0), t1s_box=(100.0, 3000.0),
                     n_grid=24):
    samples = np.asarray(samples, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    n = times.size
    order = np.argsort(times, kind="stable")
    a_g = np.linspace(*a_box, n_grid)
    b_g = np.linspace(*b_box, n_grid)
    t_g = np.linspace(*t1s_box, n_grid)
    grid_model = molli_signal(a_g[:, None, None, None], b_g[None, :, None, None],
                              t_g[None, None, :, None], times[None, None, None, :])
    best = (np.inf, None)
    for flips in range(n):
        signs = np.ones(n)
        signs[order[:flips]] = -1.0
        y = signs * samples
        ssr = np.sum((grid_model - y[None, None, None, :]) ** 2, axis=3)
        i, j, k = np.unravel_index(np.argmin(ssr), ssr.shape)

        def objective(p, y=y):
            if p[2] <= 0:
                return np.inf
            return float(np.sum((molli_signal(p[0], p[1], p[2], times) - y) ** 2))

        res = minimize(objective, x0=[a_g[i], b_g[j], t_g[k]],
                       method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-18,
                                "maxiter": 6000})
        if res.fun < best[0]:
            best = (res.fun, res.x)
    return best[1]

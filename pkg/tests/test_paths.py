import math

import numpy as np
import pytest

from rbsdelab.paths import (
    DiffusionSpec,
    SimulationError,
    TimeGrid,
    girsanov_weight,
    mean_and_se,
    simulate_brownian,
    simulate_controlled_sde,
    simulate_sde,
)


def unit_diffusion(x0=0.0, drift=None):
    return DiffusionSpec(np.array([x0]), lambda t, p: 1.0, 1.0, drift)


def test_grid_nodes():
    g = TimeGrid(2.0, 4)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.0
    assert np.all(np.diff(g.nodes) > 0)
    assert g.t(3) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_single_increment_is_reproducible():
    g = TimeGrid(1.0, 1)
    a = simulate_brownian(g, 1, 1, seed=42)
    b = simulate_brownian(g, 1, 1, seed=42)
    assert a.dB.shape == (1, 1, 1)
    assert np.array_equal(a.dB, b.dB)


def test_empty_ensemble_rejected():
    with pytest.raises(ValueError, match="empty ensemble"):
        simulate_brownian(TimeGrid(1.0, 5), 0)


def test_increments_keyed_by_path_not_order():
    g = TimeGrid(1.0, 8)
    big = simulate_brownian(g, 50, 2, seed=3)
    small = simulate_brownian(g, 10, 2, seed=3)
    assert np.array_equal(big.dB[:10], small.dB)
    threaded = simulate_brownian(g, 50, 2, seed=3, threads=4)
    assert np.array_equal(big.dB, threaded.dB)


def test_terminal_variance():
    g = TimeGrid(1.0, 50)
    b = simulate_brownian(g, 10**5, 1, seed=1)
    BT = b.dB.sum(axis=1)[:, 0]
    assert abs(BT.var() - 1.0) <= 0.02


def test_increment_moments():
    g = TimeGrid(1.0, 20)
    b = simulate_brownian(g, 10**4, 1, seed=9)
    dt = g.dt
    means = b.dB.mean(axis=0)[:, 0]
    assert np.all(np.abs(means) <= 4 * math.sqrt(dt / 10**4))
    assert np.all(np.abs(b.dB.var(axis=0)[:, 0] / dt - 1.0) <= 0.05)


def test_unit_diffusion_reproduces_brownian():
    g = TimeGrid(1.0, 10)
    b = simulate_sde(unit_diffusion(), simulate_brownian(g, 100, 1, seed=0))
    B = np.concatenate([np.zeros((100, 1)), np.cumsum(b.dB[:, :, 0], axis=1)], axis=1)
    assert np.all(b.x[:, 0, 0] == 0.0)
    np.testing.assert_allclose(b.x[:, :, 0], B, rtol=0, atol=1e-13)


def test_running_sup_feature():
    g = TimeGrid(1.0, 10)
    b = simulate_sde(unit_diffusion(), simulate_brownian(g, 30, 1, seed=2))
    pre = b.prefix(6)
    assert pre.x.shape == (30, 7, 1)
    np.testing.assert_array_equal(pre.sup, np.max(np.abs(b.x[:, :7, 0]), axis=1))


def test_missing_inverse_bound_rejected():
    with pytest.raises(ValueError, match="inverse bound"):
        DiffusionSpec(np.array([0.0]), lambda t, p: 1.0, None)


def test_nan_sigma_names_step():
    spec = DiffusionSpec(np.array([0.0]), lambda t, p: np.nan if p.i == 3 else 1.0, 1.0)
    with pytest.raises(SimulationError, match="step 3"):
        simulate_sde(spec, simulate_brownian(TimeGrid(1.0, 6), 4, 1, seed=0))


def test_sup_norm_grid_refinement():
    # reference run on a 4x finer grid sharing the same Brownian motion
    spec = DiffusionSpec(np.array([1.0]), lambda t, p: 0.2 * (1 + np.abs(p.scalar)), 1.0 / 0.2)
    M = 20000
    fine = TimeGrid(1.0, 100)
    fb = simulate_brownian(fine, M, 1, seed=4)
    coarse = TimeGrid(1.0, 25)
    cb = simulate_brownian(coarse, M, 1, seed=0)
    cb.dB = fb.dB.reshape(M, 25, 4, 1).sum(axis=2)
    sf = np.max(np.abs(simulate_sde(spec, fb).x[:, :, 0]), axis=1)
    sc = np.max(np.abs(simulate_sde(spec, cb).x[:, :, 0]), axis=1)
    assert np.isfinite(sf.mean())
    diff = sf - sc
    # grid sup misses excursions between coarse nodes; allow 3 SE of the paired difference + O(dt)
    assert abs(diff.mean()) <= 3 * diff.std() / math.sqrt(M) + coarse.dt * 2


def test_zero_drift_controlled_matches_uncontrolled():
    g = TimeGrid(1.0, 10)
    spec = unit_diffusion(drift=lambda t, p, a: np.zeros(p.n_paths))
    br = simulate_brownian(g, 200, 1, seed=5)
    a = simulate_sde(spec, br)
    b = simulate_controlled_sde(spec, lambda i, p: 0.0, br)
    assert np.array_equal(a.x, b.x)


def test_constant_drift_mean():
    g = TimeGrid(1.0, 20)
    mu = 0.7
    spec = unit_diffusion(drift=lambda t, p, a: a)
    b = simulate_controlled_sde(spec, lambda i, p: mu, simulate_brownian(g, 10**4, 1, seed=6))
    m, se = mean_and_se(b.x[:, -1, 0])
    assert abs(m - mu) <= 3 * se
    assert b.controls.shape == (10**4, 20)


def test_nonfinite_policy_rejected():
    spec = unit_diffusion(drift=lambda t, p, a: a)
    with pytest.raises(SimulationError, match="non-finite control"):
        simulate_controlled_sde(spec, lambda i, p: np.inf, simulate_brownian(TimeGrid(1.0, 3), 3, 1, seed=0))


def test_girsanov_zero_drift_is_one():
    g = TimeGrid(1.0, 10)
    spec = unit_diffusion(drift=lambda t, p, a: np.zeros(p.n_paths))
    b = simulate_sde(spec, simulate_brownian(g, 100, 1, seed=0))
    w = girsanov_weight(spec, np.zeros((100, 10)), b)
    assert np.all(w == 1.0)


def test_girsanov_lognormal_and_consistency():
    g = TimeGrid(1.0, 20)
    mu, M = 0.5, 10**5
    spec = unit_diffusion(drift=lambda t, p, a: a)
    br = simulate_brownian(g, M, 1, seed=8)
    b = simulate_sde(spec, br)
    w = girsanov_weight(spec, np.full((M, 20), mu), b)
    BT = b.x[:, -1, 0]
    np.testing.assert_allclose(w, np.exp(mu * BT - 0.5 * mu**2), rtol=1e-12)
    m, se = mean_and_se(w)
    assert abs(m - 1.0) <= 4 * se
    wx, se_w = mean_and_se(w * BT)
    direct = simulate_controlled_sde(spec, lambda i, p: mu, simulate_brownian(g, M, 1, seed=9))
    dx, se_d = mean_and_se(direct.x[:, -1, 0])
    assert abs(wx - dx) <= 3 * math.hypot(se_w, se_d)
    assert abs(dx - mu) <= 3 * se_d


def test_girsanov_singular_sigma():
    spec = DiffusionSpec(np.array([0.0]), lambda t, p: 0.0 if p.i == 2 else 1.0, 1.0, lambda t, p, a: a)
    g = TimeGrid(1.0, 4)
    with pytest.raises(SimulationError):
        b = simulate_sde(spec, simulate_brownian(g, 3, 1, seed=0))
        girsanov_weight(spec, np.ones((3, 4)), b)

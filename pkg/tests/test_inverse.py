import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tribogen import contact
from tribogen.dataset import ScalerParams, recipes
from tribogen.inverse import (InversionConfig, cmaes_ask, cmaes_init, cmaes_minimize, cmaes_tell,
                              default_popsize, invert_direct, invert_latent)
from tribogen.neural import NetworkSpec, init_network
from tribogen.params import BoundsTable, GmmParams

B = BoundsTable()


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def test_default_popsize():
    assert default_popsize(23) == 13
    assert default_popsize(56) == 16


def test_initial_state():
    s = cmaes_init(5, np.ones(5), 0.5)
    np.testing.assert_array_equal(s.C, np.eye(5))
    assert np.all(s.p_c == 0) and np.all(s.p_sigma == 0)
    assert s.weights.sum() == pytest.approx(1.0)
    assert np.all(np.diff(s.weights) < 0)
    assert cmaes_ask(s).shape == (s.lam, 5)


def test_invalid_init():
    with pytest.raises(ValueError):
        cmaes_init(3, np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        cmaes_init(3, np.zeros(2), 1.0)


def test_sampling_covariance():
    s = cmaes_init(3, np.array([1.0, -2.0, 0.5]), 0.7, lam=40_000, seed=1)
    A = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 0.5]])
    s.C = A
    vals, vecs = np.linalg.eigh(A)
    s.B, s.D = vecs, np.sqrt(vals)
    X = cmaes_ask(s)
    np.testing.assert_allclose(X.mean(0), s.mean, atol=0.03)
    np.testing.assert_allclose(np.cov(X.T), 0.49 * A, atol=0.03)


def test_tiny_sigma_collapses_to_mean():
    s = cmaes_init(4, np.arange(4.0), 1e-12)
    np.testing.assert_allclose(cmaes_ask(s), np.tile(np.arange(4.0), (s.lam, 1)), atol=1e-9)


def test_sphere_converges():
    s = cmaes_minimize(sphere, np.full(10, 3.0), 2.0, max_evals=2000, seed=0)
    assert s.best_f < 1e-8


def test_shifted_optimum():
    c = np.linspace(-1, 2, 6)
    s = cmaes_minimize(lambda x: sphere(x - c), np.zeros(6), 1.0, max_evals=3000, seed=3)
    np.testing.assert_allclose(s.best_x, c, atol=1e-4)


def test_constant_fitness_is_stable():
    s = cmaes_minimize(lambda x: 1.0, np.zeros(5), 1.0, max_iter=50, seed=0)
    assert np.all(np.isfinite(s.mean)) and np.isfinite(s.sigma)
    assert np.all(np.linalg.eigvalsh(s.C) > 0)


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_rank_based_invariance(seed):
    a = cmaes_minimize(sphere, np.ones(4), 0.5, max_iter=20, seed=seed)
    b = cmaes_minimize(lambda x: math.exp(sphere(x)) * 3 + 7, np.ones(4), 0.5, max_iter=20, seed=seed)
    np.testing.assert_allclose(a.mean, b.mean, rtol=0, atol=0)
    assert a.sigma == b.sigma


def test_non_finite_fitness_ranked_worst():
    s = cmaes_init(3, np.zeros(3), 1.0, lam=8, seed=0)
    X = cmaes_ask(s)
    f = [sphere(x) for x in X]
    f[np.argmin(f)] = np.nan
    cmaes_tell(s, X, f)
    assert np.isfinite(s.best_f)
    assert np.all(np.isfinite(s.mean))


def test_best_so_far_is_monotone():
    best = []
    cmaes_minimize(sphere, np.full(5, 2.0), 1.0, max_iter=40, seed=2,
                   callback=lambda st_, X, fx: best.append(st_.best_f))
    assert np.all(np.diff(best) <= 0)


def test_deterministic():
    a = cmaes_minimize(sphere, np.ones(5), 1.0, max_iter=30, seed=9)
    b = cmaes_minimize(sphere, np.ones(5), 1.0, max_iter=30, seed=9)
    np.testing.assert_array_equal(a.mean, b.mean)


# -- inversion -------------------------------------------------------------

@pytest.fixture(scope="module")
def target():
    theta = GmmParams.from_vector(recipes(3, 1)[0])
    return contact.simulate_law(theta, 200, seed=5), theta


def test_direct_inversion_returns_valid_theta(target):
    law, _ = target
    cfg = InversionConfig(iterations=4, popsize=8, seed=1, final_seeds=2)
    res = invert_direct(law, n=200, config=cfg)
    GmmParams.from_vector(res.theta).check(B)
    assert res.theta.shape == (23,) and res.n == 200
    best = [r["best_mse"] for r in res.trace]
    assert len(best) == 4 and np.all(np.diff(best) <= 0)
    assert np.isfinite(res.functional_smape)
    again = invert_direct(law, n=200, config=cfg)
    np.testing.assert_array_equal(again.theta, res.theta)


def test_direct_inversion_warm_start_from_truth(target):
    law, theta = target
    x0 = 2 * (theta.to_vector() - B.lower) / B.width - 1
    cfg = InversionConfig(iterations=1, popsize=4, seed=0, x0=list(x0), sigma0=1e-9, final_seeds=1, sim_seed=5)
    res = invert_direct(law, n=200, config=cfg)
    assert res.best_value < 1e-10


def latent_setup():
    spec = NetworkSpec.vae(encoder_widths=(16,), encoder_dropout=(0,), decoder_widths=(16,),
                           decoder_dropout=(0,), latent_dim=4)
    theta = recipes(0, 100)
    scaler = ScalerParams(np.zeros(129), np.ones(129), theta.min(0), theta.max(0))
    return init_network(spec, 0), scaler


def test_latent_inversion(target):
    law, _ = target
    ck, scaler = latent_setup()
    cfg = InversionConfig(iterations=2, popsize=6, seed=0, final_seeds=1, x0=[0.1, 0, 0, -0.1])
    res = invert_latent(ck, law, n=200, config=cfg, scaler=scaler)
    assert res.latent.shape == (4,)
    GmmParams.from_vector(res.theta).check(B)


def test_latent_inversion_rejects_bad_inputs(target):
    law, _ = target
    ck, scaler = latent_setup()
    with pytest.raises(ValueError):
        invert_latent(ck, law, n=200, config=InversionConfig(iterations=1, x0=[0, 0]), scaler=scaler)
    with pytest.raises(ValueError):
        invert_latent(ck, law, n=200, config=InversionConfig(iterations=1))
    cvae = init_network(NetworkSpec.cvae(encoder_widths=(8,), encoder_dropout=(0,), decoder_widths=(8,),
                                         decoder_dropout=(0,), latent_dim=2), 0)
    with pytest.raises(ValueError):
        invert_latent(cvae, law, n=200, scaler=scaler)


def test_reported_mse_excludes_box_penalty(target):
    from tribogen.inverse import _LawObjective
    law, _ = target
    cfg = InversionConfig(iterations=6, popsize=8, seed=2, final_seeds=1, sigma0=3.0)
    res = invert_direct(law, n=200, config=cfg)
    mse, _ = _LawObjective(law, 200, None, cfg.sim_seed, None)(res.theta)
    assert res.best_value == pytest.approx(mse, rel=1e-9)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tribogen import contact
from tribogen.contact import (AsperityPopulation, DegenerateLawError, FrictionLaw,
                              extract_friction_law, force_sweep, friction_force, gmm_pdf,
                              law_from_population, normal_force, sample_asperities,
                              simulate_law, theoretical_forces)
from tribogen.dataset import recipes
from tribogen.params import GmmParams, PhysicalConstants, mid_bounds_theta

K = PhysicalConstants()


def single_component(mu_h=150.0, mu_r=275.0, s_h=45.0, s_r=55.0, rho=0.0):
    return GmmParams([1.0, 0.0, 0.0], [mu_h, 150, 150, 150], [mu_r, 275, 275, 275],
                     [s_h, 45, 45, 45], [s_r, 55, 55, 55], [rho, 0, 0, 0])


def one_asperity(h=150.0, r=100.0):
    return AsperityPopulation([h], [r])


# -- density -------------------------------------------------------------

def test_pdf_peak_of_single_component():
    expected = 1.0 / (2 * math.pi * 45 * 55)
    assert gmm_pdf(single_component(), 150.0, 275.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(6.4305e-5, rel=1e-4)


def test_pdf_tail_vanishes():
    assert gmm_pdf(single_component(), 1e6, 275.0) == 0.0


def test_pdf_mixture_of_identical_components():
    half = GmmParams([0.5, 0.5, 0.0], [150] * 4, [275] * 4, [45] * 4, [55] * 4, [0.3] * 4)
    one = GmmParams([1.0, 0.0, 0.0], [150] * 4, [275] * 4, [45] * 4, [55] * 4, [0.3] * 4)
    h, r = np.meshgrid(np.linspace(0, 300, 7), np.linspace(10, 600, 5))
    np.testing.assert_allclose(gmm_pdf(half, h, r), gmm_pdf(one, h, r), rtol=1e-12)


def test_pdf_integrates_to_one():
    from scipy import integrate
    th = GmmParams.from_vector(recipes(3, 1)[0])
    val, _ = integrate.dblquad(lambda r, h: gmm_pdf(th, h, r), -400, 700, -400, 1200, epsrel=1e-8)
    assert val == pytest.approx(1.0, abs=1e-6)


# -- sampling ------------------------------------------------------------

def test_sampling_is_deterministic():
    th = mid_bounds_theta()
    a = sample_asperities(th, 500, K, seed=9)
    b = sample_asperities(th, 500, K, seed=9)
    np.testing.assert_array_equal(a.heights, b.heights)
    np.testing.assert_array_equal(a.radii, b.radii)


def test_sample_mean_law_of_large_numbers():
    th = single_component(s_h=10.0, s_r=10.0)
    pop = sample_asperities(th, 100_000, K, seed=1)
    se = 10.0 / math.sqrt(pop.count)
    assert abs(pop.heights.mean() - 150.0) < 3 * se
    assert abs(pop.radii.mean() - 275.0) < 3 * se


def test_rejection_respects_lower_height_bound():
    pop = sample_asperities(single_component(mu_h=50.0, s_h=80.0), 20_000, K, seed=2)
    assert pop.heights.min() >= 0.0
    assert pop.count == 20_000


def test_correlated_component_has_target_correlation():
    pop = sample_asperities(single_component(s_h=20, s_r=20, rho=0.6), 50_000, K, seed=3)
    assert np.corrcoef(pop.heights, pop.radii)[0, 1] == pytest.approx(0.6, abs=0.02)


def test_sampling_budget_exhaustion():
    th = single_component(mu_h=-5000.0, s_h=10.0)
    with pytest.raises(contact.SamplingExhaustedError):
        sample_asperities(th, 10, K, seed=0, retry_budget=1000)


# -- single-asperity forces -----------------------------------------------

def test_single_asperity_normal_force():
    expected_un = 4.0 / 3.0 * 1.36 * math.sqrt(100.0) * 100.0 ** 1.5
    assert expected_un == pytest.approx(18133.33, rel=1e-6)
    assert normal_force(one_asperity(), 50.0, 1.36) == pytest.approx(expected_un * 1e-6, rel=1e-9)
    assert normal_force(one_asperity(), 50.0, 1.36) == pytest.approx(1.813333e-2, rel=1e-6)


def test_single_asperity_friction_force():
    expected_un = 0.40 * 0.85 * math.pi * 100.0 * 100.0
    assert expected_un == pytest.approx(10681.42, rel=1e-6)
    assert friction_force(one_asperity(), 50.0, 0.40, 0.85) == pytest.approx(expected_un * 1e-6, rel=1e-9)
    assert friction_force(one_asperity(), 50.0) == pytest.approx(1.068142e-2, rel=1e-6)


def test_no_contact_beyond_highest_asperity():
    pop = AsperityPopulation([10.0, 20.0], [50.0, 60.0])
    assert normal_force(pop, 20.0) == 0.0
    assert friction_force(pop, 25.0) == 0.0


def test_zero_shear_ratio_annihilates_friction():
    pop = sample_asperities(mid_bounds_theta(), 200, K, seed=4)
    with pytest.raises(Exception):
        PhysicalConstants(b_ratio=0.0)  # constants reject it; the kernel itself is still linear in B
    assert friction_force(pop, 10.0, 0.4, 0.0) == 0.0


def test_concatenated_population_doubles_force():
    pop = sample_asperities(mid_bounds_theta(), 300, K, seed=5)
    both = pop.concat(pop)
    assert normal_force(both, 100.0) == pytest.approx(2 * normal_force(pop, 100.0), rel=1e-13)
    assert friction_force(both, 100.0) == pytest.approx(2 * friction_force(pop, 100.0), rel=1e-13)


def test_unit_conversion_matches_si():
    pop = sample_asperities(mid_bounds_theta(), 100, K, seed=6)
    d = 120.0
    h_m, r_m, d_m = pop.heights * 1e-6, pop.radii * 1e-6, d * 1e-6
    gap = np.maximum(0, h_m - d_m)
    p_si = np.sum(4 / 3 * 1.36e6 * np.sqrt(r_m) * gap ** 1.5)
    f_si = np.sum(0.40e6 * 0.85 * np.pi * r_m * gap)
    assert normal_force(pop, d) == pytest.approx(p_si, rel=1e-12)
    assert friction_force(pop, d) == pytest.approx(f_si, rel=1e-12)


# -- sweep and law extraction ---------------------------------------------

def scalar_sweep(pop, deltas):
    P, F = [], []
    for d in deltas:
        p = f = 0.0
        for h, r in zip(pop.heights, pop.radii):
            if h > d:
                p += 4.0 / 3.0 * K.e_star * math.sqrt(r) * (h - d) ** 1.5
                f += K.sigma_s * K.b_ratio * math.pi * r * (h - d)
        P.append(p * 1e-6)
        F.append(f * 1e-6)
    return np.array(P), np.array(F)


def test_sweep_matches_scalar_reference():
    pop = sample_asperities(GmmParams.from_vector(recipes(1, 1)[0]), 150, K, seed=8)
    deltas = contact.delta_grid()
    p, f = force_sweep(pop, deltas, K)
    p_ref, f_ref = scalar_sweep(pop, deltas)
    np.testing.assert_allclose(p, p_ref, rtol=1e-12, atol=0)
    np.testing.assert_allclose(f, f_ref, rtol=1e-12, atol=0)


def test_sweep_end_points():
    pop = sample_asperities(mid_bounds_theta(), 100, K, seed=10)
    p, f = force_sweep(pop, [0.001, 300.0], K)
    assert p[1] == 0.0 and f[1] == 0.0
    assert p[0] > 0 and f[0] > 0


@given(st.integers(1, 400), st.integers(0, 2**32))
def test_sweep_is_non_increasing(n, seed):
    pop = sample_asperities(mid_bounds_theta(), n, K, seed=seed)
    p, f = force_sweep(pop, contact.delta_grid(), K)
    assert np.all(np.diff(p) <= 0) and np.all(np.diff(f) <= 0)
    assert np.all(p >= 0) and np.all(f >= 0)


def test_linear_interpolation_midpoint():
    law = extract_friction_law([0.0, 2.0], [0.0, 2.0], [1.0])
    assert law.f_values[0] == pytest.approx(1.0)
    assert not law.extrapolated


def test_extrapolation_flag_and_clamp():
    law = extract_friction_law([1.0, 2.0], [1.0, 3.0], [0.1, 1.5, 3.0])
    assert law.extrapolated
    np.testing.assert_allclose(law.f_values, [0.0, 2.0, 5.0])


def test_degenerate_law():
    with pytest.raises(DegenerateLawError):
        extract_friction_law([0.0, 0.0], [0.0, 0.0], [1.0])


def test_hertz_exponent_single_asperity():
    pop = one_asperity(h=250.0, r=400.0)
    deltas = contact.delta_grid()
    p_max = normal_force(pop, deltas[0])
    grid = contact.p_grid(128, 0.01 * p_max, 0.99 * p_max)
    law = extract_friction_law(*force_sweep(pop, deltas, K), grid, 1)
    a = 4.0 / 3.0 * K.e_star * math.sqrt(400.0) * 1e-6
    b = K.sigma_s * K.b_ratio * math.pi * 400.0 * 1e-6
    expected = b * (grid / a) ** (2.0 / 3.0)
    assert not law.extrapolated
    np.testing.assert_allclose(law.f_values[1:-1], expected[1:-1], rtol=0.01)


def test_reextraction_is_identical():
    pop = sample_asperities(mid_bounds_theta(), 400, K, seed=11)
    sweep = force_sweep(pop, contact.delta_grid(), K)
    a = extract_friction_law(*sweep, contact.p_grid())
    b = extract_friction_law(*sweep, contact.p_grid())
    np.testing.assert_array_equal(a.f_values, b.f_values)


@given(st.integers(0, 40), st.sampled_from([30, 100, 1000, 6000]), st.integers(0, 2**32))
def test_early_stop_path_equals_full_sweep(k, n, seed):
    th = GmmParams.from_vector(recipes(k, 1)[0])
    pop = sample_asperities(th, n, K, seed=seed)
    full = extract_friction_law(*force_sweep(pop, contact.delta_grid(), K), contact.p_grid(), n)
    fast = law_from_population(pop, K)
    np.testing.assert_array_equal(fast.f_values, full.f_values)
    assert fast.extrapolated == full.extrapolated


@given(st.integers(0, 200), st.sampled_from([30, 150, 2500]), st.integers(0, 2**32))
def test_law_is_non_decreasing(k, n, seed):
    law = simulate_law(GmmParams.from_vector(recipes(k, 1)[0]), n, K, seed)
    assert law.f_values.shape == (128,)
    assert np.all(np.diff(law.f_values) >= 0)
    assert np.all(law.f_values >= 0)


def test_csv_round_trip(tmp_path):
    law = simulate_law(mid_bounds_theta(), 200, K, 1)
    law.to_csv(tmp_path / "law.csv")
    back = FrictionLaw.from_csv(tmp_path / "law.csv", 200)
    np.testing.assert_array_equal(back.f_values, law.f_values)
    np.testing.assert_array_equal(back.p_grid, law.p_grid)
    resampled = FrictionLaw.from_csv(tmp_path / "law.csv", 200, grid=law.p_grid)
    np.testing.assert_allclose(resampled.f_values, law.f_values, rtol=1e-12)


# -- quadrature oracle ----------------------------------------------------

def test_quadrature_beyond_upper_bound_is_zero():
    assert theoretical_forces(mid_bounds_theta(), 100, 300.0) == (0.0, 0.0)


def test_quadrature_tight_component_limit():
    th = single_component(mu_h=150, mu_r=275, s_h=0.5, s_r=0.5)
    p, f = theoretical_forces(th, 10, 100.0, K)
    mean = AsperityPopulation([150.0] * 10, [275.0] * 10)
    assert p == pytest.approx(normal_force(mean, 100.0), rel=1e-3)
    assert f == pytest.approx(friction_force(mean, 100.0), rel=1e-3)


def test_monte_carlo_matches_quadrature():
    th = mid_bounds_theta()
    n = 100_000
    pop = sample_asperities(th, n, K, seed=12)
    for d in (100.0, 150.0):
        p, f = theoretical_forces(th, n, d, K)
        assert normal_force(pop, d) == pytest.approx(p, rel=0.01)
        assert friction_force(pop, d) == pytest.approx(f, rel=0.01)

"""Schedule construction, forward noising, reverse steps, and the Gaussian
log-density oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptdiff.schedule import (
    StateVector,
    add_noise,
    ancestral_step,
    build_schedule,
    gaussian_log_density,
)


def test_default_schedule_satisfies_invariants():
    s = build_schedule(T=100, beta_min=1e-4, beta_max=0.2)
    # independent oracle: direct product evaluation
    betas = np.linspace(1e-4, 0.2, 100)
    alpha_oracle = np.cumprod(1.0 - betas)
    np.testing.assert_allclose(s.alphas[1:], alpha_oracle, rtol=1e-14)
    assert s.alphas[0] == 1.0
    assert np.all(np.diff(s.alphas) < 0)
    assert s.alphas[100] < 2.5e-3
    assert np.all(s.sigmas[1:] > 0)
    snr = math.sqrt(s.alphas[100]) / math.sqrt(1 - s.alphas[100])
    assert snr < 0.05


def test_t2_hand_product():
    s = build_schedule(T=2, beta_min=0.5, beta_max=0.5)
    np.testing.assert_allclose(s.alphas, [1.0, 0.5, 0.25], rtol=0, atol=0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"T": 1},
        {"T": 0},
        {"T": 10, "beta_min": 0.0},
        {"T": 10, "beta_min": 0.2, "beta_max": 0.1},
        {"T": 10, "beta_min": 0.5, "beta_max": 1.0},
    ],
)
def test_build_schedule_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        build_schedule(**kwargs)


def test_add_noise_identity_at_t0(schedule):
    x0 = StateVector(values=np.array([1.5, -2.0]), timestep=0)
    eps = StateVector(values=np.array([0.7, 0.1]), timestep=0)
    out = add_noise(x0, eps, 0, schedule)
    np.testing.assert_array_equal(out.values, x0.values)
    assert out.timestep == 0


def test_add_noise_hand_value():
    # alpha_t = 0.25 after two steps of beta = 0.5
    s = build_schedule(T=2, beta_min=0.5, beta_max=0.5)
    x0 = StateVector(values=np.array([2.0]), timestep=0)
    eps = StateVector(values=np.array([1.0]), timestep=0)
    out = add_noise(x0, eps, 2, s)
    assert out.values[0] == pytest.approx(0.5 * 2.0 + math.sqrt(0.75) * 1.0, abs=1e-12)
    assert out.values[0] == pytest.approx(1.8660, abs=1e-4)
    assert out.timestep == 2


def test_add_noise_zero_retention_limit():
    s = build_schedule(T=60, beta_min=0.3, beta_max=0.3)
    x0 = StateVector(values=np.array([5.0, 5.0]), timestep=0)
    eps = StateVector(values=np.array([1.0, -1.0]), timestep=0)
    out = add_noise(x0, eps, 60, s)
    np.testing.assert_allclose(out.values, eps.values, atol=1e-3)


def test_add_noise_rejects_out_of_range(schedule):
    x0 = StateVector(values=np.zeros(2), timestep=0)
    with pytest.raises(ValueError):
        add_noise(x0, x0, schedule.num_steps + 1, schedule)
    with pytest.raises(ValueError):
        add_noise(x0, x0, -1, schedule)


@settings(max_examples=25, deadline=None)
@given(t=st.integers(min_value=1, max_value=20))
def test_add_noise_is_affine_with_schedule_coefficients(t):
    # round-trip SNR property: coefficients recovered from probe inputs
    s = build_schedule(T=20, beta_min=1e-3, beta_max=0.35)
    zero = StateVector(values=np.zeros(2), timestep=0)
    ex = StateVector(values=np.array([1.0, 0.0]), timestep=0)
    coef_x0 = add_noise(ex, zero, t, s).values[0]
    coef_eps = add_noise(zero, ex, t, s).values[0]
    assert coef_x0 == pytest.approx(math.sqrt(s.alphas[t]), rel=1e-14)
    assert coef_eps == pytest.approx(math.sqrt(1 - s.alphas[t]), rel=1e-14)
    x0 = StateVector(values=np.array([0.3, -0.7]), timestep=0)
    eps = StateVector(values=np.array([1.1, 0.4]), timestep=0)
    out = add_noise(x0, eps, t, s)
    np.testing.assert_allclose(
        out.values, coef_x0 * x0.values + coef_eps * eps.values, rtol=1e-14
    )


def test_ancestral_step_zero_noise_returns_mean(schedule):
    mean = StateVector(values=np.array([0.4, -0.2]), timestep=5)
    noise = StateVector(values=np.zeros(2), timestep=0)
    out = ancestral_step(mean, 5, noise, schedule)
    np.testing.assert_array_equal(out.values, mean.values)
    assert out.timestep == 4


def test_ancestral_step_scales_noise_by_sigma(schedule):
    t = 7
    mean = StateVector(values=np.zeros(2), timestep=t)
    noise = StateVector(values=np.array([1.0, -1.0]), timestep=0)
    out = ancestral_step(mean, t, noise, schedule)
    np.testing.assert_allclose(out.values, schedule.sigmas[t] * noise.values, rtol=1e-15)


def test_final_step_is_deterministic(schedule):
    mean = StateVector(values=np.array([0.9, 0.1]), timestep=1)
    noise = StateVector(values=np.array([5.0, -5.0]), timestep=0)
    out = ancestral_step(mean, 1, noise, schedule)
    np.testing.assert_array_equal(out.values, mean.values)
    assert out.timestep == 0


def test_ancestral_step_rejects_out_of_range(schedule):
    mean = StateVector(values=np.zeros(2), timestep=0)
    with pytest.raises(ValueError):
        ancestral_step(mean, 0, mean, schedule)
    with pytest.raises(ValueError):
        ancestral_step(mean, schedule.num_steps + 1, mean, schedule)


def test_gaussian_log_density_closed_form():
    x = np.array([0.0])
    assert gaussian_log_density(x, x, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gaussian_log_density(np.array([1.0]), np.array([0.0]), 1.0) == pytest.approx(
        -0.9189385332046727 - 0.5, abs=1e-10
    )


def test_gaussian_log_density_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_log_density(np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        gaussian_log_density(np.zeros(2), np.zeros(2), -1.0)


def test_gaussian_log_density_matches_scipy():
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(0)
    for _ in range(20):
        d = int(rng.integers(1, 5))
        x = rng.standard_normal(d)
        m = rng.standard_normal(d)
        sigma = float(rng.uniform(0.1, 3.0))
        ours = gaussian_log_density(x, m, sigma)
        ref = multivariate_normal(mean=m, cov=sigma**2 * np.eye(d)).logpdf(x)
        assert ours == pytest.approx(ref, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    t=st.integers(min_value=1, max_value=20),
    data=st.lists(st.floats(-3, 3), min_size=6, max_size=6),
)
def test_density_difference_cancellation(t, data):
    # the cancellation behind the implicit-classifier closed form
    s = build_schedule(T=20, beta_min=1e-3, beta_max=0.35)
    x = np.array(data[:2])
    m1 = np.array(data[2:4])
    m2 = np.array(data[4:6])
    sigma = float(s.sigmas[t])
    lhs = gaussian_log_density(x, m1, sigma) - gaussian_log_density(x, m2, sigma)
    rhs = (np.sum((x - m2) ** 2) - np.sum((x - m1) ** 2)) / (2 * sigma**2)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

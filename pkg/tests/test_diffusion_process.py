import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from sgmlab.diffusion_process import (
    BetaSchedule,
    estimate_kl_to_gaussian,
    gaussian_kl,
    gaussian_log_density,
    kl_bound_to_gaussian,
    kl_validity_time,
    marginal_params,
    mixture_log_density,
    sample_forward,
)
from sgmlab.measure_ot import DiscreteMeasure

schedules = st.one_of(
    st.builds(BetaSchedule, st.just("constant"), st.floats(0.1, 5.0)),
    st.builds(BetaSchedule, st.just("affine"), st.floats(0.2, 2.0), st.floats(0.0, 0.5), st.just(20.0)),
    st.lists(st.floats(0.2, 3.0), min_size=3, max_size=6).map(
        lambda v: BetaSchedule("tabulated", times=tuple(np.linspace(0, 10, len(v))), values=tuple(v))
    ),
)
times = st.floats(0.0, 15.0)


# --- schedules


def test_schedule_validation():
    with pytest.raises(ValueError):
        BetaSchedule("constant", 0.0)
    with pytest.raises(ValueError):
        BetaSchedule("affine", 1.0, 0.1)
    with pytest.raises(ValueError):
        BetaSchedule("affine", 1.0, -1.0, 5.0)
    with pytest.raises(ValueError):
        BetaSchedule("tabulated", times=(0.0, 0.0), values=(1.0, 1.0))
    with pytest.raises(ValueError):
        BetaSchedule("tabulated", times=(0.5, 1.0), values=(1.0, 1.0))
    with pytest.raises(ValueError):
        BetaSchedule("cosine")


def test_affine_beyond_horizon_rejected():
    sched = BetaSchedule("affine", 1.0, 0.1, 5.0)
    with pytest.raises(ValueError):
        sched.beta(6.0)


@settings(max_examples=60, deadline=None)
@given(schedules)
def test_beta_within_bounds_on_audit_grid(sched):
    grid = np.linspace(0, 15, 1501)
    values = sched.beta(grid)
    assert np.all(values >= sched.beta_lower - 1e-12)
    assert np.all(values <= sched.beta_upper + 1e-12)
    assert sched.beta_lower > 0


@settings(max_examples=80, deadline=None)
@given(schedules, times, times, times)
def test_integral_additive(sched, a, b, c):
    s, t, u = sorted((a, b, c))
    assert sched.integral(s, t) + sched.integral(t, u) == pytest.approx(sched.integral(s, u), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(schedules, st.floats(0.0, 14.0), st.floats(0.01, 1.0))
def test_integral_matches_quadrature(sched, s, width):
    ref = integrate.quad(lambda v: float(sched.beta(v)), s, s + width, epsabs=1e-12)[0]
    assert sched.integral(s, s + width) == pytest.approx(ref, abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(schedules, times, times)
def test_marginal_identities(sched, a, b):
    s, t = sorted((a, b))
    mp = marginal_params(sched, s, t)
    assert mp.m**2 + mp.sigma2 == pytest.approx(1.0, abs=1e-12)
    later = marginal_params(sched, s, t + 0.5)
    assert later.m < mp.m


def test_marginal_closed_forms():
    sched = BetaSchedule()
    mp = marginal_params(sched, 0.0, math.log(2))
    assert mp.m == pytest.approx(0.5, abs=1e-15)
    assert mp.sigma2 == pytest.approx(0.75, abs=1e-15)
    same = marginal_params(sched, 1.3, 1.3)
    assert same.m == 1.0 and same.sigma2 == 0.0
    with pytest.raises(ValueError):
        marginal_params(sched, 2.0, 1.0)


def test_tabulated_matches_constant_with_equal_integral():
    table = BetaSchedule("tabulated", times=(0.0, 1.0, 2.0, 4.0), values=(1.5, 1.5, 1.5, 1.5))
    const = BetaSchedule("constant", 1.5)
    for t in (0.1, 0.9, 2.5, 7.0):
        a, b = marginal_params(table, 0.0, t), marginal_params(const, 0.0, t)
        assert a.m == pytest.approx(b.m, abs=1e-9)
        assert a.sigma2 == pytest.approx(b.sigma2, abs=1e-9)


def test_tabulated_holds_last_value():
    table = BetaSchedule("tabulated", times=(0.0, 1.0), values=(1.0, 2.0))
    assert table.beta(5.0) == pytest.approx(2.0)
    assert table.integral(1.0, 3.0) == pytest.approx(4.0)


# --- forward sampling


def test_forward_at_zero_resamples_atoms():
    mu = DiscreteMeasure.uniform([[1.0, 2.0], [-3.0, 0.5]])
    x = sample_forward(mu, BetaSchedule(), 0.0, 200, 0)
    assert all(any(np.array_equal(row, a) for a in mu.points) for row in x)


def test_forward_point_mass_variance():
    sched = BetaSchedule()
    t = 0.4
    mu = DiscreteMeasure.uniform([[0.0, 0.0, 0.0]])
    n = 20000
    x = sample_forward(mu, sched, t, n, 1)
    s2 = marginal_params(sched, 0.0, t).sigma2
    # the variance of a chi-square(1) estimate scales like 2 s2^2 / n
    se = math.sqrt(2 * s2**2 / (n - 1))
    assert np.all(np.abs(x.var(axis=0, ddof=1) - s2) <= 5 * se)


def test_forward_large_time_is_standard_normal():
    sched = BetaSchedule()
    mu = DiscreteMeasure.uniform([[5.0, -5.0]])
    x = sample_forward(mu, sched, 25.0, 20000, 2)
    assert marginal_params(sched, 0.0, 25.0).m < 1e-8
    assert np.all(np.abs(x.mean(axis=0)) <= 5 / math.sqrt(20000))


# --- KL


def test_gaussian_kl_values():
    assert gaussian_kl([0.0, 0.0], 1.0, 2) == 0.0
    assert gaussian_kl([1.0], 1.0, 1) == pytest.approx(0.5)
    # [DERIVED] 0.5 * (2*0.5 - 2 - 2 log 0.5) = 0.5 - 1 + log 2
    assert gaussian_kl([0.0, 0.0], 0.5, 2) == pytest.approx(0.19314718055994531)


def test_gaussian_kl_against_integration():
    mean, s2 = 0.7, 0.3

    def integrand(x):
        logp = -0.5 * (x - mean) ** 2 / s2 - 0.5 * math.log(2 * math.pi * s2)
        logq = -0.5 * x * x - 0.5 * math.log(2 * math.pi)
        return math.exp(logp) * (logp - logq)

    ref = integrate.quad(integrand, -12, 12, epsabs=1e-13)[0]
    assert gaussian_kl([mean], s2, 1) == pytest.approx(ref, abs=1e-10)


def test_kl_bound_hand_value():
    # [DERIVED] exp(-2 log 2) * (2 + 0)
    mu = DiscreteMeasure.uniform([[0.0, 0.0]])
    assert kl_bound_to_gaussian(mu, BetaSchedule(), math.log(2)) == pytest.approx(0.5)


def test_kl_bound_window_and_monotonicity():
    mu = DiscreteMeasure.uniform([[1.0, 0.0], [0.0, 2.0]])
    sched = BetaSchedule("constant", 2.0)
    with pytest.raises(ValueError):
        kl_bound_to_gaussian(mu, sched, 0.5 * kl_validity_time(sched))
    ts = np.linspace(kl_validity_time(sched), 5, 20)
    vals = [kl_bound_to_gaussian(mu, sched, t) for t in ts]
    assert all(b < a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_kl_estimate_below_bound(seed):
    rng = np.random.default_rng(seed)
    D = int(rng.integers(1, 4))
    mu = DiscreteMeasure.uniform(rng.normal(scale=1.5, size=(int(rng.integers(1, 10)), D)))
    sched = BetaSchedule("constant", float(rng.uniform(0.5, 2.0)))
    t = kl_validity_time(sched) * float(rng.uniform(1, 3))
    est, se = estimate_kl_to_gaussian(mu, sched, t, 100_000, rng)
    assert est <= kl_bound_to_gaussian(mu, sched, t) + 3 * se


def test_kl_estimate_matches_closed_form_for_point_mass():
    sched = BetaSchedule()
    mu = DiscreteMeasure.uniform([[1.0, -1.0]])
    t = 0.8
    mp = marginal_params(sched, 0.0, t)
    exact = gaussian_kl(mp.m * mu.points[0], mp.sigma2, 2)
    est, se = estimate_kl_to_gaussian(mu, sched, t, 100_000, 3)
    assert abs(est - exact) <= 4 * se


# --- mixture density


def test_single_atom_density_is_gaussian():
    sched = BetaSchedule()
    t = 0.6
    mp = marginal_params(sched, 0.0, t)
    mu = DiscreteMeasure.uniform([[0.0, 0.0]])
    x = np.array([[0.3, -1.2], [2.0, 0.1]])
    expect = -0.5 * (x**2).sum(axis=1) / mp.sigma2 - math.log(2 * math.pi * mp.sigma2)
    np.testing.assert_allclose(mixture_log_density(mu, sched, t, x), expect, rtol=1e-13)


def test_symmetric_atoms_at_origin():
    # [DERIVED] both components sit at distance m a from 0 and share the value
    sched = BetaSchedule()
    t, a = 0.7, 1.3
    mp = marginal_params(sched, 0.0, t)
    mu = DiscreteMeasure.uniform([[-a], [a]])
    single = -0.5 * (mp.m * a) ** 2 / mp.sigma2 - 0.5 * math.log(2 * math.pi * mp.sigma2)
    assert mixture_log_density(mu, sched, t, np.array([0.0])) == pytest.approx(single, rel=1e-13)


def test_density_integrates_to_one():
    sched = BetaSchedule()
    mu = DiscreteMeasure.uniform(np.random.default_rng(4).normal(size=(5, 2)))
    t = 0.3
    rng = np.random.default_rng(5)
    # importance sampling with a wide Gaussian proposal
    scale = 3.0
    x = rng.normal(scale=scale, size=(200_000, 2))
    log_prop = gaussian_log_density(x / scale) - 2 * math.log(scale)
    ratio = np.exp(mixture_log_density(mu, sched, t, x) - log_prop)
    assert abs(ratio.mean() - 1) <= 3 * ratio.std(ddof=1) / math.sqrt(x.shape[0])


def test_density_stable_at_small_noise():
    sched = BetaSchedule()
    mu = DiscreteMeasure.uniform([[1e3, 0.0], [1e3 + 1e-3, 0.0]])
    t = 1e-7
    val = mixture_log_density(mu, sched, t, np.array([1e3, 0.0]))
    assert np.isfinite(val)

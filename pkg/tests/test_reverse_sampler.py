import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgmlab.diffusion_process import BetaSchedule, marginal_params
from sgmlab.measure_ot import DiscreteMeasure, MomentSummary, moments, wasserstein_p_exact
from sgmlab.reverse_sampler import (
    HyperParams,
    SamplerConfig,
    build_partition,
    config_from_hyperparams,
    discretization_constant,
    discretization_error_sum,
    gaussian_abs_moment,
    reverse_step,
    sample_reverse,
    select_hyperparams,
    step_integrals,
    truncate,
)
from sgmlab.score_oracle import ExactScore, StandardGaussianScore, ZeroScore

SCHED = BetaSchedule()
UNIT4, UNIT2 = MomentSummary(4.0, 1.0, 1.0), MomentSummary(2.0, 1.0, 1.0)

partition_args = st.tuples(st.floats(1e-4, 0.9), st.floats(1e-3, 1.0), st.floats(1.0, 12.0))


# --- partition


def test_single_unit_step():
    part = build_partition(2.0, 1.0, 1.0)
    np.testing.assert_array_equal(part.forward_knots, [1.0, 2.0])
    assert part.N == 1
    np.testing.assert_array_equal(part.reverse_knots, [0.0, 1.0])


def test_geometric_phase_count():
    # [DERIVED] 3^-4 * 1.5^i < 1 exactly for i = 0..10
    part = build_partition(2.0, 3.0**-4, 0.5)
    assert int(np.sum(part.forward_knots < 1)) == 11


def test_partition_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_partition(1.0, 2.0, 0.5)
    with pytest.raises(ValueError):
        build_partition(1.0, 0.1, 0.0)
    with pytest.raises(ValueError):
        build_partition(1.0, 0.1, 1.5)


@settings(max_examples=100, deadline=None)
@given(partition_args)
def test_partition_structure(args):
    delta0, kappa, T = args
    part = build_partition(T, delta0, kappa)
    k = part.forward_knots
    assert k[0] == delta0 and k[-1] == T
    assert np.all(np.diff(k) > 0)
    np.testing.assert_allclose(np.diff(k)[:-1], kappa * np.minimum(k[:-2], 1.0), rtol=1e-12)
    assert part.reverse_knots[0] == 0.0
    assert part.reverse_knots[-1] == pytest.approx(T - delta0)
    assert part.N <= part.count_bound()
    q = part.query_times()
    assert q.size == part.N and q[0] == T and q[-1] > delta0 - 1e-15


@settings(max_examples=100, deadline=None)
@given(partition_args, st.floats(0.3, 3.0))
def test_discretization_sum_within_bound(args, beta):
    delta0, kappa, T = args
    total, bound = discretization_error_sum(build_partition(T, delta0, kappa), BetaSchedule("constant", beta))
    assert 0 < total <= bound


def test_discretization_single_step_value():
    # [DERIVED] h = 1, sigma^2(1) = 1 - e^-2
    total, _ = discretization_error_sum(build_partition(2.0, 1.0, 1.0), SCHED)
    assert total == pytest.approx(1 / (1 - math.exp(-2)) ** 2, rel=1e-12)


def test_discretization_sum_near_linear_in_kappa():
    a, _ = discretization_error_sum(build_partition(4.0, 0.01, 0.1), SCHED)
    b, _ = discretization_error_sum(build_partition(4.0, 0.01, 0.05), SCHED)
    assert 0.3 <= b / a <= 0.7


def test_discretization_constant_value():
    # [DERIVED] (1 + 1/log 2) / (1 - e^-1)^2 for beta_lower = 1
    assert discretization_constant(SCHED) == pytest.approx((1 + 1 / math.log(2)) / (1 - math.exp(-1)) ** 2)


# --- single steps


def test_zero_length_step_is_identity():
    y = np.array([[0.3, -2.0]])
    np.testing.assert_array_equal(reverse_step(y, 0.0, np.ones_like(y), np.ones_like(y)), y)


def test_hand_step():
    # [DERIVED] y = 1, A = log 2, s = 0: 1 + (2 - 1)(1 + 0) + z sqrt(3)
    out = reverse_step(np.array([1.0]), math.log(2), np.array([0.0]), np.array([0.5]))
    assert out[0] == pytest.approx(2 + 0.5 * math.sqrt(3), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 2.0))
def test_gaussian_score_step_variance_inflation(A):
    # drift (e^A - 1)(y - 2y) leaves 2 - e^A times y; noise variance e^2A - 1
    var = (2 - math.exp(A)) ** 2 + math.expm1(2 * A)
    y = np.array([1.0])
    mean_coef = reverse_step(y, A, -y, np.array([0.0]))[0]
    assert mean_coef == pytest.approx(2 - math.exp(A), rel=1e-12)
    # one step inflates the unit variance by 2 (e^A - 1)^2, second order in the step
    assert var >= 1.0 - 1e-12
    assert var - 1 == pytest.approx(2 * math.expm1(A) ** 2, rel=1e-9, abs=1e-15)


def test_step_integrals_sum_to_horizon():
    part = build_partition(3.0, 0.05, 0.2)
    A = step_integrals(part, BetaSchedule("constant", 1.5))
    assert A.sum() == pytest.approx(1.5 * (3.0 - 0.05), rel=1e-12)


# --- full chains


def _config(T=3.0, delta0=0.05, kappa=0.1, seed=0, **kw):
    return SamplerConfig(SCHED, build_partition(T, delta0, kappa), 10.0, rng_seed=seed, **kw)


def test_sampler_is_reproducible_and_thread_invariant():
    mu = DiscreteMeasure.uniform(np.random.default_rng(0).normal(size=(6, 2)))
    score = ExactScore(mu, SCHED)
    a = sample_reverse(2, score, _config(seed=3, block_size=64), 300).points
    b = sample_reverse(2, score, _config(seed=3, block_size=64, threads=4), 300).points
    c = sample_reverse(2, score, _config(seed=4, block_size=64), 300).points
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sampler_rejects_empty_output():
    with pytest.raises(ValueError):
        sample_reverse(2, ZeroScore(), _config(), 0)


def test_sampler_wraps_score_failures():
    def broken(x, t):
        raise FloatingPointError("boom")

    with pytest.raises(RuntimeError, match="reverse step 0"):
        sample_reverse(1, broken, _config(), 5)


def test_point_mass_terminal_moments():
    x0 = np.array([[0.7, -0.3]])
    mu = DiscreteMeasure.uniform(x0)
    hp = select_hyperparams(256, 3.0, 1.0, 4.0, moments(mu, 4.0), moments(mu, 2.0), 2, SCHED)
    cfg = config_from_hyperparams(hp, SCHED, rng_seed=5)
    out = sample_reverse(2, ExactScore(mu, SCHED), cfg, 10_000).points
    mp = marginal_params(SCHED, 0.0, hp.delta0)
    se_mean = math.sqrt(mp.sigma2 / out.shape[0])
    se_var = mp.sigma2 * math.sqrt(2 / (out.shape[0] - 1))
    assert np.all(np.abs(out.mean(axis=0) - mp.m * x0[0]) <= 5 * se_mean)
    assert np.all(np.abs(out.var(axis=0, ddof=1) - mp.sigma2) <= 5 * se_var)
    # terminal W2 to the point mass stays within 3 sigma sqrt(D)
    w2 = math.sqrt(np.mean(np.sum((out - x0) ** 2, axis=1)))
    assert w2 <= 3 * math.sqrt(mp.sigma2) * math.sqrt(2)


def test_gaussian_score_keeps_standard_normal():
    cfg = _config(T=4.0, delta0=0.01, kappa=0.02, seed=6)
    out = sample_reverse(3, StandardGaussianScore(), cfg, 10_000).points
    n = out.shape[0]
    assert np.all(np.abs(out.mean(axis=0)) <= 5 / math.sqrt(n))
    assert np.all(np.abs(out.var(axis=0, ddof=1) - 1) <= 5 * math.sqrt(2 / (n - 1)))


def test_two_atom_generous_budget():
    rng = np.random.default_rng(7)
    sep = 2.0
    atoms = np.array([[-sep / 2, 0.0], [sep / 2, 0.0]])
    mu = DiscreteMeasure.uniform(atoms)
    cfg = SamplerConfig(SCHED, build_partition(8.0, 1e-3, 0.05), 10.0, rng_seed=8)
    out = sample_reverse(2, ExactScore(mu, SCHED), cfg, 4000)
    fresh = DiscreteMeasure.uniform(atoms[rng.integers(0, 2, size=4000)])
    assert wasserstein_p_exact(out, fresh, 1)[0] <= 0.1 * sep


# --- truncation and hyperparameters


def test_truncation_cases():
    mu = DiscreteMeasure.uniform([[0.5, -0.5], [2.0, 0.0], [0.1, -3.0]])
    out = truncate(mu, 1.0)
    np.testing.assert_array_equal(out.points, [[0.5, -0.5], [0.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(out.weights, mu.weights)
    inside = truncate(mu, 5.0)
    np.testing.assert_array_equal(inside.points, mu.points)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_truncation_support(seed, R):
    pts = np.random.default_rng(seed).normal(scale=3, size=(50, 3))
    out = truncate(DiscreteMeasure.uniform(pts), R)
    sup = np.abs(out.points).max(axis=1)
    assert np.all((sup <= R) | (sup == 0))
    assert out.weights.sum() == pytest.approx(1.0)


def test_gaussian_abs_moment_values():
    # [DERIVED] E||Z||^2 = D; E|Z| = sqrt(2/pi) in one dimension
    assert gaussian_abs_moment(2.0, 5) == pytest.approx(5.0)
    assert gaussian_abs_moment(1.0, 1) == pytest.approx(math.sqrt(2 / math.pi))
    assert gaussian_abs_moment(4.0, 2) == pytest.approx(8.0)


def test_hyperparams_reference_values():
    hp = select_hyperparams(256, 4.0, 1.0, 4.0, UNIT4, UNIT2, 2, SCHED)
    # start offset n^(-2/d)
    assert hp.delta0 == pytest.approx(0.0625)
    # [DERIVED] n^(-2(1 + p(q-p)) / (d p (q-p))) = 256^(-2/3)
    assert hp.kappa == pytest.approx(256 ** (-2 / 3))
    # [DERIVED] mass = 1 + E||Z||^4 = 9 and R = 2 * 256^(1/12) * 9^(1/3)
    assert hp.R == pytest.approx(2 * 256 ** (1 / 12) * 9 ** (1 / 3))
    # [DERIVED] term-by-term: log(256)/3 + log(2)/2 + log(9)/3 + log(3)/2 + log 2
    assert hp.T == pytest.approx(4.1698275891125665, abs=1e-12)


def test_kappa_ratio_under_doubling():
    a = select_hyperparams(300, 5.0, 1.0, 3.0, MomentSummary(3.0, 1.0, 1.0), UNIT2, 2, SCHED)
    b = select_hyperparams(600, 5.0, 1.0, 3.0, MomentSummary(3.0, 1.0, 1.0), UNIT2, 2, SCHED)
    assert b.kappa / a.kappa == pytest.approx(2 ** (-2 * (1 + 2) / (5 * 2)), rel=1e-12)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        select_hyperparams(256, 2.0, 1.0, 4.0, UNIT4, UNIT2, 2, SCHED)
    with pytest.raises(ValueError):
        select_hyperparams(256, 4.0, 1.0, 4.0, UNIT2, UNIT2, 2, SCHED)
    with pytest.raises(ValueError):
        HyperParams(1.0, 1.0, 0.1, 0.1, 3.0, 2.0, 1.0, 10)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 10**6), st.floats(2.5, 10), st.floats(1.5, 10))
def test_hyperparams_trends(n, d, q):
    m_q, m_2 = MomentSummary(q, 1.2, 2.0), MomentSummary(2.0, 1.1, 2.0)
    small = select_hyperparams(n, d, 1.0, q, m_q, m_2, 3, SCHED)
    big = select_hyperparams(4 * n, d, 1.0, q, m_q, m_2, 3, SCHED)
    assert big.T > small.T and big.R > small.R
    assert big.delta0 < small.delta0 and big.kappa <= small.kappa
    assert 0 < small.kappa <= 1 and small.delta0 < small.T

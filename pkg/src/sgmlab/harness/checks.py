"""Seeded numerical checks of the library's identities, bounds and rates.

Each check returns a CheckResult; the ``checks`` command and the acceptance
tests both run these.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from ..diffusion_process import (
    BetaSchedule,
    estimate_kl_to_gaussian,
    kl_bound_to_gaussian,
    kl_validity_time,
    marginal_params,
    mixture_log_density,
)
from ..dimension import default_epsilon_grid, fit_minkowski_dimension, fit_wasserstein_pq_dimension
from ..measure_ot import (
    DiscreteMeasure,
    moments,
    multiscale_wp_upper_bound,
    wasserstein_p_bruteforce,
    wasserstein_p_exact,
)
from ..reverse_sampler import (
    build_partition,
    config_from_hyperparams,
    discretization_error_sum,
    sample_reverse,
    select_hyperparams,
    truncate,
)
from ..score_model import (
    MlpParams,
    SharedMlpScore,
    TrainConfig,
    draw_mc_batch,
    shared_loss_and_grad,
    train,
)
from ..score_oracle import ExactScore, StandardGaussianScore, ZeroScore, hessian_exact, score_exact, verify_denoising_identity
from . import generators
from .config import ExperimentConfig
from .experiments import RunRecord, run_emp_rate, run_pipeline_rate, mean_by_n


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        res = fn(*args, **kwargs)
        return CheckResult(res.name, res.passed, res.value, res.threshold, res.detail, time.perf_counter() - start)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------


@_timed
def check_ot_oracle(instances: int = 200, seed: int = 0) -> CheckResult:
    """Exact solver against permutation enumeration on small uniform instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 7))
        D = int(rng.integers(1, 4))
        p = int(rng.choice([1, 2, 3]))
        a = DiscreteMeasure.uniform(rng.normal(size=(n, D)))
        b = DiscreteMeasure.uniform(rng.normal(size=(n, D)))
        worst = max(worst, abs(wasserstein_p_exact(a, b, p)[0] - wasserstein_p_bruteforce(a, b, p)))
    return CheckResult("ot_oracle", worst <= 1e-9, worst, 1e-9, f"max |exact - brute force| = {worst:.2e} over {instances} instances")


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _random_mixture(rng, atoms: int, D: int) -> DiscreteMeasure:
    w = rng.uniform(0.2, 1.0, size=atoms)
    return DiscreteMeasure(rng.normal(size=(atoms, D)), w / w.sum())


@_timed
def check_score_derivatives(points: int = 100, seed: int = 0) -> CheckResult:
    """Score vs central differences of the log density; Hessian vs central differences of the score."""
    rng = np.random.default_rng(seed)
    schedule = BetaSchedule()
    worst_score = worst_hess = 0.0
    for _ in range(points):
        D = int(rng.integers(1, 4))
        mu = _random_mixture(rng, 5, D)
        t = float(np.exp(rng.uniform(np.log(0.05), np.log(3.0))))
        m = marginal_params(schedule, 0.0, t)
        x = m.m * mu.points[rng.integers(mu.size)] + math.sqrt(m.sigma2) * rng.normal(size=D)
        h = 1e-4 * (1 + np.linalg.norm(x))
        fd = np.empty(D)
        jac = np.empty((D, D))
        for k in range(D):
            e = np.zeros(D)
            e[k] = h
            fd[k] = (mixture_log_density(mu, schedule, t, x + e) - mixture_log_density(mu, schedule, t, x - e)) / (2 * h)
            jac[:, k] = (score_exact(mu, schedule, t, x + e).score - score_exact(mu, schedule, t, x - e).score) / (2 * h)
        worst_score = max(worst_score, _rel(fd, score_exact(mu, schedule, t, x).score))
        worst_hess = max(worst_hess, _rel(jac, hessian_exact(mu, schedule, t, x)))
    ok = worst_score <= 1e-5 and worst_hess <= 1e-4
    return CheckResult(
        "score_derivatives", ok, max(worst_score / 1e-5, worst_hess / 1e-4), 1.0,
        f"score rel err {worst_score:.2e} (<= 1e-5), Hessian rel err {worst_hess:.2e} (<= 1e-4) over {points} points",
    )


class _Shifted:
    def __init__(self, base, shift):
        self.base, self.shift = base, shift

    def __call__(self, x, t):
        return self.base(x, t) + self.shift


@_timed
def check_denoising_identity(samples: int = 100_000, seed: int = 0, times=(0.05, 0.5, 2.0), extra_corrupted: bool = False) -> CheckResult:
    """Both sides of the explicit/denoising score-matching identity for several score functions."""
    rng = np.random.default_rng(seed)
    schedule = BetaSchedule()
    mu = _random_mixture(rng, 6, 2)
    mlp = SharedMlpScore(MlpParams.init(SharedMlpScore.layer_sizes(2, 16, 2), rng), schedule)
    scores = {"exact": ExactScore(mu, schedule), "zero": ZeroScore(), "random_mlp": mlp}
    if extra_corrupted:
        scores["exact_plus_0.5"] = _Shifted(ExactScore(mu, schedule), 0.5)
    worst = 0.0
    parts = []
    for name, fn in scores.items():
        for t in times:
            lhs, rhs, se = verify_denoising_identity(mu, schedule, t, fn, samples, rng)
            z = abs(lhs - rhs) / se if se > 0 else (0.0 if lhs == rhs else math.inf)
            worst = max(worst, z)
            parts.append(f"{name}@{t:g}:{z:.2f}")
    return CheckResult("denoising_identity", worst <= 3.0, worst, 3.0, f"max |lhs - rhs| / stderr = {worst:.2f} (<= 3); " + " ".join(parts))


@_timed
def check_kl_bound(configs: int = 10, samples: int = 100_000, seed: int = 0) -> CheckResult:
    """Monte Carlo KL to N(0, I) against exp(-2 beta_lower t)(D + M_2^2)."""
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for k in range(configs):
        D = int(rng.integers(1, 5))
        mu = DiscreteMeasure.uniform(rng.normal(scale=rng.uniform(0.5, 2.0), size=(int(rng.integers(1, 20)), D)))
        if k % 2 == 0:
            schedule = BetaSchedule("constant", float(rng.uniform(0.5, 2.0)))
        else:
            schedule = BetaSchedule("affine", float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 0.5)), 20.0)
        t = kl_validity_time(schedule) * float(rng.uniform(1.0, 4.0))
        est, se = estimate_kl_to_gaussian(mu, schedule, t, samples, rng)
        bound = kl_bound_to_gaussian(mu, schedule, t)
        worst = max(worst, (est - bound) / se if se > 0 else est - bound)
    return CheckResult("kl_bound", worst <= 3.0, worst, 3.0, f"max (KL estimate - bound) / stderr = {worst:.2f} (<= 3) over {configs} configs")


@_timed
def check_partition_bounds() -> CheckResult:
    """Knot count and discretization sum bounds over a 3x3x3 sweep of (delta0, kappa, T)."""
    schedule = BetaSchedule()
    worst_count = worst_sum = -math.inf
    recursion = 0.0
    for delta0 in (1e-3, 1e-2, 0.1):
        for kappa in (0.01, 0.1, 0.5):
            for T in (1.0, 4.0, 10.0):
                part = build_partition(T, delta0, kappa)
                worst_count = max(worst_count, part.N - part.count_bound())
                total, bound = discretization_error_sum(part, schedule)
                worst_sum = max(worst_sum, total / bound)
                k = part.forward_knots
                recursion = max(recursion, float(np.max(np.abs(np.diff(k)[:-1] - kappa * np.minimum(k[:-2], 1.0)))))
    ok = worst_count <= 0 and worst_sum <= 1 and recursion <= 1e-12
    return CheckResult(
        "partition_bounds", ok, worst_sum, 1.0,
        f"max N - bound = {worst_count:.2f} (<= 0), max sum/bound = {worst_sum:.3f} (<= 1), recursion err {recursion:.1e}",
    )


def _moment_z(sample: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Largest |z|-score of the sample mean and covariance entries against Gaussian targets."""
    N = sample.shape[0]
    se_mean = np.sqrt(np.diag(cov) / N)
    z_mean = np.abs(sample.mean(axis=0) - mean) / se_mean
    emp = np.cov(sample, rowvar=False).reshape(cov.shape)
    var = np.diag(cov)
    se_cov = np.sqrt((np.outer(var, var) + cov**2) / (N - 1))
    z_cov = np.abs(emp - cov) / se_cov
    return float(max(z_mean.max(), z_cov.max()))


@_timed
def check_linear_gaussian(n: int = 256, particles: int = 10_000, seed: int = 0, d_proxy: float = 3.0) -> CheckResult:
    """Reverse chain on a point mass ends at N(m x0, sigma^2 I); the Gaussian score keeps N(0, I)."""
    schedule = BetaSchedule()
    D = 2
    x0 = np.array([[0.7, -0.3]])
    mu = DiscreteMeasure.uniform(x0)
    hp = select_hyperparams(n, d_proxy, 1.0, 4.0, moments(mu, 4.0), moments(mu, 2.0), D, schedule)
    cfg = config_from_hyperparams(hp, schedule, rng_seed=seed)
    mp = marginal_params(schedule, 0.0, hp.delta0)
    out = sample_reverse(D, ExactScore(mu, schedule), cfg, particles).points
    z_point = _moment_z(out, mp.m * x0[0], mp.sigma2 * np.eye(D))
    cfg2 = config_from_hyperparams(hp, schedule, rng_seed=seed + 1)
    out2 = sample_reverse(D, StandardGaussianScore(), cfg2, particles).points
    z_stat = _moment_z(out2, np.zeros(D), np.eye(D))
    worst = max(z_point, z_stat)
    return CheckResult(
        "linear_gaussian", worst <= 5.0, worst, 5.0,
        f"point-mass max z = {z_point:.2f}, stationarity max z = {z_stat:.2f} (<= 5), {cfg.partition.N} steps",
    )


@_timed
def check_multiscale_bound(instances: int = 200, seed: int = 0) -> CheckResult:
    """Grid-coupling bound is never below the exact W_p^p."""
    rng = np.random.default_rng(seed)
    worst = math.inf
    for _ in range(instances):
        n = int(rng.integers(1, 8))
        D = int(rng.integers(1, 4))
        p = float(rng.choice([1.0, 2.0, 3.0]))
        a = DiscreteMeasure.uniform(rng.uniform(size=(n, D)))
        b = DiscreteMeasure.uniform(rng.uniform(size=(int(rng.integers(1, 8)), D)))
        s = int(rng.integers(0, 3))
        t = s + int(rng.integers(0, 4))
        gap = multiscale_wp_upper_bound(a, b, p, s, t) - wasserstein_p_exact(a, b, p)[1].cost_p
        worst = min(worst, gap)
    return CheckResult("multiscale_bound", worst >= -1e-12, worst, 0.0, f"min (bound - exact W_p^p) = {worst:.3e} over {instances} instances")


def gradient_check(seed: int = 0) -> float:
    """Max relative error of backprop gradients against central differences on a small network."""
    rng = np.random.default_rng(seed)
    schedule = BetaSchedule()
    mu = DiscreteMeasure.uniform(rng.normal(size=(3, 2)))
    part = build_partition(2.0, 0.1, 0.5)
    batch = draw_mc_batch(mu, part, schedule, 3, rng)
    params = MlpParams.init([4, 5, 5, 2], rng)
    for b in params.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    _, grads = shared_loss_and_grad(params, batch)
    worst = 0.0
    for arr, g in zip(params.flat(), grads):
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            h = 1e-6 * max(1.0, abs(old))
            arr[idx] = old + h
            up, _ = shared_loss_and_grad(params, batch)
            arr[idx] = old - h
            down, _ = shared_loss_and_grad(params, batch)
            arr[idx] = old
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12)))
    return worst


@_timed
def check_learned_score(n: int = 256, particles: int = 4000, seed: int = 0, steps: int = 300) -> CheckResult:
    """Trained shared-MLP pipeline error within 2x of the exact-score pipeline; gradients vs finite differences."""
    grad_err = gradient_check(seed)
    schedule = BetaSchedule()
    seq = np.random.SeedSequence([seed, n])
    data_seq, init_seq, train_seq, sampler_seq, held_seq = seq.spawn(5)
    mu = DiscreteMeasure.uniform(generators.two_atom(n, 2, np.random.default_rng(data_seq), separation=2.0))
    hp = select_hyperparams(n, 3.0, 1.0, 4.0, moments(mu, 4.0), moments(mu, 2.0), 2, schedule)
    cfg = config_from_hyperparams(hp, schedule, rng_seed=int(sampler_seq.generate_state(1)[0]))
    params = MlpParams.init(SharedMlpScore.layer_sizes(2, 64, 3), np.random.default_rng(init_seq))
    tcfg = TrainConfig(cfg.partition, 8, "adam", 3e-3, steps, int(train_seq.generate_state(1)[0]), schedule)
    model, _ = train(params, mu, tcfg)
    held = DiscreteMeasure.uniform(generators.two_atom(particles, 2, np.random.default_rng(held_seq), separation=2.0))
    w_exact = wasserstein_p_exact(truncate(sample_reverse(2, ExactScore(mu, schedule), cfg, particles), hp.R), held, 1)[0]
    w_model = wasserstein_p_exact(truncate(sample_reverse(2, model, cfg, particles), hp.R), held, 1)[0]
    ratio = w_model / w_exact
    ok = ratio <= 2.0 and grad_err <= 1e-4
    return CheckResult(
        "learned_score", ok, ratio, 2.0,
        f"W1 trained {w_model:.4f} vs exact {w_exact:.4f} (ratio {ratio:.2f} <= 2), gradient rel err {grad_err:.1e} (<= 1e-4)",
    )


DIMENSION_GENERATORS = (("subspace_uniform", 1, 8), ("torus", 1, 8), ("torus", 2, 8))


@_timed
def check_dimension_ordering(n: int = 1500, seeds=(0, 1, 2), s_step: float = 0.1) -> CheckResult:
    """(p, q) estimates: non-increasing in q, non-decreasing in p, at most Minkowski + one step."""
    violations = []
    worst = -math.inf
    for name, d, D in DIMENSION_GENERATORS:
        for seed in seeds:
            rng = np.random.default_rng(np.random.SeedSequence([seed, d, D]))
            x = generators.sample(name, n, D, rng, d=d)
            mu = DiscreteMeasure.uniform(x)
            grid = default_epsilon_grid(x)
            mink = fit_minkowski_dimension(x, grid).slope
            by_q = [fit_wasserstein_pq_dimension(mu, 1.0, q, grid, s_step).slope for q in (2.0, 4.0, 16.0)]
            by_p = [fit_wasserstein_pq_dimension(mu, p, 8.0, grid, s_step).slope for p in (0.25, 0.5, 1.0)]
            slack = max(
                max(b - a for a, b in zip(by_q, by_q[1:])),
                max(a - b for a, b in zip(by_p, by_p[1:])),
                max(w - mink for w, p in zip(by_p, (0.25, 0.5, 1.0)) if p < mink / 2) if any(p < mink / 2 for p in (0.25, 0.5, 1.0)) else -math.inf,
                by_q[0] - mink if 1.0 < mink / 2 else -math.inf,
            )
            worst = max(worst, slack)
            if slack > s_step + 1e-9:
                violations.append(f"{name}(d={d}) seed {seed}: q->{by_q} p->{by_p} mink {mink:.2f}")
    return CheckResult(
        "dimension_ordering", not violations, worst, s_step,
        f"largest ordering violation {worst:.3f} (<= one grid step {s_step}); " + ("; ".join(violations) or "no violations"),
    )


# ---------------------------------------------------------------------------
# rate checks


@_timed
def check_emp_rate(generator: str, d: int, D: int, lo: float, hi: float, n_grid=None, reps: int = 20, seed: int = 0) -> CheckResult:
    cfg = ExperimentConfig(
        generator=generator, d=d, D=D, n_grid=n_grid or [64, 128, 256, 512, 1024, 2048, 4096], reps=reps, seed=seed, p=1.0
    )
    _, fit = run_emp_rate(cfg)
    ok = lo <= fit.slope <= hi
    return CheckResult(
        f"emp_rate_{generator}_d{d}_D{D}", ok, fit.slope, hi,
        f"slope {fit.slope:.3f} +- {fit.stderr_slope:.3f}, window [{lo}, {hi}]",
    )


def emp_rate_slope(generator: str, d: int, D: int, n_grid, reps: int, seed: int) -> float:
    cfg = ExperimentConfig(generator=generator, d=d, D=D, n_grid=n_grid, reps=reps, seed=seed, p=1.0)
    return run_emp_rate(cfg)[1].slope


@_timed
def check_ambient_insensitivity(n_grid=None, reps: int = 20, seeds=(1, 2)) -> CheckResult:
    n_grid = n_grid or [64, 128, 256, 512, 1024, 2048, 4096]
    low = emp_rate_slope("torus", 2, 4, n_grid, reps, seeds[0])
    high = emp_rate_slope("torus", 2, 16, n_grid, reps, seeds[1])
    gap = abs(low - high)
    return CheckResult("ambient_insensitivity", gap <= 0.1, gap, 0.1, f"slope D=4 {low:.3f}, D=16 {high:.3f}, |gap| {gap:.3f} (<= 0.1)")


@_timed
def check_pipeline_rate(n_grid=None, reps: int = 2, count: int = 2048, seed: int = 0, threads: int = 1) -> CheckResult:
    cfg = ExperimentConfig(
        experiment="pipeline_rate", generator="torus", d=4, D=8, n_grid=n_grid or [64, 128, 256, 512, 1024],
        reps=reps, seed=seed, p=1.0, q=4.0, count=count, exact_cutoff=max(count, 4096), threads=threads,
    )
    records, fit = run_pipeline_rate(cfg)
    means = [v for _, v in mean_by_n(records, "wp")]
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    ok = decreasing and fit.slope <= -0.10
    return CheckResult(
        "pipeline_rate", ok, fit.slope, -0.10,
        f"mean W1 {[round(v, 4) for v in means]} strictly decreasing={decreasing}, slope {fit.slope:.3f} (<= -0.10)",
    )


FAST_BATTERY = (
    check_ot_oracle,
    check_score_derivatives,
    check_denoising_identity,
    check_kl_bound,
    check_partition_bounds,
    check_linear_gaussian,
    check_multiscale_bound,
)


def run_identity_checks(cfg: ExperimentConfig) -> tuple[list[RunRecord], list[CheckResult]]:
    """The identity and bound battery with the config's seed; one value and one pass record per check."""
    results = []
    for fn in FAST_BATTERY:
        if fn is check_partition_bounds:
            results.append(fn())
        elif fn is check_denoising_identity:
            results.append(fn(seed=cfg.seed, extra_corrupted=True))
        else:
            results.append(fn(seed=cfg.seed))
    results.append(_kl_window_guard())
    records = []
    for r in results:
        records.append(RunRecord("identity_checks", cfg.generator, 0, 0, cfg.seed, r.name, float(r.value), r.seconds))
        records.append(RunRecord("identity_checks", cfg.generator, 0, 0, cfg.seed, r.name + ".pass", float(r.passed), r.seconds))
    return records, results


def _kl_window_guard() -> CheckResult:
    """Below log 2 / beta_upper the KL bound must refuse; a refusal counts as a pass."""
    mu = DiscreteMeasure.uniform(np.zeros((1, 2)))
    schedule = BetaSchedule()
    try:
        kl_bound_to_gaussian(mu, schedule, 0.5 * kl_validity_time(schedule))
    except ValueError:
        return CheckResult("kl_window_guard", True, 1.0, 1.0, "bound refused below its validity window")
    return CheckResult("kl_window_guard", False, 0.0, 1.0, "bound evaluated below its validity window")

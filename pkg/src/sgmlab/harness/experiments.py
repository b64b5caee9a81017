"""Experiment drivers: empirical and end-to-end rate fits, dimension estimates, training."""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import linregress

from ..diffusion_process import BetaSchedule, kl_bound_to_gaussian, marginal_params
from ..dimension import (
    covering_profile,
    default_epsilon_grid,
    fit_minkowski_dimension,
    fit_wasserstein_pq_dimension,
)
from ..measure_ot import DiscreteMeasure, moments, wasserstein_p_entropic, wasserstein_p_exact
from ..reverse_sampler import (
    config_from_hyperparams,
    discretization_error_sum,
    gaussian_abs_moment,
    sample_reverse,
    select_hyperparams,
    truncate,
)
from ..score_model import MlpParams, SharedMlpScore, TrainConfig, TrainingDivergence, train
from ..score_oracle import ExactScore
from . import generators
from .config import ExperimentConfig

RECORD_COLUMNS = ("experiment", "generator", "n", "rep", "seed", "metric", "value", "wall_time")


@dataclass(frozen=True)
class RunRecord:
    experiment: str
    generator: str
    n: int
    rep: int
    seed: int
    metric: str
    value: float
    wall_time: float

    def sort_key(self):
        return (self.experiment, self.generator, self.n, self.rep, self.metric)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    stderr_slope: float
    n_points: int

    @property
    def degenerate(self) -> bool:
        return not math.isfinite(self.slope)


DEGENERATE_FIT = RateFit(float("nan"), float("nan"), float("nan"), 0)


def fit_rate(pairs) -> RateFit:
    """OLS of log value on log n."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("need at least 3 (n, value) pairs")
    n = np.array([p[0] for p in pairs], dtype=float)
    v = np.array([p[1] for p in pairs], dtype=float)
    if np.any(n <= 0) or np.any(v <= 0):
        raise ValueError("n and values must be positive for a log-log fit")
    x, y = np.log(n), np.log(v)
    if np.ptp(y) == 0:
        return RateFit(0.0, float(y[0]), 0.0, len(pairs))
    res = linregress(x, y)
    return RateFit(float(res.slope), float(res.intercept), float(res.stderr), len(pairs))


# ---------------------------------------------------------------------------
# data


def schedule_from(cfg: ExperimentConfig) -> BetaSchedule:
    if cfg.schedule == "constant":
        return BetaSchedule("constant", cfg.beta)
    if cfg.schedule == "affine":
        return BetaSchedule("affine", cfg.beta, cfg.beta_slope, cfg.beta_horizon)
    raise ValueError(f"schedule {cfg.schedule!r} cannot be set from a flat config; use constant or affine")


class DataSource:
    """The experiment's population: generator choice plus a fixed random embedding."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        # the embedding is part of the population, so it depends on the seed only
        self._embed_seed = np.random.SeedSequence([cfg.seed, 0xE3BED])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        c = self.cfg
        kw = {}
        if c.generator == "pareto_tail":
            kw["tail_index"] = c.q_tail
        elif c.generator == "two_atom":
            kw["separation"] = c.separation
        embed = np.random.default_rng(self._embed_seed)
        return generators.sample(c.generator, n, c.D, rng, d=c.d, embed_rng=embed, **kw)

    def measure(self, n: int, rng: np.random.Generator) -> DiscreteMeasure:
        return DiscreteMeasure.uniform(self.sample(n, rng))


def generate(cfg: ExperimentConfig, n: int, seed: int) -> DiscreteMeasure:
    return DataSource(cfg.replace(seed=seed)).measure(n, np.random.default_rng(np.random.SeedSequence([seed, n])))


def cell_rng(seed: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *index]))


def wp_distance(a: DiscreteMeasure, b: DiscreteMeasure, p: float, exact_cutoff: int) -> float:
    if max(a.size, b.size) <= exact_cutoff:
        return wasserstein_p_exact(a, b, p)[0]
    return wasserstein_p_entropic(a, b, p)


def _run_cells(cells, fn, threads: int) -> list[RunRecord]:
    if threads == 1:
        groups = [fn(*c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            groups = list(pool.map(lambda c: fn(*c), cells))
    return sorted((r for g in groups for r in g), key=RunRecord.sort_key)


def mean_by_n(records, metric: str) -> list[tuple[int, float]]:
    by_n: dict[int, list[float]] = {}
    for r in records:
        if r.metric == metric and math.isfinite(r.value):
            by_n.setdefault(r.n, []).append(r.value)
    return [(n, float(np.mean(v))) for n, v in sorted(by_n.items())]


def _safe_fit(pairs) -> RateFit:
    if len(pairs) < 3 or any(v <= 0 for _, v in pairs):
        return DEGENERATE_FIT
    return fit_rate(pairs)


# ---------------------------------------------------------------------------
# empirical rate


def run_emp_rate(cfg: ExperimentConfig) -> tuple[list[RunRecord], RateFit]:
    """W_p between mu_n and a reference sample over the n grid; slope of log mean W_p on log n."""
    source = DataSource(cfg)
    exp_id = "emp_rate"
    n_max = max(cfg.n_grid)

    def cell(i: int, n: int, rep: int) -> list[RunRecord]:
        start = time.perf_counter()
        rng = cell_rng(cfg.seed, i, rep)
        mu_n = source.measure(n, rng)
        ref_size = n if cfg.reference_mode == "two_sample" else cfg.reference_factor * n_max
        ref = source.measure(ref_size, rng)
        value = wp_distance(mu_n, ref, cfg.p, cfg.exact_cutoff)
        return [RunRecord(exp_id, cfg.generator, n, rep, cfg.seed, "wp", value, time.perf_counter() - start)]

    cells = [(i, n, rep) for i, n in enumerate(cfg.n_grid) for rep in range(cfg.reps)]
    records = _run_cells(cells, cell, cfg.threads)
    return records, _safe_fit(mean_by_n(records, "wp"))


# ---------------------------------------------------------------------------
# end-to-end pipeline rate


def truncation_tail_bound(p: float, q: float, mass: float, R: float) -> float:
    """2^{(q-1)/p} * mass * R^{-(q-p)/p}: the moment bound on what truncation at R discards."""
    return 2.0 ** ((q - 1) / p) * mass * R ** (-(q - p) / p)


def pipeline_hyperparams(cfg: ExperimentConfig, mu_n: DiscreteMeasure, n: int):
    schedule = schedule_from(cfg)
    d = cfg.d_proxy if cfg.d_proxy > 0 else cfg.d
    hp = select_hyperparams(
        n, d, cfg.p, cfg.q, moments(mu_n, cfg.q), moments(mu_n, 2.0), mu_n.dim, schedule, cfg.kappa_const
    )
    return hp, schedule


def train_shared_score(cfg: ExperimentConfig, mu_n: DiscreteMeasure, partition, schedule, seed_seq):
    init_rng, data_seed = (np.random.default_rng(s) for s in seed_seq.spawn(2))
    params = MlpParams.init(SharedMlpScore.layer_sizes(mu_n.dim, cfg.width, cfg.depth), init_rng, cfg.weight_bound)
    tcfg = TrainConfig(
        partition=partition,
        mc_per_step=cfg.mc_per_step,
        optimizer=cfg.optimizer,
        learning_rate=cfg.learning_rate,
        steps=cfg.steps,
        rng_seed=int(data_seed.integers(2**63)),
        schedule=schedule,
    )
    return train(params, mu_n, tcfg)


def run_pipeline_rate(cfg: ExperimentConfig) -> tuple[list[RunRecord], RateFit]:
    """Generate with the reverse sampler for each n; W_p of the truncated output to held-out data."""
    source = DataSource(cfg)
    exp_id = "pipeline_rate"

    def cell(i: int, n: int, rep: int) -> list[RunRecord]:
        start = time.perf_counter()
        seq = np.random.SeedSequence([cfg.seed, i, rep])
        data_seq, held_seq, sampler_seq, train_seq = seq.spawn(4)
        mu_n = source.measure(n, np.random.default_rng(data_seq))
        hp, schedule = pipeline_hyperparams(cfg, mu_n, n)
        scfg = config_from_hyperparams(hp, schedule, rng_seed=int(sampler_seq.generate_state(1)[0]))
        out = []

        def rec(metric, value):
            out.append(RunRecord(exp_id, cfg.generator, n, rep, cfg.seed, metric, float(value), time.perf_counter() - start))

        if cfg.score_mode == "exact":
            score = ExactScore(mu_n, schedule)
        else:
            try:
                score, trace = train_shared_score(cfg, mu_n, scfg.partition, schedule, train_seq)
                rec("final_loss", trace[-1])
            except TrainingDivergence as exc:
                rec("failed", exc.step)
                return out
        held_rng = np.random.default_rng(held_seq)
        held = source.measure(cfg.count, held_rng)
        generated = truncate(sample_reverse(mu_n.dim, score, scfg, cfg.count), hp.R)
        rec("wp", wp_distance(generated, held, cfg.p, cfg.exact_cutoff))
        # computable terms of the error decomposition
        rec("wp_data_vs_fresh", wp_distance(mu_n, source.measure(n, held_rng), cfg.p, cfg.exact_cutoff))
        rec("kl_bound_at_T", kl_bound_to_gaussian(mu_n, schedule, hp.T))
        disc, disc_bound = discretization_error_sum(scfg.partition, schedule)
        rec("discretization_sum", disc)
        rec("discretization_bound", disc_bound)
        mass = moments(mu_n, cfg.q).value ** cfg.q + gaussian_abs_moment(cfg.q, mu_n.dim)
        rec("truncation_tail_bound", truncation_tail_bound(cfg.p, cfg.q, mass, hp.R))
        rec("sigma_delta0", math.sqrt(marginal_params(schedule, 0.0, hp.delta0).sigma2))
        rec("n_steps", scfg.partition.N)
        rec("T", hp.T)
        rec("R", hp.R)
        return out

    cells = [(i, n, rep) for i, n in enumerate(cfg.n_grid) for rep in range(cfg.reps)]
    records = _run_cells(cells, cell, cfg.threads)
    failed = {(r.n, r.rep) for r in records if r.metric == "failed"}
    kept = [r for r in records if (r.n, r.rep) not in failed]
    return records, _safe_fit(mean_by_n(kept, "wp"))


# ---------------------------------------------------------------------------
# dimension estimates and training


def run_dim_estimate(cfg: ExperimentConfig) -> tuple[list[RunRecord], list]:
    source = DataSource(cfg)
    records, estimates = [], []
    for i, n in enumerate(cfg.n_grid):
        for rep in range(cfg.reps):
            start = time.perf_counter()
            mu = source.measure(n, cell_rng(cfg.seed, i, rep))
            grid = np.array(cfg.epsilons) if cfg.epsilons else default_epsilon_grid(mu.points)
            mink = fit_minkowski_dimension(mu.points, grid)
            wpq = fit_wasserstein_pq_dimension(mu, cfg.p, cfg.q, grid)
            elapsed = time.perf_counter() - start
            for metric, value in (("minkowski", mink.slope), ("minkowski_r2", mink.r_squared), ("wasserstein_pq", wpq.slope)):
                records.append(RunRecord("dim_estimate", cfg.generator, n, rep, cfg.seed, metric, value, elapsed))
            estimates.append((n, rep, mink, wpq, covering_profile(mu, grid)))
    return records, estimates


def run_train_score(cfg: ExperimentConfig):
    """Train a shared MLP score on n = max(n_grid) samples with the sampler's partition."""
    source = DataSource(cfg)
    n = max(cfg.n_grid)
    seq = np.random.SeedSequence([cfg.seed, 0x7A1])
    data_seq, train_seq = seq.spawn(2)
    mu_n = source.measure(n, np.random.default_rng(data_seq))
    hp, schedule = pipeline_hyperparams(cfg, mu_n, n)
    part = config_from_hyperparams(hp, schedule).partition
    score, trace = train_shared_score(cfg, mu_n, part, schedule, train_seq)
    return score, trace, hp


# ---------------------------------------------------------------------------
# output


def write_records(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([r.experiment, r.generator, r.n, r.rep, r.seed, r.metric, repr(r.value), f"{r.wall_time:.6f}"])


def read_records(path) -> list[RunRecord]:
    with Path(path).open(newline="") as fh:
        return [
            RunRecord(row["experiment"], row["generator"], int(row["n"]), int(row["rep"]), int(row["seed"]),
                      row["metric"], float(row["value"]), float(row["wall_time"]))
            for row in csv.DictReader(fh)
        ]


def write_fit(fit: RateFit, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slope", "intercept", "stderr", "n_points"])
        writer.writerow([repr(fit.slope), repr(fit.intercept), repr(fit.stderr_slope), fit.n_points])


def plot_rate(records, fit: RateFit, metric: str, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    pts = [(r.n, r.value) for r in records if r.metric == metric and r.value > 0]
    if pts:
        ns, vs = zip(*pts)
        ax.scatter(ns, vs, s=10, alpha=0.4, label="runs")
    means = mean_by_n(records, metric)
    if means:
        ax.scatter(*zip(*means), s=30, color="k", label="mean")
    if not fit.degenerate and means:
        grid = np.geomspace(means[0][0], means[-1][0], 50)
        ax.plot(grid, np.exp(fit.intercept) * grid**fit.slope, "r-", label=f"slope {fit.slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)

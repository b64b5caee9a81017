"""Adaptive time partition, exponential-integrator reverse sampler and truncation."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .diffusion_process import BetaSchedule, marginal_params
from .measure_ot import DiscreteMeasure, MomentSummary

DEFAULT_BLOCK = 512


@dataclass(frozen=True)
class Partition:
    """Forward knots t'_0 = delta0 < ... < t'_N = T and their time reflection.

    Steps grow geometrically while below 1 and are ``kappa`` afterwards; the
    final knot is clamped to T so the reverse grid starts at 0.
    """

    forward_knots: np.ndarray
    kappa: float
    delta0: float
    horizon_T: float

    @property
    def N(self) -> int:
        return len(self.forward_knots) - 1

    @property
    def reverse_knots(self) -> np.ndarray:
        return self.horizon_T - self.forward_knots[::-1]

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.reverse_knots)

    @property
    def forward_steps(self) -> np.ndarray:
        return np.diff(self.forward_knots)

    def query_times(self) -> np.ndarray:
        """Forward times T - t_i at which step i evaluates the score, i = 0..N-1."""
        return self.forward_knots[::-1][:-1].copy()

    def count_bound(self) -> float:
        return math.log(1 / self.delta0) / math.log1p(self.kappa) + self.horizon_T / self.kappa + 1


def build_partition(T: float, delta0: float, kappa: float) -> Partition:
    if not 0 < delta0 < T:
        raise ValueError(f"need 0 < delta0 < T, got delta0={delta0}, T={T}")
    if not 0 < kappa <= 1:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    knots = [float(delta0)]
    t = float(delta0)
    while t < T:
        t = t + kappa * min(t, 1.0)
        knots.append(t)
    knots[-1] = float(T)
    return Partition(np.array(knots), float(kappa), float(delta0), float(T))


def discretization_constant(schedule: BetaSchedule) -> float:
    """C with sum h'^2 / sigma^4 <= C kappa (log(1/delta0) + T).

    Uses sigma_t^2 >= min(t, 1) (1 - exp(-beta_lower)), the count bound on N
    and kappa / log(1 + kappa) <= 1 / log 2.
    """
    c0 = -math.expm1(-schedule.beta_lower)
    return (1.0 + 1.0 / math.log(2.0)) / (c0 * c0)


def discretization_error_sum(partition: Partition, schedule: BetaSchedule) -> tuple[float, float]:
    """Sum of h'_i^2 / sigma_{t'_i}^4 over forward knots, and the matching upper bound."""
    knots = partition.forward_knots
    total = 0.0
    for i in range(partition.N):
        h = knots[i + 1] - knots[i]
        s2 = marginal_params(schedule, 0.0, knots[i]).sigma2
        total += h * h / (s2 * s2)
    bound = discretization_constant(schedule) * partition.kappa * (math.log(1 / partition.delta0) + partition.horizon_T)
    return total, bound


@dataclass(frozen=True)
class SamplerConfig:
    schedule: BetaSchedule
    partition: Partition
    truncation_R: float
    rng_seed: int = 0
    block_size: int = DEFAULT_BLOCK
    threads: int = 1

    def __post_init__(self):
        if not (self.truncation_R > 0 and math.isfinite(self.truncation_R)):
            raise ValueError("truncation_R must be finite and positive")
        if self.block_size < 1 or self.threads < 1:
            raise ValueError("block_size and threads must be >= 1")


@dataclass(frozen=True)
class HyperParams:
    T: float
    R: float
    delta0: float
    kappa: float
    d: float
    p: float
    q: float
    n: int

    def __post_init__(self):
        for name in ("T", "R", "delta0", "kappa", "d", "p", "q"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.p < self.q:
            raise ValueError("need p < q")
        if not self.d > 2 * self.p:
            raise ValueError("need d > 2p")


def step_integrals(partition: Partition, schedule: BetaSchedule) -> np.ndarray:
    """A_i = int_{T - t_{i+1}}^{T - t_i} beta for each reverse step."""
    fwd = partition.forward_knots[::-1]
    return np.array([schedule.integral(fwd[i + 1], fwd[i]) for i in range(partition.N)])


def reverse_step(y: np.ndarray, A: float, score: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Exponential-integrator update given the step integral, score value and noise draw."""
    grow = math.expm1(A)
    return y + grow * (y + 2.0 * score) + z * math.sqrt(math.expm1(2.0 * A))


def _run_block(y: np.ndarray, rng: np.random.Generator, score_fn, query: np.ndarray, A: np.ndarray) -> np.ndarray:
    for i in range(len(A)):
        try:
            s = np.asarray(score_fn(y, float(query[i])), dtype=float)
        except Exception as exc:
            raise RuntimeError(f"score evaluation failed at reverse step {i} (t={query[i]:.6g})") from exc
        z = rng.standard_normal(y.shape)
        y = reverse_step(y, float(A[i]), s, z)
    return y


def sample_reverse(dim: int, score_fn, config: SamplerConfig, count: int) -> DiscreteMeasure:
    """Run the reverse chain from N(0, I) to time T - delta0 for ``count`` particles.

    Particles are processed in fixed-size blocks, each with its own RNG stream
    spawned from the seed, so results do not depend on the thread count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    query = config.partition.query_times()
    A = step_integrals(config.partition, config.schedule)
    n_blocks = -(-count // config.block_size)
    streams = np.random.SeedSequence(config.rng_seed).spawn(n_blocks)

    def work(b: int) -> np.ndarray:
        rng = np.random.default_rng(streams[b])
        size = min(config.block_size, count - b * config.block_size)
        y0 = rng.standard_normal((size, dim))
        return _run_block(y0, rng, score_fn, query, A)

    if config.threads == 1 or n_blocks == 1:
        blocks = [work(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            blocks = list(pool.map(work, range(n_blocks)))
    return DiscreteMeasure.uniform(np.vstack(blocks))


def truncate(measure: DiscreteMeasure, R: float) -> DiscreteMeasure:
    """Send every atom with sup norm above R to the origin; weights are kept."""
    if not R > 0:
        raise ValueError("R must be positive")
    pts = measure.points.copy()
    outside = np.abs(pts).max(axis=1) > R
    pts[outside] = 0.0
    return DiscreteMeasure(pts, measure.weights)


def gaussian_abs_moment(q: float, D: int) -> float:
    """E||Z||^q for Z ~ N(0, I_D)."""
    return math.exp(0.5 * q * math.log(2.0) + gammaln(0.5 * (D + q)) - gammaln(0.5 * D))


def select_hyperparams(
    n: int,
    d: float,
    p: float,
    q: float,
    moment_q: MomentSummary,
    moment_2: MomentSummary,
    D: int,
    schedule: BetaSchedule,
    kappa_const: float = 1.0,
) -> HyperParams:
    """Early-stopping time, truncation radius, start offset and step scale for n samples.

    ``moment_q`` and ``moment_2`` are the data moments of order q and 2.  T is
    set to the smallest admissible value and kappa carries ``kappa_const``.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    if not 0 < p < q:
        raise ValueError(f"need 0 < p < q, got p={p}, q={q}")
    if not d > 2 * p:
        raise ValueError(f"dimension proxy d={d} must exceed 2p={2 * p}: trial dimensions s start above 2p")
    if moment_q.q != q or moment_2.q != 2:
        raise ValueError("moment summaries must be of orders q and 2")
    gap = q - p
    mass = moment_q.value**q + gaussian_abs_moment(q, D)
    delta0 = n ** (-2.0 / d)
    kappa = kappa_const * n ** (-2.0 * (1 + p * gap) / (d * p * gap))
    R = 2.0 ** ((q - 1) / gap) * n ** (1.0 / (d * p * gap)) * mass ** (1.0 / gap)
    T = (p / schedule.beta_lower) * (
        (1 + p * gap) / (d * p * gap) * math.log(n)
        + 0.5 * math.log(D)
        + math.log(mass) / gap
        + math.log(D + moment_2.value**2) / (2 * p)
        + (q - 1) / gap * math.log(2.0)
    )
    return HyperParams(T=T, R=R, delta0=delta0, kappa=min(kappa, 1.0), d=d, p=p, q=q, n=n)


def config_from_hyperparams(hp: HyperParams, schedule: BetaSchedule, rng_seed: int = 0, threads: int = 1) -> SamplerConfig:
    part = build_partition(hp.T, hp.delta0, hp.kappa)
    return SamplerConfig(schedule=schedule, partition=part, truncation_R=hp.R, rng_seed=rng_seed, threads=threads)

"""Exact score, Hessian and posterior statistics of a noised empirical measure.

A score function here is any callable ``score(x, t) -> array`` taking a batch
``x`` of shape (k, D) and a scalar forward time ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import softmax

from .diffusion_process import (
    SIGMA2_FLOOR,
    BetaSchedule,
    _log_kernel,
    marginal_params,
    query_chunks,
    sample_forward,
)
from .measure_ot import DiscreteMeasure


class ScoreFunction(Protocol):
    def __call__(self, x: np.ndarray, t: float) -> np.ndarray: ...


@dataclass(frozen=True)
class ScoreEvaluation:
    score: np.ndarray
    posterior_mean: np.ndarray
    posterior_weights: np.ndarray


def _check_t(t: float) -> None:
    if not t > 0:
        raise ValueError("score is only defined for t > 0")


def posterior_weights(measure: DiscreteMeasure, schedule: BetaSchedule, t: float, x) -> np.ndarray:
    """Responsibilities P(X_0 = x_i | X_t = x), one row per query."""
    _check_t(t)
    xa = np.atleast_2d(np.asarray(x, dtype=float))
    mp = marginal_params(schedule, 0.0, t)
    out = np.empty((xa.shape[0], measure.size))
    for sl in query_chunks(measure, xa.shape[0]):
        out[sl] = softmax(_log_kernel(measure, mp.m, mp.sigma2, xa[sl]), axis=1)
    return out


def score_exact(measure: DiscreteMeasure, schedule: BetaSchedule, t: float, x) -> ScoreEvaluation:
    """Score of the time-t forward marginal via the posterior mean (Tweedie form)."""
    _check_t(t)
    xa = np.asarray(x, dtype=float)
    single = xa.ndim == 1
    xa = np.atleast_2d(xa)
    mp = marginal_params(schedule, 0.0, t)
    w = posterior_weights(measure, schedule, t, xa)
    pm = w @ measure.points
    score = (mp.m * pm - xa) / max(mp.sigma2, SIGMA2_FLOOR)
    if single:
        return ScoreEvaluation(score[0], pm[0], w[0])
    return ScoreEvaluation(score, pm, w)


def hessian_exact(measure: DiscreteMeasure, schedule: BetaSchedule, t: float, x) -> np.ndarray:
    """Hessian of the log density: (m^2 / sigma^4) Var(X_0 | X_t = x) - I / sigma^2."""
    _check_t(t)
    xa = np.asarray(x, dtype=float)
    if xa.ndim != 1:
        raise ValueError("hessian_exact takes a single point")
    mp = marginal_params(schedule, 0.0, t)
    s2 = max(mp.sigma2, SIGMA2_FLOOR)
    w = posterior_weights(measure, schedule, t, xa)[0]
    centred = measure.points - w @ measure.points
    cov = (centred * w[:, None]).T @ centred
    cov = 0.5 * (cov + cov.T)
    return (mp.m**2 / s2**2) * cov - np.eye(measure.dim) / s2


class ExactScore:
    """The empirical measure's exact score as a ScoreFunction."""

    def __init__(self, measure: DiscreteMeasure, schedule: BetaSchedule):
        self.measure = measure
        self.schedule = schedule

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return score_exact(self.measure, self.schedule, t, np.atleast_2d(x)).score


class StandardGaussianScore:
    """Score of N(0, I) at every time; the forward process leaves it invariant."""

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return -np.asarray(x, dtype=float)


class ZeroScore:
    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=float))


def verify_denoising_identity(
    measure: DiscreteMeasure,
    schedule: BetaSchedule,
    t: float,
    score_fn: ScoreFunction,
    mc_samples: int,
    rng,
) -> tuple[float, float, float]:
    """Both sides of the explicit vs denoising score-matching identity.

    lhs = E||s(X_t) - grad log p_t(X_t)||^2
    rhs = E||s(X_t) + Z / sigma_t||^2 + E||grad log p_t(X_t)||^2 - D / sigma_t^2
    with X_t = m_t X_0 + sigma_t Z.  Both use the same draws; the returned
    standard error is that of the per-sample difference.
    """
    _check_t(t)
    if mc_samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    rng = np.random.default_rng(rng)
    mp = marginal_params(schedule, 0.0, t)
    sigma = math.sqrt(mp.sigma2)
    idx = rng.choice(measure.size, size=mc_samples, p=measure.weights)
    z = rng.standard_normal((mc_samples, measure.dim))
    x = mp.m * measure.points[idx] + sigma * z
    true = score_exact(measure, schedule, t, x).score
    s = np.asarray(score_fn(x, t), dtype=float)
    lhs_i = np.sum((s - true) ** 2, axis=1)
    rhs_i = np.sum((s + z / sigma) ** 2, axis=1) + np.sum(true**2, axis=1) - measure.dim / mp.sigma2
    diff = lhs_i - rhs_i
    stderr = float(diff.std(ddof=1) / math.sqrt(mc_samples))
    return float(lhs_i.mean()), float(rhs_i.mean()), stderr


__all__ = [
    "ScoreFunction",
    "ScoreEvaluation",
    "score_exact",
    "hessian_exact",
    "posterior_weights",
    "ExactScore",
    "StandardGaussianScore",
    "ZeroScore",
    "verify_denoising_identity",
    "sample_forward",
]

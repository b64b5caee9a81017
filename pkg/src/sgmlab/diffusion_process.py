"""Time-rescaled Ornstein-Uhlenbeck forward process.

The forward process is ``dX = -beta_t X dt + sqrt(2 beta_t) dW``, so that given
``X_s`` the state at ``t >= s`` is Gaussian with mean ``m X_s`` and covariance
``(1 - m^2) I`` where ``m = exp(-int_s^t beta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import logsumexp

from .measure_ot import DiscreteMeasure, moments

SIGMA2_FLOOR = 1e-12
SCHEDULE_KINDS = ("constant", "affine", "tabulated")


@dataclass(frozen=True)
class BetaSchedule:
    """Noise-rate schedule beta_t with closed-form integrals.

    ``constant``: beta_t = value.
    ``affine``: beta_t = value + slope * t on [0, horizon]; queries past the
    horizon are rejected since an affine rate cannot stay bounded on [0, inf).
    ``tabulated``: monotone cubic (C1) interpolation of (times, values), held
    at the last value beyond the table; integrals use the exact antiderivative.
    """

    kind: str = "constant"
    value: float = 1.0
    slope: float = 0.0
    horizon: float = math.inf
    times: tuple = ()
    values: tuple = ()
    _interp: object = field(default=None, repr=False, compare=False)
    _antideriv: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.kind == "tabulated":
            ts = np.asarray(self.times, dtype=float)
            vs = np.asarray(self.values, dtype=float)
            if ts.size < 2 or ts.shape != vs.shape:
                raise ValueError("tabulated schedule needs >= 2 matching (time, value) pairs")
            if ts[0] != 0 or np.any(np.diff(ts) <= 0):
                raise ValueError("table times must start at 0 and increase strictly")
            if np.any(vs <= 0):
                raise ValueError("beta values must be positive")
            interp = PchipInterpolator(ts, vs, extrapolate=False)
            object.__setattr__(self, "times", tuple(ts.tolist()))
            object.__setattr__(self, "values", tuple(vs.tolist()))
            object.__setattr__(self, "_interp", interp)
            object.__setattr__(self, "_antideriv", interp.antiderivative())
        elif self.kind == "affine":
            if not math.isfinite(self.horizon) or self.horizon <= 0:
                raise ValueError("affine schedule needs a finite positive horizon")
            if min(self.value, self.value + self.slope * self.horizon) <= 0:
                raise ValueError("affine schedule must stay positive on [0, horizon]")
        else:
            if not self.value > 0:
                raise ValueError("constant beta must be positive")

    @property
    def beta_lower(self) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "affine":
            return float(min(self.value, self.value + self.slope * self.horizon))
        # pchip is shape preserving: extremes are attained at the knots
        return float(min(self.values))

    @property
    def beta_upper(self) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "affine":
            return float(max(self.value, self.value + self.slope * self.horizon))
        return float(max(self.values))

    def _check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("times must be nonnegative")
        if self.kind == "affine" and np.any(t > self.horizon * (1 + 1e-12)):
            raise ValueError(f"affine schedule only defined up to t={self.horizon}")
        return t

    def beta(self, t):
        t = self._check_time(t)
        if self.kind == "constant":
            out = np.full(t.shape, float(self.value))
        elif self.kind == "affine":
            out = self.value + self.slope * t
        else:
            end = self.times[-1]
            out = np.where(t <= end, self._interp(np.minimum(t, end)), self.values[-1])
        return float(out) if out.ndim == 0 else out

    def cumulative(self, t):
        """int_0^t beta."""
        t = self._check_time(t)
        if self.kind == "constant":
            out = self.value * t
        elif self.kind == "affine":
            out = self.value * t + 0.5 * self.slope * t * t
        else:
            end = self.times[-1]
            inside = self._antideriv(np.minimum(t, end))
            out = inside + self.values[-1] * np.maximum(t - end, 0.0)
        return float(out) if np.ndim(out) == 0 else out

    def integral(self, s, t):
        """int_s^t beta."""
        if self.kind == "constant":
            s = self._check_time(s)
            t = self._check_time(t)
            out = self.value * (t - s)
            return float(out) if np.ndim(out) == 0 else out
        return self.cumulative(t) - self.cumulative(s)


@dataclass(frozen=True)
class MarginalParams:
    m: float
    sigma2: float


def marginal_params(schedule: BetaSchedule, s: float, t: float) -> MarginalParams:
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    A = schedule.integral(s, t)
    m = math.exp(-A)
    # -expm1(-2A) keeps sigma2 accurate when A is tiny
    return MarginalParams(m=m, sigma2=-math.expm1(-2.0 * A))


def sample_forward(measure: DiscreteMeasure, schedule: BetaSchedule, t: float, count: int, rng) -> np.ndarray:
    """``count`` draws of X_t = m_t X_0 + sigma_t Z with X_0 from ``measure``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    rng = np.random.default_rng(rng)
    mp = marginal_params(schedule, 0.0, t)
    idx = rng.choice(measure.size, size=count, p=measure.weights)
    noise = rng.standard_normal((count, measure.dim))
    return mp.m * measure.points[idx] + math.sqrt(mp.sigma2) * noise


def gaussian_kl(mean, sigma2: float, dim: int) -> float:
    """KL(N(mean, sigma2 I_D) || N(0, I_D))."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    mean = np.asarray(mean, dtype=float)
    return 0.5 * (dim * sigma2 - dim - dim * math.log(sigma2) + float(mean @ mean))


def kl_validity_time(schedule: BetaSchedule) -> float:
    return math.log(2.0) / schedule.beta_upper


def kl_bound_to_gaussian(measure: DiscreteMeasure, schedule: BetaSchedule, t: float) -> float:
    """exp(-2 beta_lower t) (D + M_2^2), valid for t >= log 2 / beta_upper."""
    t_min = kl_validity_time(schedule)
    if t < t_min * (1 - 1e-12):
        raise ValueError(f"bound only holds for t >= log(2)/beta_upper = {t_min:.6g}, got t={t}")
    m2 = moments(measure, 2.0).value
    return math.exp(-2.0 * schedule.beta_lower * t) * (measure.dim + m2 * m2)


def _log_kernel(measure: DiscreteMeasure, m: float, sigma2: float, x: np.ndarray) -> np.ndarray:
    """log w_i - ||x - m x_i||^2 / (2 sigma2) for every (query, atom) pair."""
    s2 = max(sigma2, SIGMA2_FLOOR)
    centres = m * measure.points
    xx = np.einsum("kd,kd->k", x, x)
    cc = np.einsum("nd,nd->n", centres, centres)
    # the expanded square runs on BLAS but cancels; fall back to explicit
    # differences once the cancellation could reach ~1e-10 in the exponent
    if (xx.max(initial=0.0) + cc.max(initial=0.0)) * 1e-16 / s2 < 1e-10:
        sq = xx[:, None] - 2.0 * (x @ centres.T) + cc[None, :]
        np.maximum(sq, 0.0, out=sq)
    else:
        diff = x[:, None, :] - centres[None, :, :]
        sq = np.einsum("knd,knd->kn", diff, diff)
    with np.errstate(divide="ignore"):
        logw = np.log(measure.weights)
    return logw[None, :] - sq / (2.0 * s2)


def query_chunks(measure: DiscreteMeasure, count: int, budget: int = 2_000_000):
    """Slices over query rows keeping the (rows, atoms, D) work array near ``budget`` floats."""
    step = max(1, budget // max(1, measure.size * measure.dim))
    for lo in range(0, count, step):
        yield slice(lo, min(lo + step, count))


def mixture_log_density(measure: DiscreteMeasure, schedule: BetaSchedule, t: float, x) -> np.ndarray | float:
    """log of the time-t forward density of ``measure`` at x (one point or a batch)."""
    if not t > 0:
        raise ValueError("the forward density only exists for t > 0")
    xa = np.asarray(x, dtype=float)
    single = xa.ndim == 1
    xa = np.atleast_2d(xa)
    mp = marginal_params(schedule, 0.0, t)
    s2 = max(mp.sigma2, SIGMA2_FLOOR)
    out = np.empty(xa.shape[0])
    for sl in query_chunks(measure, xa.shape[0]):
        out[sl] = logsumexp(_log_kernel(measure, mp.m, s2, xa[sl]), axis=1)
    out -= 0.5 * measure.dim * math.log(2 * math.pi * s2)
    return float(out[0]) if single else out


def gaussian_log_density(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return -0.5 * np.sum(x * x, axis=1) - 0.5 * x.shape[1] * math.log(2 * math.pi)


def estimate_kl_to_gaussian(
    measure: DiscreteMeasure, schedule: BetaSchedule, t: float, samples: int, rng
) -> tuple[float, float]:
    """Monte Carlo KL(P_t || N(0, I)) with its standard error."""
    x = sample_forward(measure, schedule, t, samples, rng)
    ratio = mixture_log_density(measure, schedule, t, x) - gaussian_log_density(x)
    return float(ratio.mean()), float(ratio.std(ddof=1) / math.sqrt(samples))

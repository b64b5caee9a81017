"""Covering/packing numbers and intrinsic-dimension estimators for point clouds.

Balls are open and, unless asked otherwise, measured in the sup norm.  Greedy
covers place centres on data points, so every cover is also a packing at the
same radius; this is what makes ``packing(2 eps) <= cover(eps) <= packing(eps)``
hold for the computed quantities and not just for the exact ones.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .measure_ot import DiscreteMeasure

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class CoveringProfile:
    epsilons: np.ndarray
    counts: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        counts = np.asarray(self.counts, dtype=int)
        if eps.shape != counts.shape:
            raise ValueError("epsilons and counts must have the same length")
        if eps.size > 1 and np.any(np.diff(eps) >= 0):
            raise ValueError("epsilons must be strictly decreasing")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must be in [0, 1)")
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "counts", counts)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epsilon", "count"])
            for e, c in zip(self.epsilons, self.counts):
                writer.writerow([repr(float(e)), int(c)])

    @classmethod
    def from_csv(cls, path, tau: float = 0.0) -> "CoveringProfile":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["epsilon"]) for r in rows]), np.array([int(r["count"]) for r in rows]), tau)


@dataclass(frozen=True)
class DimensionEstimate:
    slope: float
    intercept: float
    r_squared: float
    window: tuple[float, float]
    kind: str
    p: float = float("nan")
    q: float = float("nan")
    saturated: bool = False

    def __post_init__(self):
        if self.kind not in ("minkowski", "wasserstein_pq"):
            raise ValueError(f"unknown estimate kind {self.kind!r}")
        if not math.isfinite(self.slope):
            raise ValueError("slope must be finite")
        if not 0.0 <= self.r_squared <= 1.0:
            raise ValueError(f"r_squared out of range: {self.r_squared}")

    def to_json(self, path=None) -> str:
        record = asdict(self)
        record["window"] = list(self.window)
        for key in ("p", "q"):
            if isinstance(record[key], float) and math.isnan(record[key]):
                record[key] = None
        text = json.dumps(record, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, text: str) -> "DimensionEstimate":
        record = json.loads(text)
        record["window"] = tuple(record["window"])
        for key in ("p", "q"):
            if record.get(key) is None:
                record[key] = float("nan")
        return cls(**record)


def _as_points(points) -> np.ndarray:
    if isinstance(points, DiscreteMeasure):
        return points.points
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("need a nonempty (n, D) point array")
    return pts


def _dist_to(pts: np.ndarray, centre: np.ndarray, norm: str) -> np.ndarray:
    diff = np.abs(pts - centre)
    if norm == "linf":
        return diff.max(axis=1)
    if norm == "l2":
        return np.sqrt((diff * diff).sum(axis=1))
    raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")


def _minkowski_p(norm: str) -> float:
    if norm == "linf":
        return np.inf
    if norm == "l2":
        return 2.0
    raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")


def _check_eps(epsilon: float) -> None:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")


def _open_ball(tree: cKDTree, centre: np.ndarray, radius: float, norm: str) -> np.ndarray:
    # the tree answers closed-ball queries; the largest float below eps gives the open ball
    return np.asarray(tree.query_ball_point(centre, np.nextafter(radius, 0.0), p=_minkowski_p(norm)), dtype=int)


def greedy_sequential_cover(points, epsilon: float, norm: str = "linf", tree=None) -> tuple[np.ndarray, np.ndarray]:
    """Index-order greedy: a point becomes a centre when no earlier centre is within eps.

    The centres form a maximal eps-packing and, with open balls, an eps-cover.
    Returns centres and, per point, the index of the first centre covering it.
    """
    _check_eps(epsilon)
    pts = _as_points(points)
    tree = tree if tree is not None else cKDTree(pts)
    label = np.full(pts.shape[0], -1, dtype=int)
    centres = []
    for i in range(pts.shape[0]):
        if label[i] >= 0:
            continue
        ball = _open_ball(tree, pts[i], epsilon, norm)
        ball = ball[label[ball] < 0]
        label[ball] = len(centres)
        label[i] = len(centres)
        centres.append(i)
    return np.array(centres, dtype=int), label


def farthest_point_cover(points, epsilon: float, norm: str = "linf", tree=None) -> tuple[np.ndarray, np.ndarray]:
    """Farthest-point greedy cover; returns centres and each point's nearest-centre label."""
    _check_eps(epsilon)
    pts = _as_points(points)
    tree = tree if tree is not None else cKDTree(pts)
    dist = _dist_to(pts, pts[0], norm)
    label = np.zeros(pts.shape[0], dtype=int)
    centres = [0]
    while True:
        far = int(np.argmax(dist))
        reach = dist[far]
        if reach < epsilon:
            break
        centres.append(far)
        # only points no farther than the current maximum can get closer
        idx = np.asarray(tree.query_ball_point(pts[far], reach, p=_minkowski_p(norm)), dtype=int)
        d_new = _dist_to(pts[idx], pts[far], norm)
        closer = d_new < dist[idx]
        label[idx[closer]] = len(centres) - 1
        dist[idx[closer]] = d_new[closer]
    return np.array(centres, dtype=int), label


def _cover_clusters(pts: np.ndarray, epsilon: float, norm: str, tree=None) -> np.ndarray:
    """Cluster label per point from the smaller of the two greedy covers."""
    tree = tree if tree is not None else cKDTree(pts)
    fp_centres, fp_label = farthest_point_cover(pts, epsilon, norm, tree)
    seq_centres, seq_label = greedy_sequential_cover(pts, epsilon, norm, tree)
    return fp_label if len(fp_centres) <= len(seq_centres) else seq_label


def covering_number(points, epsilon: float, norm: str = "linf") -> int:
    """Greedy eps-covering number, certified within [packing(2 eps), packing(eps)]."""
    _check_eps(epsilon)
    pts = _as_points(points)
    return int(_cover_clusters(pts, epsilon, norm).max() + 1)


def packing_number(points, epsilon: float, norm: str = "linf") -> int:
    """Size of the index-order greedy maximal eps-packing (pairwise distance >= eps)."""
    centres, _ = greedy_sequential_cover(points, epsilon, norm)
    return int(len(centres))


def epsilon_tau_cover(measure: DiscreteMeasure, epsilon: float, tau: float, norm: str = "linf") -> int:
    """Upper estimate of the (eps, tau)-covering number of a discrete measure.

    Cover the whole support greedily, then drop the lightest clusters while the
    dropped mass stays within ``tau``.
    """
    _check_eps(epsilon)
    if not 0 <= tau < 1:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    label = _cover_clusters(measure.points, epsilon, norm)
    return _count_after_discard(label, measure.weights, tau)


def _count_after_discard(label: np.ndarray, weights: np.ndarray, tau: float) -> int:
    masses = np.sort(np.bincount(label, weights=weights))
    dropped = int(np.searchsorted(np.cumsum(masses), tau, side="right"))
    # never drop everything: the retained set must carry mass > 0
    return int(max(len(masses) - dropped, 1))


def covering_profile(
    measure: DiscreteMeasure, epsilons, tau=0.0, norm: str = "linf"
) -> CoveringProfile:
    """(eps, tau)-counts over a decreasing radius grid.

    ``tau`` may be a constant or a callable of eps.  A running maximum from the
    largest radius down keeps counts monotone in eps.
    """
    eps = np.asarray(epsilons, dtype=float)
    counts = _tau_counts(measure, eps, tau, norm)
    tau_value = 0.0 if callable(tau) else float(tau)
    return CoveringProfile(eps, counts, tau_value)


def _tau_counts(measure, eps, tau, norm, labels=None) -> np.ndarray:
    counts = np.empty(eps.size, dtype=int)
    tree = cKDTree(measure.points) if labels is None else None
    for k, e in enumerate(eps):
        label = labels[k] if labels is not None else _cover_clusters(measure.points, e, norm, tree)
        t = tau(e) if callable(tau) else tau
        counts[k] = _count_after_discard(label, measure.weights, min(t, np.nextafter(1.0, 0)))
    return np.maximum.accumulate(counts)


def default_epsilon_grid(points, n_eps: int = 12, norm: str = "linf", max_fraction: float = 0.1) -> np.ndarray:
    """Geometric radius grid between the sampling floor and half the sup-norm diameter.

    The floor is the larger of ``n**-1/2`` (times the diameter) and the radius
    where the greedy cover would reach ``max_fraction * n`` balls; below that
    the count only reflects the sample size.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    diam = float((pts.max(axis=0) - pts.min(axis=0)).max())
    if diam == 0:
        return np.geomspace(0.5, 0.5 / 10, n_eps)
    hi = 0.5 * diam
    lo = diam / math.sqrt(n)
    cap = max(max_fraction * n, 2)
    # bisection on log eps for the saturation radius
    a, b = math.log(lo), math.log(hi)
    if covering_number(pts, lo, norm) > cap:
        for _ in range(20):
            mid = 0.5 * (a + b)
            if covering_number(pts, math.exp(mid), norm) > cap:
                a = mid
            else:
                b = mid
        lo = math.exp(b)
    if hi / lo < 10:
        lo = hi / 10
    return np.geomspace(hi, lo, n_eps)


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    if np.ptp(y) == 0:
        return 0.0, float(y.mean()), 0.0
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot
    return float(slope), float(intercept), float(min(max(r2, 0.0), 1.0))


def _check_grid(eps: np.ndarray) -> None:
    if eps.size < 4:
        raise ValueError("epsilon grid needs at least 4 radii")
    if np.any(eps <= 0):
        raise ValueError("radii must be positive")
    if eps.max() / eps.min() < 10 * (1 - 1e-12):
        raise ValueError("epsilon grid must span at least one decade")


def fit_minkowski_dimension(points, epsilon_grid=None, norm: str = "linf") -> DimensionEstimate:
    """OLS slope of log covering number against log(1/eps)."""
    pts = _as_points(points)
    eps = np.sort(np.asarray(epsilon_grid if epsilon_grid is not None else default_epsilon_grid(pts, norm=norm), dtype=float))[::-1]
    _check_grid(eps)
    tree = cKDTree(pts)
    counts = np.maximum.accumulate(np.array([_cover_clusters(pts, e, norm, tree).max() + 1 for e in eps]))
    slope, intercept, r2 = _ols(np.log(1 / eps), np.log(counts))
    return DimensionEstimate(slope, intercept, r2, (float(eps.min()), float(eps.max())), "minkowski")


def tau_exponent(s: float, p: float, q: float) -> float:
    """Exponent e in tau(eps) = eps**e used by the (p, q) dimension at trial value s."""
    return s * p * q / ((q - p) * (s - 2 * p))


def fit_wasserstein_pq_dimension(
    measure: DiscreteMeasure,
    p: float,
    q: float,
    epsilon_grid=None,
    s_step: float = 0.1,
    s_max: float | None = None,
    norm: str = "linf",
) -> DimensionEstimate:
    """Smallest trial s > 2p whose trimmed cover counts grow no faster than eps**-s.

    For each trial s the counts N(eps, tau) with tau = (eps/r)**e(s) are compared
    against the envelope ``exp(b) * (r/eps)**s`` on every radius of the grid.
    Here r is the larger of the support's sup-norm radius and the largest grid
    radius, and b is the smallest intercept for which the line of the
    untrimmed slope lies above the untrimmed counts.
    Anchoring the envelope this way makes the estimate non-increasing in q,
    non-decreasing in p, and at most one grid step above the Minkowski slope
    fitted on the same radii.  If the untrimmed counts already pass at s = 2p
    the estimate is 2p.  When no grid value passes up to ``s_max`` (default
    twice the ambient dimension) the estimate is ``s_max`` with
    ``saturated=True``.
    """
    if not 0 < p < q:
        raise ValueError(f"need 0 < p < q, got p={p}, q={q}")
    pts = measure.points
    eps = np.sort(np.asarray(epsilon_grid if epsilon_grid is not None else default_epsilon_grid(pts, norm=norm), dtype=float))[::-1]
    _check_grid(eps)
    # same radii as the Minkowski fit, measured in units of r >= every radius
    radius = max(0.5 * float((pts.max(axis=0) - pts.min(axis=0)).max()), float(eps.max()))
    if s_max is None:
        s_max = 2.0 * measure.dim
    s_max = max(s_max, 2 * p + s_step)
    unit = eps / radius
    log_inv = np.log(1 / unit)
    tree = cKDTree(pts)
    labels = [_cover_clusters(pts, e, norm, tree) for e in eps]
    window = (float(eps.min()), float(eps.max()))

    base = np.log(_tau_counts(measure, unit, 0.0, norm, labels))
    slope, _, r2 = _ols(log_inv, base)
    anchor = float(np.max(base - slope * log_inv))

    def passes(s: float, log_counts: np.ndarray) -> bool:
        return bool(np.all(log_counts <= anchor + s * log_inv + 1e-12))

    if passes(2 * p, base):
        return DimensionEstimate(float(2 * p), anchor, r2, window, "wasserstein_pq", float(p), float(q))
    k = 1
    while True:
        s = round(2 * p + s_step * k, 10)
        if s > s_max + 1e-12:
            return DimensionEstimate(float(s_max), anchor, r2, window, "wasserstein_pq", float(p), float(q), True)
        e = tau_exponent(s, p, q)
        trimmed = np.log(_tau_counts(measure, unit, lambda u, e=e: u**e, norm, labels))
        if passes(s, trimmed):
            return DimensionEstimate(float(s), anchor, r2, window, "wasserstein_pq", float(p), float(q))
        k += 1

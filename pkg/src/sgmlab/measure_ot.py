"""Discrete measures and Wasserstein-p machinery.

Costs are ``||x - y||_2 ** p`` throughout.  The exact solver dispatches to a
min-cost assignment when both measures are uniform with equal size and to a
transportation LP otherwise.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist
from scipy.special import logsumexp


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("measure must have at least one atom")
        if pts.shape[1] < 1:
            raise ValueError("ambient dimension must be >= 1")
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise ValueError("points and weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        if n == 0:
            raise ValueError("measure must have at least one atom")
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0])) or np.allclose(
            self.weights, 1.0 / self.size, rtol=0, atol=1e-15
        )

    def to_csv(self, path) -> None:
        write_measure_csv(self, path)


@dataclass(frozen=True)
class CouplingPlan:
    pairs: list[tuple[int, int, float]]
    cost_p: float

    def marginals(self, n_source: int, n_target: int) -> tuple[np.ndarray, np.ndarray]:
        src = np.zeros(n_source)
        tgt = np.zeros(n_target)
        for i, j, m in self.pairs:
            src[i] += m
            tgt[j] += m
        return src, tgt


@dataclass(frozen=True)
class MomentSummary:
    q: float
    value: float
    sup_norm_max: float


# ---------------------------------------------------------------------------
# CSV layout: header ``w,x1,...,xD`` then one row per atom.


def write_measure_csv(measure: DiscreteMeasure, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["w"] + [f"x{k + 1}" for k in range(measure.dim)])
        for w, x in zip(measure.weights, measure.points):
            writer.writerow([repr(float(w))] + [repr(float(v)) for v in x])


def read_measure_csv(path) -> DiscreteMeasure:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "w" or any(h != f"x{k + 1}" for k, h in enumerate(header[1:])):
        raise ValueError(f"{path}: header must be w,x1..xD, got {header}")
    body = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    if body.size == 0:
        raise ValueError(f"{path}: no atoms")
    w = body[:, 0]
    # tolerate round-off from external writers
    if abs(w.sum() - 1.0) <= 1e-9:
        w = w / w.sum()
    return DiscreteMeasure(body[:, 1:], w)


# ---------------------------------------------------------------------------


def cost_matrix(a: DiscreteMeasure, b: DiscreteMeasure, p: float) -> np.ndarray:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    dist = cdist(a.points, b.points)
    return dist if p == 1 else dist**p


def _check_p(p: float) -> None:
    if not (p >= 1 and math.isfinite(p)):
        raise ValueError(f"p must be a finite real >= 1, got {p}")


def wasserstein_p_exact(
    a: DiscreteMeasure, b: DiscreteMeasure, p: float = 1.0, method: str = "auto"
) -> tuple[float, CouplingPlan]:
    """Exact W_p between two discrete measures, with an optimal plan.

    ``method`` is ``"assignment"``, ``"lp"`` or ``"auto"`` (assignment when
    both measures are uniform of equal size).
    """
    _check_p(p)
    C = cost_matrix(a, b, p)
    if method == "auto":
        method = "assignment" if (a.size == b.size and a.is_uniform() and b.is_uniform()) else "lp"
    if method == "assignment":
        if a.size != b.size:
            raise ValueError("assignment solver needs equal-size measures")
        rows, cols = linear_sum_assignment(C)
        mass = 1.0 / a.size
        pairs = [(int(i), int(j), mass) for i, j in zip(rows, cols)]
        cost = float(C[rows, cols].sum() * mass)
    elif method == "lp":
        pairs, cost = _transport_lp(a.weights, b.weights, C)
    else:
        raise ValueError(f"unknown method {method!r}")
    cost = max(cost, 0.0)
    return cost ** (1.0 / p), CouplingPlan(pairs, cost)


def _transport_lp(wa: np.ndarray, wb: np.ndarray, C: np.ndarray):
    n, m = C.shape
    # row constraints: sum_j P_ij = wa_i ; column constraints: sum_i P_ij = wb_j
    rows_idx = np.repeat(np.arange(n), m)
    cols_idx = np.tile(np.arange(m), n)
    var = np.arange(n * m)
    A = sparse.vstack(
        [
            sparse.csr_matrix((np.ones(n * m), (rows_idx, var)), shape=(n, n * m)),
            sparse.csr_matrix((np.ones(n * m), (cols_idx, var)), shape=(m, n * m)),
        ]
    ).tocsr()
    rhs = np.concatenate([wa, wb])
    res = linprog(
        C.ravel(),
        A_eq=A,
        b_eq=rhs,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise ConvergenceError(f"transport LP failed: {res.message}", float("nan"), int(res.nit))
    x = res.x.reshape(n, m)
    support = np.argwhere(x > 1e-14)
    flows = _repair_flows(support, wa, wb)
    pairs = [(int(i), int(j), float(f)) for (i, j), f in zip(support, flows) if f > 0]
    cost = float(sum(f * C[i, j] for i, j, f in pairs))
    return pairs, cost


def _repair_flows(support: np.ndarray, wa: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """Re-solve the marginal equations on the LP support.

    A basic optimal solution is supported on a forest, so the flows are pinned
    down exactly by the marginals; this removes solver feasibility slack.
    """
    n, m = wa.shape[0], wb.shape[0]
    k = support.shape[0]
    A = np.zeros((n + m, k))
    A[support[:, 0], np.arange(k)] = 1.0
    A[n + support[:, 1], np.arange(k)] = 1.0
    flows, *_ = np.linalg.lstsq(A, np.concatenate([wa, wb]), rcond=None)
    return np.clip(flows, 0.0, None)


def wasserstein_p_bruteforce(a: DiscreteMeasure, b: DiscreteMeasure, p: float = 1.0) -> float:
    """W_p by enumerating every permutation; test oracle for small uniform measures."""
    if a.size != b.size:
        raise ValueError("brute force needs equal-size measures")
    if a.size > 8:
        raise ValueError(f"brute force limited to 8 atoms, got {a.size}")
    if not (a.is_uniform() and b.is_uniform()):
        raise ValueError("brute force needs uniform weights")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    n = a.size
    best = math.inf
    for perm in itertools.permutations(range(n)):
        total = 0.0
        for i, j in enumerate(perm):
            d = math.sqrt(sum((x - y) ** 2 for x, y in zip(a.points[i], b.points[j])))
            total += d**p
        best = min(best, total)
    return (best / n) ** (1.0 / p)


def default_entropic_reg(C: np.ndarray) -> float:
    positive = C[C > 0]
    if positive.size == 0:
        return 1e-3
    return 1e-3 * float(np.median(positive))


def wasserstein_p_entropic(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    p: float = 1.0,
    reg: float | None = None,
    max_iters: int = 10_000,
    tol: float = 1e-9,
) -> float:
    """Entropic approximation of W_p (log-domain Sinkhorn with reg annealing).

    Returns ``(<P_reg, C>) ** (1/p)`` where ``P_reg`` is the entropic plan.  The
    default ``reg`` is 1e-3 times the median pairwise cost.  ``tol`` bounds the
    L1 violation of the source marginal.
    """
    _check_p(p)
    C = cost_matrix(a, b, p)
    if reg is None:
        reg = default_entropic_reg(C)
    if not reg > 0:
        raise ValueError("reg must be positive")
    plan = sinkhorn_log(a.weights, b.weights, C, reg, max_iters=max_iters, tol=tol)
    cost = float(np.sum(plan * C))
    return max(cost, 0.0) ** (1.0 / p)


def sinkhorn_log(
    wa: np.ndarray, wb: np.ndarray, C: np.ndarray, reg: float, max_iters: int = 10_000, tol: float = 1e-9
) -> np.ndarray:
    """Entropic plan via annealed log-domain Sinkhorn, finished by Newton steps.

    Plain Sinkhorn slows to a crawl at small ``reg``; once the potentials are
    warm, damped Newton steps on the semi-dual (column marginal kept exact)
    reach ``tol`` in a handful of solves.
    """
    if np.any(wa <= 0) or np.any(wb <= 0):
        keep_a, keep_b = wa > 0, wb > 0
        plan = np.zeros(C.shape)
        plan[np.ix_(keep_a, keep_b)] = sinkhorn_log(wa[keep_a], wb[keep_b], C[np.ix_(keep_a, keep_b)], reg, max_iters, tol)
        return plan
    log_a, log_b = np.log(wa), np.log(wb)
    f = np.zeros_like(wa)
    cmax = float(C.max())
    eps = max(reg, cmax / 2.0)
    iters = 0

    def g_of(f, eps):
        return eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))

    def plan_of(f, g, eps):
        return np.exp((f[:, None] + g[None, :] - C) / eps)

    # annealing stages: a few Sinkhorn sweeps per regularisation level, then
    # sweeps at the target level; every sweep counts toward max_iters
    schedule = []
    while eps > reg:
        schedule += [eps] * 50
        eps = max(reg, eps / 2.0)
    eps = reg
    schedule += [reg] * 100
    for level in schedule[:max_iters]:
        iters += 1
        g = g_of(f, level)
        f = level * (log_a - logsumexp((g[None, :] - C) / level, axis=1))

    def dual(f):
        return float(wa @ f + wb @ g_of(f, eps))

    residual = math.inf
    while iters < max_iters:
        iters += 1
        g = g_of(f, eps)
        P = plan_of(f, g, eps)
        rows = P.sum(axis=1)
        grad = wa - rows
        residual = float(np.abs(grad).sum())
        if residual <= tol:
            return P
        H = np.diag(rows) - (P / wb[None, :]) @ P.T
        # gauge freedom (f + c, g - c): pin the first potential
        step = np.zeros_like(f)
        step[1:] = np.linalg.lstsq(H[1:, 1:], eps * grad[1:], rcond=None)[0]
        base = dual(f)
        t = 1.0
        while t > 1e-10 and dual(f + t * step) < base - 1e-15 * abs(base):
            t *= 0.5
        if t <= 1e-10:
            # fall back to a Sinkhorn sweep when Newton stalls
            f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        else:
            f = f + t * step
    if math.isinf(residual):
        residual = float(np.abs(wa - plan_of(f, g_of(f, eps), eps).sum(axis=1)).sum())
    raise ConvergenceError("Sinkhorn did not converge", residual, iters)


def multiscale_wp_upper_bound(
    a: DiscreteMeasure, b: DiscreteMeasure, p: float, s_level: int, t_level: int
) -> float:
    """Certified upper bound on W_p^p from a nested 3-adic cell coupling.

    Cells at level r are the axis-aligned cubes of side 3^-(r+1) anchored at the
    origin.  Working from level ``t_level`` down to ``s_level``, mass that both
    measures place in a common cell is coupled inside that cell (cost at most
    the cell's l2 diameter to the p), each measure keeping the same fraction of
    every atom; what is left is coupled across the unit cube at cost
    ``sqrt(D) ** p``.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if s_level > t_level:
        raise ValueError("s_level must be <= t_level")
    if s_level < 0:
        raise ValueError("levels must be nonnegative")
    for m in (a, b):
        if np.any(m.points < 0) or np.any(m.points > 1):
            raise ValueError("points must lie in [0,1]^D; rescale first")
    D = a.dim
    ra = a.weights.copy()
    rb = b.weights.copy()
    bound = 0.0
    for r in range(t_level, s_level - 1, -1):
        cells_per_axis = 3 ** (r + 1)
        side = 1.0 / cells_per_axis
        ka = np.minimum((a.points * cells_per_axis).astype(np.int64), cells_per_axis - 1)
        kb = np.minimum((b.points * cells_per_axis).astype(np.int64), cells_per_axis - 1)
        keys, inverse = np.unique(np.vstack([ka, kb]), axis=0, return_inverse=True)
        inverse = inverse.ravel()
        ia, ib = inverse[: a.size], inverse[a.size :]
        ma = np.bincount(ia, weights=ra, minlength=len(keys))
        mb = np.bincount(ib, weights=rb, minlength=len(keys))
        matched = np.minimum(ma, mb)
        bound += float(matched.sum()) * (math.sqrt(D) * side) ** p
        with np.errstate(invalid="ignore", divide="ignore"):
            keep_a = np.where(ma > 0, (ma - matched) / ma, 0.0)
            keep_b = np.where(mb > 0, (mb - matched) / mb, 0.0)
        ra = ra * keep_a[ia]
        rb = rb * keep_b[ib]
    residual = 0.5 * (ra.sum() + rb.sum())
    bound += float(residual) * math.sqrt(D) ** p
    return bound


def moments(a: DiscreteMeasure, q: float) -> MomentSummary:
    if not q > 0:
        raise ValueError("q must be positive")
    norms = np.linalg.norm(a.points, axis=1)
    value = float(np.sum(a.weights * norms**q)) ** (1.0 / q)
    sup = max(float(np.abs(a.points).max()), 1.0)
    return MomentSummary(q=q, value=value, sup_norm_max=sup)

"""Trainable score functions and the Monte Carlo denoising objective.

Networks predict the posterior mean E[X_0 | X_t = x]; the score is recovered
as ``(m_t * net - x) / sigma_t^2``.  The posterior mean of an empirical
measure stays inside the data's convex hull, which keeps targets bounded at
every noise level.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion_process import BetaSchedule, marginal_params
from .measure_ot import DiscreteMeasure
from .reverse_sampler import Partition


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


# ---------------------------------------------------------------------------
# spike gate


def spike_gate(a: float, b: float, x):
    """Trapezoid equal to 1 on [-b, b], 0 outside [-a, a], linear in between.

    This is the four-ReLU sum of ``spike_gate_raw`` evaluated in the closed
    form (a - |x|) / (a - b) clipped to [0, 1], which is exactly even in x and
    exactly flat on the plateau.
    """
    if not a > b > 0:
        raise ValueError(f"need a > b > 0, got a={a}, b={b}")
    x = np.asarray(x, dtype=float)
    out = np.clip((a - np.abs(x)) / (a - b), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def spike_gate_raw(a: float, b: float, x):
    """The four-ReLU expression without plateau pinning (for cross-checks)."""
    if not a > b > 0:
        raise ValueError(f"need a > b > 0, got a={a}, b={b}")
    x = np.asarray(x, dtype=float)
    w = a - b
    relu = lambda v: np.maximum(v, 0.0)  # noqa: E731
    return relu((x + a) / w) - relu((x + b) / w) - relu((x - b) / w) + relu((x - a) / w)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    weight_bound: float = 100.0
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[k], self.layer_sizes[k + 1]) or b.shape != (self.layer_sizes[k + 1],):
                raise ValueError(f"layer {k} has shape {W.shape}/{b.shape}, sizes say {self.layer_sizes[k:k + 2]}")
        if self.activation != "relu":
            raise ValueError("only relu is supported")
        if not self.weight_bound > 0:
            raise ValueError("weight_bound must be positive")

    @classmethod
    def init(cls, layer_sizes, rng, weight_bound: float = 100.0) -> "MlpParams":
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        p = cls(list(layer_sizes), weights, biases, weight_bound)
        p.clip()
        return p

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def weight_count(self) -> int:
        return int(sum(W.size + b.size for W, b in zip(self.weights, self.biases)))

    def max_abs(self) -> float:
        return max(max(float(np.abs(W).max()), float(np.abs(b).max(initial=0.0))) for W, b in zip(self.weights, self.biases))

    def clip(self) -> None:
        B = self.weight_bound
        for arr in self.weights + self.biases:
            np.clip(arr, -B, B, out=arr)

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [W.copy() for W in self.weights], [b.copy() for b in self.biases], self.weight_bound)

    def flat(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, u: np.ndarray, keep: bool = False):
        acts = [u]
        h = u
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < self.depth - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients (W0, b0, W1, b1, ...) given dLoss/dOutput."""
        grads = [None] * (2 * self.depth)
        g = grad_out
        for k in range(self.depth - 1, -1, -1):
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.weights[k].T) * (acts[k] > 0)
        return grads

    # text format: header with layer sizes and bound, then row-major values per layer
    def to_text(self) -> str:
        lines = ["layer_sizes " + " ".join(str(s) for s in self.layer_sizes), f"weight_bound {self.weight_bound!r}"]
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            lines.append(f"W{k} " + " ".join(repr(float(v)) for v in W.ravel()))
            lines.append(f"b{k} " + " ".join(repr(float(v)) for v in b))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MlpParams":
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        if not rows or rows[0][0] != "layer_sizes" or rows[1][0] != "weight_bound":
            raise ValueError("model file must start with layer_sizes and weight_bound lines")
        sizes = [int(v) for v in rows[0][1:]]
        bound = float(rows[1][1])
        weights, biases = [], []
        body = rows[2:]
        if len(body) != 2 * (len(sizes) - 1):
            raise ValueError("wrong number of parameter lines for the declared layer sizes")
        for k in range(len(sizes) - 1):
            wrow, brow = body[2 * k], body[2 * k + 1]
            if wrow[0] != f"W{k}" or brow[0] != f"b{k}":
                raise ValueError(f"expected W{k}/b{k} lines")
            weights.append(np.array([float(v) for v in wrow[1:]]).reshape(sizes[k], sizes[k + 1]))
            biases.append(np.array([float(v) for v in brow[1:]]))
        return cls(sizes, weights, biases, bound)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "MlpParams":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# score models


def time_features(schedule: BetaSchedule, t: float) -> tuple[float, float, float]:
    """(log sigma_t^2, m_t, sigma_t^2) for forward time t > 0."""
    mp = marginal_params(schedule, 0.0, t)
    if not mp.sigma2 > 0:
        raise ValueError("time features need t > 0")
    return math.log(mp.sigma2), mp.m, mp.sigma2


class SharedMlpScore:
    """One MLP over (x, log sigma_t^2, m_t) shared across all times."""

    def __init__(self, params: MlpParams, schedule: BetaSchedule):
        self.params = params
        self.schedule = schedule

    @staticmethod
    def layer_sizes(dim: int, width: int = 64, depth: int = 3) -> list[int]:
        return [dim + 2] + [width] * depth + [dim]

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        logs2, m, s2 = time_features(self.schedule, t)
        u = np.hstack([x, np.full((x.shape[0], 1), logs2), np.full((x.shape[0], 1), m)])
        return (m * self.params.forward(u) - x) / s2


def gate_halfwidths(knots: np.ndarray) -> np.ndarray:
    """delta_i: half the smaller neighbouring gap, with sentinels one unit beyond each end."""
    k = np.sort(np.asarray(knots, dtype=float))
    padded = np.concatenate([[k[0] - 1.0], k, [k[-1] + 1.0]])
    gaps = np.diff(padded)
    return 0.5 * np.minimum(gaps[:-1], gaps[1:])


class GatedEnsembleScore:
    """Per-knot networks switched on by spike gates in time.

    s(x, t) = sum_i s_i(x) * gate(delta_i / 2, delta_i / 4)(t - t_i); gates of
    different knots never overlap, so s(x, t_i) = s_i(x) exactly.
    """

    def __init__(self, nets: list[MlpParams], knots, schedule: BetaSchedule):
        knots = np.asarray(knots, dtype=float)
        if len(nets) != knots.size:
            raise ValueError(f"{len(nets)} networks for {knots.size} knots")
        order = np.argsort(knots)
        self.knots = knots[order]
        self.nets = [nets[i] for i in order]
        self.schedule = schedule
        self.delta = gate_halfwidths(self.knots)

    def base(self, i: int, x: np.ndarray) -> np.ndarray:
        _, m, s2 = time_features(self.schedule, float(self.knots[i]))
        return (m * self.nets[i].forward(x) - x) / s2

    def gates(self, t: float) -> np.ndarray:
        return np.array([spike_gate(d / 2, d / 4, t - k) for d, k in zip(self.delta, self.knots)])

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        for i, g in enumerate(self.gates(t)):
            if g != 0.0:
                out = out + g * self.base(i, x)
        return out


def build_gated_ensemble(per_step_nets: list[MlpParams], partition: Partition, schedule: BetaSchedule) -> GatedEnsembleScore:
    """Ensemble over the score query times of ``partition`` (one network each)."""
    knots = partition.query_times()
    if len(per_step_nets) != knots.size:
        raise ValueError(f"need {knots.size} networks, got {len(per_step_nets)}")
    return GatedEnsembleScore(per_step_nets, knots, schedule)


# ---------------------------------------------------------------------------
# Monte Carlo objective


@dataclass
class McBatch:
    """Fixed Monte Carlo draws for the weighted denoising objective.

    Row r belongs to knot ``knot[r]``; ``coef[r]`` is h_i / m_i.
    """

    times: np.ndarray
    steps: np.ndarray
    knot: np.ndarray
    x0: np.ndarray
    z: np.ndarray
    xt: np.ndarray
    m: np.ndarray
    sigma2: np.ndarray
    coef: np.ndarray


def training_knots(partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Forward times T - t_i and step sizes h_i for i = 0..N-1 (all strictly positive)."""
    return partition.query_times(), partition.steps


def _mc_counts(m_list, n_knots: int) -> np.ndarray:
    counts = np.full(n_knots, int(m_list)) if np.isscalar(m_list) else np.asarray(m_list, dtype=int)
    if counts.shape != (n_knots,):
        raise ValueError(f"need one Monte Carlo count per knot ({n_knots}), got {counts.shape}")
    if np.any(counts < 1):
        raise ValueError("every Monte Carlo count must be >= 1")
    return counts


def draw_mc_batch(measure: DiscreteMeasure, partition: Partition, schedule: BetaSchedule, m_list, rng) -> McBatch:
    rng = np.random.default_rng(rng)
    times, steps = training_knots(partition)
    if np.any(times <= 0):
        raise ValueError("training knots must be strictly positive")
    counts = _mc_counts(m_list, times.size)
    knot = np.repeat(np.arange(times.size), counts)
    total = int(counts.sum())
    idx = rng.choice(measure.size, size=total, p=measure.weights)
    z = rng.standard_normal((total, measure.dim))
    params = [marginal_params(schedule, 0.0, float(t)) for t in times]
    m = np.array([p.m for p in params])[knot]
    s2 = np.array([p.sigma2 for p in params])[knot]
    x0 = measure.points[idx]
    xt = m[:, None] * x0 + np.sqrt(s2)[:, None] * z
    coef = (steps / counts)[knot]
    return McBatch(times, steps, knot, x0, z, xt, m, s2, coef)


def batch_loss(score_fn, batch: McBatch) -> float:
    total = 0.0
    for i, t in enumerate(batch.times):
        rows = batch.knot == i
        if not np.any(rows):
            continue
        s = score_fn(batch.xt[rows], float(t))
        resid = s + batch.z[rows] / np.sqrt(batch.sigma2[rows])[:, None]
        total += float(np.sum(batch.coef[rows] * np.sum(resid * resid, axis=1)))
    return total


def mc_score_matching_loss(
    score_fn, measure: DiscreteMeasure, partition: Partition, m_list, rng, schedule: BetaSchedule | None = None
) -> float:
    """sum_i (h_i / m_i) sum_j ||s(X_ij, t_i) + Z_ij / sigma_{t_i}||^2 over the sampler's query times."""
    schedule = schedule or BetaSchedule()
    return batch_loss(score_fn, draw_mc_batch(measure, partition, schedule, m_list, rng))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    partition: Partition
    mc_per_step: object = 8
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    steps: int = 2000
    rng_seed: int = 0
    schedule: BetaSchedule = field(default_factory=BetaSchedule)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.steps < 0 or self.learning_rate < 0:
            raise ValueError("steps and learning_rate must be nonnegative")
        _mc_counts(self.mc_per_step, self.partition.N)


def _shared_inputs(batch: McBatch) -> np.ndarray:
    return np.hstack([batch.xt, np.log(batch.sigma2)[:, None], batch.m[:, None]])


def shared_loss_and_grad(params: MlpParams, batch: McBatch, inputs: np.ndarray | None = None):
    """Objective value and parameter gradients for SharedMlpScore on fixed draws."""
    u = inputs if inputs is not None else _shared_inputs(batch)
    out, acts = params.forward(u, keep=True)
    m = batch.m[:, None]
    s2 = batch.sigma2[:, None]
    resid = (m * out - batch.xt) / s2 + batch.z / np.sqrt(s2)
    loss = float(np.sum(batch.coef * np.sum(resid * resid, axis=1)))
    grad_out = 2.0 * batch.coef[:, None] * resid * (m / s2)
    return loss, params.backward(acts, grad_out)


class _Adam:
    def __init__(self, arrays, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.mom = [np.zeros_like(a) for a in arrays]
        self.vel = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for a, g, mo, ve in zip(arrays, grads, self.mom, self.vel):
            mo *= self.b1
            mo += (1 - self.b1) * g
            ve *= self.b2
            ve += (1 - self.b2) * g * g
            a -= self.lr * (mo / c1) / (np.sqrt(ve / c2) + self.eps)


def _optimise(params: MlpParams, loss_and_grad, config: TrainConfig) -> list[float]:
    arrays = params.flat()
    opt = _Adam(arrays, config.learning_rate) if config.optimizer == "adam" else None
    trace = []
    for step in range(config.steps + 1):
        loss, grads = loss_and_grad(params)
        if not math.isfinite(loss):
            raise TrainingDivergence(step, loss)
        trace.append(loss)
        if step == config.steps:
            break
        if opt is not None:
            opt.step(arrays, grads)
        else:
            for a, g in zip(arrays, grads):
                a -= config.learning_rate * g
        params.clip()
    return trace


def train(params: MlpParams, measure: DiscreteMeasure, config: TrainConfig) -> tuple[SharedMlpScore, list[float]]:
    """Full-batch training of a shared MLP score on draws fixed by the seed.

    Returns the trained score (holding a copy of the parameters) and the loss
    trace, whose entry k is the objective before update k.
    """
    if params.layer_sizes[0] != measure.dim + 2 or params.layer_sizes[-1] != measure.dim:
        raise ValueError(f"layer sizes {params.layer_sizes} do not fit dimension {measure.dim}")
    params = params.copy()
    batch = draw_mc_batch(measure, config.partition, config.schedule, config.mc_per_step, config.rng_seed)
    inputs = _shared_inputs(batch)
    trace = _optimise(params, lambda p: shared_loss_and_grad(p, batch, inputs), config)
    return SharedMlpScore(params, config.schedule), trace


def train_gated_ensemble(
    nets: list[MlpParams], measure: DiscreteMeasure, config: TrainConfig
) -> tuple[GatedEnsembleScore, list[float]]:
    """Train one network per query time on that knot's draws; the trace is the summed objective."""
    batch = draw_mc_batch(measure, config.partition, config.schedule, config.mc_per_step, config.rng_seed)
    if len(nets) != batch.times.size:
        raise ValueError(f"need {batch.times.size} networks, got {len(nets)}")
    nets = [n.copy() for n in nets]
    rows = [batch.knot == i for i in range(batch.times.size)]

    def loss_and_grad_all(_):
        total = 0.0
        grads = []
        for i, net in enumerate(nets):
            sub = _sub_batch(batch, rows[i])
            loss, g = shared_loss_and_grad(net, sub, sub.xt)
            total += loss
            grads += g
        return total, grads

    class _Stack:
        # lets the shared optimiser loop update every network at once
        def __init__(self, nets):
            self.nets = nets

        def flat(self):
            return [a for n in self.nets for a in n.flat()]

        def clip(self):
            for n in self.nets:
                n.clip()

    stack = _Stack(nets)
    trace = _optimise(stack, loss_and_grad_all, config)
    return build_gated_ensemble(nets, config.partition, config.schedule), trace


def _sub_batch(batch: McBatch, rows: np.ndarray) -> McBatch:
    return McBatch(
        batch.times, batch.steps, batch.knot[rows], batch.x0[rows], batch.z[rows], batch.xt[rows],
        batch.m[rows], batch.sigma2[rows], batch.coef[rows],
    )


def write_loss_trace(trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for k, v in enumerate(trace):
            writer.writerow([k, repr(float(v))])

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgmlab.diffusion_process import BetaSchedule, marginal_params
from sgmlab.harness.checks import gradient_check
from sgmlab.measure_ot import DiscreteMeasure
from sgmlab.reverse_sampler import build_partition
from sgmlab.score_model import (
    GatedEnsembleScore,
    MlpParams,
    SharedMlpScore,
    TrainConfig,
    TrainingDivergence,
    build_gated_ensemble,
    draw_mc_batch,
    gate_halfwidths,
    mc_score_matching_loss,
    spike_gate,
    spike_gate_raw,
    train,
    train_gated_ensemble,
    write_loss_trace,
)
from sgmlab.score_oracle import ExactScore, ZeroScore, verify_denoising_identity

SCHED = BetaSchedule()
SMALL = build_partition(2.0, 0.1, 0.5)


# --- gates


def test_gate_values():
    assert spike_gate(1.0, 0.5, 0.0) == 1.0
    assert spike_gate(1.0, 0.5, 1.0) == 0.0
    assert spike_gate(1.0, 0.5, -1.0) == 0.0
    # [DERIVED] halfway down the ramp from 0.5 to 1
    assert spike_gate(1.0, 0.5, 0.75) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        spike_gate(0.5, 1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.05, 0.95), st.floats(-20, 20))
def test_gate_shape(a, frac, x):
    b = a * frac
    g = spike_gate(a, b, x)
    assert 0.0 <= g <= 1.0
    assert g == spike_gate(a, b, -x)
    if abs(x) <= b:
        assert g == 1.0
    if abs(x) >= a:
        assert g == 0.0
    assert g == pytest.approx(float(spike_gate_raw(a, b, x)), abs=1e-9)


def test_gate_halfwidths():
    # sentinels sit one unit beyond each end
    np.testing.assert_allclose(gate_halfwidths([0.0, 1.0, 3.0]), [0.5, 0.5, 0.5])
    np.testing.assert_allclose(gate_halfwidths([0.0, 4.0]), [0.5, 0.5])


def _nets(count, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return [MlpParams.init([dim, 8, dim], rng) for _ in range(count)]


def test_ensemble_at_knots_equals_base():
    nets = _nets(SMALL.N)
    ens = build_gated_ensemble(nets, SMALL, SCHED)
    x = np.random.default_rng(1).normal(size=(5, 2))
    for i, t in enumerate(ens.knots):
        np.testing.assert_array_equal(ens(x, float(t)), ens.base(i, x))


def test_ensemble_between_knots_is_zero():
    ens = GatedEnsembleScore(_nets(2), [1.0, 3.0], SCHED)
    np.testing.assert_array_equal(ens(np.ones((3, 2)), 2.0), np.zeros((3, 2)))


def test_ensemble_on_ramp_scales_base():
    ens = GatedEnsembleScore(_nets(2), [1.0, 3.0], SCHED)
    # half-width 0.5 gives gate(0.25, 0.125); t = 1.1875 sits halfway down the ramp
    x = np.ones((2, 2))
    np.testing.assert_allclose(ens(x, 1.1875), 0.5 * ens.base(0, x), rtol=1e-12)
    np.testing.assert_allclose(ens(x, 2.8125), 0.5 * ens.base(1, x), rtol=1e-12)


def test_ensemble_size_mismatch():
    with pytest.raises(ValueError):
        build_gated_ensemble(_nets(2), SMALL, SCHED)


# --- networks


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=5), st.integers(0, 2**32 - 1))
def test_mlp_shape_and_text_round_trip(sizes, seed):
    params = MlpParams.init(sizes, seed)
    assert params.depth == len(sizes) - 1
    assert params.weight_count == sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    u = np.random.default_rng(seed).normal(size=(4, sizes[0]))
    out = params.forward(u)
    assert out.shape == (4, sizes[-1])
    back = MlpParams.from_text(params.to_text())
    np.testing.assert_array_equal(back.forward(u), out)


def test_model_file_layout(tmp_path):
    params = MlpParams.init([2, 3, 2], 0)
    params.save(tmp_path / "m.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert lines[0] == "layer_sizes 2 3 2"
    assert lines[2].startswith("W0 ") and len(lines[2].split()) == 1 + 6
    assert MlpParams.load(tmp_path / "m.txt").layer_sizes == [2, 3, 2]
    (tmp_path / "bad.txt").write_text("layer_sizes 2 2\nweight_bound 1\nW0 1 2 3 4\n")
    with pytest.raises(ValueError):
        MlpParams.load(tmp_path / "bad.txt")


def test_shared_score_output_shape_and_determinism():
    net = SharedMlpScore(MlpParams.init(SharedMlpScore.layer_sizes(3, 8, 2), 0), SCHED)
    x = np.random.default_rng(0).normal(size=(6, 3))
    a, b = net(x, 0.7), net(x, 0.7)
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, b)


def test_backprop_matches_finite_differences():
    for seed in range(3):
        assert gradient_check(seed) <= 1e-4


# --- Monte Carlo objective


def test_mc_counts_validated():
    mu = DiscreteMeasure.uniform([[0.0]])
    with pytest.raises(ValueError):
        draw_mc_batch(mu, SMALL, SCHED, [1] * (SMALL.N - 1), 0)
    with pytest.raises(ValueError):
        draw_mc_batch(mu, SMALL, SCHED, 0, 0)


def test_true_score_has_zero_residual_for_single_atom():
    mu = DiscreteMeasure.uniform([[0.0, 0.0]])
    assert mc_score_matching_loss(ExactScore(mu, SCHED), mu, SMALL, 5, 1) == pytest.approx(0.0, abs=1e-20)
    analytic = lambda x, t: -x / marginal_params(SCHED, 0.0, t).sigma2  # noqa: E731
    assert mc_score_matching_loss(analytic, mu, SMALL, 5, 1) == pytest.approx(0.0, abs=1e-20)


def test_exact_score_beats_zero_on_shared_draws():
    mu = DiscreteMeasure.uniform(np.random.default_rng(2).normal(size=(8, 2)))
    assert mc_score_matching_loss(ExactScore(mu, SCHED), mu, SMALL, 20, 3) <= mc_score_matching_loss(ZeroScore(), mu, SMALL, 20, 3)


def test_doubling_draws_halves_variance():
    mu = DiscreteMeasure.uniform([[-1.0], [1.0]])
    # 2000 seeds keep the sampling error of the variance ratio near 5%
    seeds = range(2000)
    single = np.var([mc_score_matching_loss(ZeroScore(), mu, SMALL, 4, s) for s in seeds], ddof=1)
    double = np.var([mc_score_matching_loss(ZeroScore(), mu, SMALL, 8, 10_000 + s) for s in seeds], ddof=1)
    assert 0.4 <= double / single <= 0.6


# --- training


def _cfg(**kw):
    base = dict(partition=SMALL, mc_per_step=16, learning_rate=3e-3, steps=50, rng_seed=0, schedule=SCHED)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_leaves_params():
    mu = DiscreteMeasure.uniform([[0.5, 0.5], [-0.5, 0.0]])
    params = MlpParams.init(SharedMlpScore.layer_sizes(2, 8, 2), 0)
    score, trace = train(params, mu, _cfg(learning_rate=0.0, steps=5, optimizer="sgd"))
    for a, b in zip(score.params.flat(), params.flat()):
        np.testing.assert_array_equal(a, b)
    assert len(set(trace)) == 1


def test_training_is_deterministic_and_decreases_loss():
    mu = DiscreteMeasure.uniform([[0.5, 0.5], [-0.5, 0.0]])
    params = MlpParams.init(SharedMlpScore.layer_sizes(2, 16, 2), 0)
    _, a = train(params, mu, _cfg())
    _, b = train(params, mu, _cfg())
    assert a == b
    assert a[-1] < a[0]
    assert len(a) == 51


def test_clipping_holds_after_training():
    mu = DiscreteMeasure.uniform([[3.0, 3.0]])
    params = MlpParams.init(SharedMlpScore.layer_sizes(2, 8, 2), 0, weight_bound=0.3)
    score, _ = train(params, mu, _cfg(learning_rate=0.1))
    assert score.params.max_abs() <= 0.3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    mu = DiscreteMeasure.uniform([[1.0, 1.0]])
    params = MlpParams.init(SharedMlpScore.layer_sizes(2, 8, 2), 0, weight_bound=1e300)
    with pytest.raises(TrainingDivergence) as info:
        train(params, mu, _cfg(optimizer="sgd", learning_rate=1e30, steps=20))
    assert info.value.step >= 1


def test_single_atom_training_recovers_score():
    x0 = np.array([[0.8]])
    mu = DiscreteMeasure.uniform(x0)
    params = MlpParams.init(SharedMlpScore.layer_sizes(1, 16, 2), 1)
    score, _ = train(params, mu, _cfg(steps=500, learning_rate=1e-2))
    rng = np.random.default_rng(4)
    for t in SMALL.query_times():
        trained = verify_denoising_identity(mu, SCHED, float(t), score, 10_000, rng)[0]
        zero = verify_denoising_identity(mu, SCHED, float(t), ZeroScore(), 10_000, rng)[0]
        assert trained <= 0.1 * zero


def test_gated_ensemble_training():
    mu = DiscreteMeasure.uniform([[0.5, 0.5], [-0.5, 0.0]])
    nets = [MlpParams.init([2, 8, 2], s) for s in range(SMALL.N)]
    ens, trace = train_gated_ensemble(nets, mu, _cfg(steps=30))
    assert trace[-1] < trace[0]
    assert isinstance(ens, GatedEnsembleScore)


def test_loss_trace_file(tmp_path):
    write_loss_trace([3.0, 2.5], tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines() == ["step,loss", "0,3.0", "1,2.5"]


def test_train_rejects_mismatched_network():
    mu = DiscreteMeasure.uniform([[0.0, 0.0]])
    with pytest.raises(ValueError):
        train(MlpParams.init([3, 4, 2], 0), mu, _cfg())
    assert math.isfinite(SMALL.count_bound())

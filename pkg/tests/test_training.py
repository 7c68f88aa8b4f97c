import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifsampling.boltzmann import BoltzmannTarget, read_rbm
from lifsampling.network import SamplingNetwork, build_network, clamp_conditional
from lifsampling.noise import PoissonSource
from lifsampling.params import ConfigurationError
from lifsampling.substrate import IDEAL, ActivationFit, Substrate, discretize
from lifsampling.training import (ShadowParams, Statistics, TrainConfig, TrainingDiverged, bottom_up_mask,
                                  initial_shadow_uniform, sleep_statistics, stratified_batch, train_data,
                                  train_target, update, wake_statistics_analytic, wake_statistics_clamped)
from oracles import SYMMETRIC_RATE_EXC, momentum_steps

FIT = ActivationFit(230.0, 0.33, 4.36)


def _stats(mean, second):
    return Statistics(np.asarray(mean, float), np.asarray(second, float))


def test_config_invariants():
    for bad in (dict(eta=0.0), dict(momentum=1.0), dict(momentum=-0.1), dict(sleep_duration=0.0),
                dict(wake_duration=-1.0), dict(iterations=-1)):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


def test_analytic_wake_of_empty_target():
    s = wake_statistics_analytic(BoltzmannTarget(np.zeros((4, 4)), np.zeros(4)))
    assert np.allclose(s.mean, 0.5)
    assert np.allclose(s.upper(), 0.25)


def test_analytic_wake_strong_coupling():
    W = np.array([[0.0, 30.0], [30.0, 0.0]])
    s = wake_statistics_analytic(BoltzmannTarget(W, np.array([-15.0, -14.0])))
    assert s.second[0, 1] == pytest.approx(min(s.mean), rel=1e-3)


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6))
def test_analytic_wake_is_consistent(seed):
    s = wake_statistics_analytic(BoltzmannTarget.random_beta(4, seed=seed))
    assert s.is_consistent()
    assert np.allclose(np.diag(s.second), s.mean)


def test_inconsistent_statistics_detected():
    assert not _stats([0.2, 0.5], [[0.2, 0.3], [0.3, 0.5]]).is_consistent()
    assert not _stats([1.2, 0.5], [[1.2, 0.1], [0.1, 0.5]]).is_consistent()


def test_fixed_point_update_is_zero():
    s = wake_statistics_analytic(BoltzmannTarget.random_beta(3, seed=1))
    p = ShadowParams(np.zeros((3, 3)), np.zeros(3))
    out = update(p, s, s, TrainConfig(eta=1.0, momentum=0.6))
    assert not out.W.any() and not out.b.any()


def test_bias_step_by_direct_substitution():
    wake = _stats([1.0, 0.5], [[1.0, 0.5], [0.5, 0.5]])
    sleep = _stats([0.0, 0.5], [[0.0, 0.0], [0.0, 0.5]])
    out = update(ShadowParams(np.zeros((2, 2)), np.zeros(2)), wake, sleep, TrainConfig(eta=1.0, momentum=0.0))
    assert out.b.tolist() == [1.0, 0.0]
    assert out.W.tolist() == [[0.0, 0.5], [0.5, 0.0]]


def test_momentum_recurrence():
    wake = _stats([0.7], [[0.7]])
    sleep = _stats([0.2], [[0.2]])
    cfg = TrainConfig(eta=0.4, momentum=0.6)
    p = ShadowParams(np.zeros((1, 1)), np.zeros(1))
    steps = []
    for _ in range(4):
        new = update(p, wake, sleep, cfg)
        steps.append(new.b[0] - p.b[0])
        p = new
    assert steps == pytest.approx(momentum_steps(0.5, 0.4, 0.6, 4), abs=1e-15)
    assert steps[1] == pytest.approx(1.6 * 0.4 * 0.5)


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6))
def test_updates_preserve_symmetry_exactly(seed):
    rng = np.random.default_rng(seed)
    n = 5
    p = initial_shadow_uniform(n, seed=seed)
    cfg = TrainConfig(eta=0.7, momentum=0.6)
    for _ in range(20):
        z1 = rng.integers(0, 2, (50, n))
        z2 = rng.integers(0, 2, (50, n))
        p = update(p, Statistics.from_states(z1), Statistics.from_states(z2), cfg)
        assert np.array_equal(p.W, p.W.T)
        assert not np.diag(p.W).any()


def test_near_fixed_point_change_is_bounded():
    cfg = TrainConfig(eta=1.0, momentum=0.6)
    p = ShadowParams(np.zeros((2, 2)), np.zeros(2), vel_b=np.array([0.5, -0.3]))
    base = _stats([0.4, 0.6], [[0.4, 0.2], [0.2, 0.6]])
    v0 = np.abs(p.vel_b).max()
    for k in range(1, 4):
        wake = _stats(base.mean + 1e-3 * (-1) ** k, base.second)
        new = update(p, wake, base, cfg)
        change = np.abs(new.b - p.b).max()
        assert change <= cfg.momentum ** k * v0 + cfg.eta * 1e-3 / (1 - cfg.momentum) + 1e-15
        p = new


def test_update_dimension_mismatch():
    s2 = _stats([0.5, 0.5], np.full((2, 2), 0.25))
    with pytest.raises(ConfigurationError):
        update(ShadowParams(np.zeros((3, 3)), np.zeros(3)), s2, s2, TrainConfig())


def test_update_respects_mask():
    wake = _stats([0.5] * 3, np.full((3, 3), 0.4))
    sleep = _stats([0.5] * 3, np.full((3, 3), 0.1))
    mask = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], bool)
    out = update(ShadowParams(np.zeros((3, 3)), np.zeros(3)), wake, sleep, TrainConfig(), mask)
    assert out.W[0, 2] == 0 and out.W[0, 1] > 0


def test_shadow_at_half_gives_constant_hardware_weight():
    emitted = {discretize(3.5) for _ in range(10)} | {discretize(np.float64(3.5)) for _ in range(10)}
    assert emitted == {(4, 0)}


def test_sleep_statistics_untrained_symmetric_network():
    net = SamplingNetwork(3, noise=PoissonSource(rate_exc=SYMMETRIC_RATE_EXC), substrate=Substrate(variability=IDEAL))
    stats, states = sleep_statistics(net, 2e4, seed=3)
    assert states.shape == (20000, 3)
    blocks = states.reshape(50, 400, 3).mean(axis=1)
    sigma = blocks.std(axis=0, ddof=1) / np.sqrt(50)
    assert np.all(np.abs(stats.mean - 0.5) < 3 * sigma)


def test_sleep_sample_count_and_guards():
    net = SamplingNetwork(2)
    _, states = sleep_statistics(net, 1e3, seed=0, sample_period=1.0)
    assert states.shape[0] == 1000
    with pytest.raises(ConfigurationError):
        sleep_statistics(net, 1e3, clamps=clamp_conditional({0: 1}))
    with pytest.raises(ConfigurationError):
        sleep_statistics(net, 0.0)


@pytest.fixture(scope="module")
def small_rbm_net():
    return build_network([6, 4, 2], Substrate(), noise=PoissonSource())


def test_bottom_up_mask(small_rbm_net):
    active = bottom_up_mask(small_rbm_net)
    v, h, lab = (small_rbm_net.layer(k) for k in range(3))
    assert not active[np.ix_(v, h)].any() and not active[np.ix_(lab, h)].any()
    assert active[np.ix_(h, v)].all() and active[np.ix_(h, lab)].all()
    with pytest.raises(ConfigurationError):
        bottom_up_mask(SamplingNetwork(3))


def test_clamped_wake_all_black_images(small_rbm_net):
    images = np.ones((2, 6), dtype=np.uint8)
    stats = wake_statistics_clamped(small_rbm_net, images, [0, 1], 200.0, seed=1)
    v, lab = small_rbm_net.layer(0), small_rbm_net.layer(2)
    assert np.all(stats.mean[v] >= 0.95)
    assert np.allclose(stats.mean[lab], 0.5, atol=0.05)
    assert stats.is_consistent()
    with pytest.raises(ConfigurationError):
        wake_statistics_clamped(small_rbm_net, images, [0, 1], 0.0)


def test_stratified_batch_seven_per_class():
    labels = np.repeat(np.arange(4), 20)
    batch = stratified_batch(labels, 7, np.random.default_rng(0))
    assert batch.size == 28
    assert np.bincount(labels[batch]).tolist() == [7, 7, 7, 7]
    assert np.unique(batch).size == 28
    with pytest.raises(ConfigurationError, match="smallest class has 5"):
        stratified_batch(np.repeat(np.arange(2), 5), 7, np.random.default_rng(0))


def test_zero_iterations_returns_initial_parameters():
    t = BoltzmannTarget.random_beta(3, seed=0)
    net = build_network(t)
    init = initial_shadow_uniform(3, seed=1)
    res = train_target(net, t, TrainConfig(iterations=0), init=init)
    assert np.array_equal(res.W, init.W) and np.array_equal(res.b, init.b)
    assert res.best_iteration == -1 and res.trace == []


@pytest.fixture(scope="module")
def short_training(tmp_path_factory):
    t = BoltzmannTarget.random_beta(3, seed=2)
    net = build_network(t)
    path = tmp_path_factory.mktemp("train") / "trace.csv"
    res = train_target(net, t, TrainConfig(iterations=15, sleep_duration=2000.0, seed=4),
                       init=initial_shadow_uniform(3, seed=4), trace_path=path)
    return net, res, path


def test_best_iterate_property(short_training):
    net, res, _ = short_training
    metrics = [row.metric for row in res.trace]
    assert len(metrics) == 15
    assert res.best_metric == min(metrics) == metrics[res.best_iteration]
    assert np.array_equal(net.W, res.W) and np.array_equal(net.b, res.b)
    assert metrics[-1] < metrics[0]


def test_trace_csv(short_training):
    _, res, path = short_training
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["iteration", "metric", "mean_abs_dw", "clip_fraction"]
    assert [float(r["metric"]) for r in rows] == [row.metric for row in res.trace]


def test_training_is_deterministic(short_training):
    t = BoltzmannTarget.random_beta(3, seed=2)
    res = train_target(build_network(t), t, TrainConfig(iterations=15, sleep_duration=2000.0, seed=4),
                       init=initial_shadow_uniform(3, seed=4))
    assert [r.metric for r in res.trace] == [r.metric for r in short_training[1].trace]


def test_divergence_guard_aborts_with_trace():
    t = BoltzmannTarget.random_beta(3, seed=0)
    net = build_network(t, fit=FIT)
    with pytest.raises(TrainingDiverged) as err:
        train_target(net, t, TrainConfig(eta=200.0, iterations=10, sleep_duration=2000.0),
                     init=ShadowParams(net.W, net.b))
    trace = err.value.trace
    assert trace and trace[-1].metric > 10 * trace[0].metric


def test_size_mismatch():
    with pytest.raises(ConfigurationError):
        train_target(SamplingNetwork(2), BoltzmannTarget.random_beta(3, seed=0), TrainConfig(iterations=1))


def test_train_data_smoke_with_checkpoints(tmp_path, small_rbm_net):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 2, (20, 6)).astype(np.uint8)
    labels = np.repeat([0, 1], 10)
    calls = []

    def evaluate(net):
        calls.append(1)
        return 1.0 / len(calls)

    cfg = TrainConfig(eta=0.4, iterations=4, wake_duration=20.0, per_class=2, eval_every=2, checkpoint_every=2,
                      warmup=10.0)
    res = train_data(small_rbm_net, images, labels, cfg, evaluate=evaluate, checkpoint_dir=tmp_path,
                     trace_path=tmp_path / "t.csv")
    assert len(calls) == 3  # iterations 0, 2 and the final iterate
    assert res.best_iteration == 4
    assert len(res.trace) == 5
    rbm = read_rbm(tmp_path / "checkpoint_00004.rbm")
    assert rbm.W.shape == (8, 4)
    side = np.load(tmp_path / "checkpoint_00002_shadow.npz")
    assert set(side.files) == {"W", "b", "vel_W", "vel_b"}
    assert np.array_equal(small_rbm_net.W, small_rbm_net.W.T)

import numpy as np
import pytest

from lifsampling.boltzmann import BoltzmannTarget
from lifsampling.dynamics import refractory_states
from lifsampling.network import (ClampStimulus, SamplingNetwork, build_network, clamp_conditional,
                                 empirical_distribution, read_states_csv, write_states_csv)
from lifsampling.noise import PoissonSource, RandomNetworkSpec
from lifsampling.params import SAMPLING_NEURON, ConfigurationError
from lifsampling.substrate import IDEAL, Substrate
from oracles import SYMMETRIC_RATE_EXC, kl

IDEAL_SUB = Substrate(variability=IDEAL)


def _product_of_marginals(p, n):
    idx = np.arange(2 ** n)
    bits = (idx[:, None] >> np.arange(n)) & 1
    m = (p[:, None] * bits).sum(axis=0)
    return np.prod(np.where(bits == 1, m, 1 - m), axis=1)


def test_flat_poisson_network_sizes():
    net = build_network(BoltzmannTarget.random_beta(5, seed=0))
    assert (net.n, net.n_bias, net.n_rn) == (5, 1, 0)
    assert isinstance(net.noise, PoissonSource)


def test_rbm_network_sizes_and_topology():
    net = build_network([144, 60, 4])
    assert (net.n, net.n_bias, net.n_rn) == (208, 1, 400)
    assert net.n_neurons == 609
    v, h, lab = net.layer(0), net.layer(1), net.layer(2)
    for layer in (v, h, lab):
        assert not net.mask[np.ix_(layer, layer)].any()
    assert not net.mask[np.ix_(v, lab)].any()
    assert net.mask[np.ix_(v, h)].all() and net.mask[np.ix_(h, lab)].all()
    rng = np.random.default_rng(0)
    W = rng.normal(size=(208, 208))
    net.set_shadow(W + W.T)
    assert not net.W[np.ix_(h, h)].any() and np.array_equal(net.W, net.W.T)


def test_layered_network_rejects_within_layer_couplings():
    with pytest.raises(ConfigurationError):
        SamplingNetwork(6, layers=[3, 3], couplings=[(0, 0)])
    with pytest.raises(ConfigurationError):
        SamplingNetwork(6, layers=[3, 2])


def test_shadow_weights_must_be_symmetric():
    net = SamplingNetwork(3)
    with pytest.raises(ConfigurationError):
        net.set_shadow(np.triu(np.ones((3, 3)), 1))
    with pytest.raises(ConfigurationError):
        net.set_shadow(np.zeros((2, 2)))


def test_hardware_weights_are_discretized_and_clipped():
    net = SamplingNetwork(2)
    net.set_shadow(np.array([[0.0, -20.0], [-20.0, 0.0]]), np.array([2.5, -0.4]))
    W_hw, b_hw = net.hardware_weights()
    assert W_hw[0, 1] == -15 and b_hw.tolist() == [3, 0]
    assert net.clip_fraction() == pytest.approx(1 / 3)


SYMMETRIC_NOISE = PoissonSource(rate_exc=SYMMETRIC_RATE_EXC, rate_inh=300.0)


@pytest.fixture(scope="module")
def zero_target_run():
    target = BoltzmannTarget(np.zeros((3, 3)), np.zeros(3))
    net = build_network(target, IDEAL_SUB, noise=SYMMETRIC_NOISE)
    assert not net.hardware_weights()[1].any()
    return net.run(4e4, seed=1).states


def test_untrained_marginals_are_half(zero_target_run):
    z = zero_target_run
    blocks = z[:40000].reshape(100, 400, 3).mean(axis=1)
    sigma = blocks.std(axis=0, ddof=1) / np.sqrt(100)  # batch-means error, accounts for autocorrelation
    assert np.all(np.abs(z.mean(axis=0) - 0.5) < 3 * sigma)


def test_zero_coupling_factorizes(zero_target_run):
    p = empirical_distribution(zero_target_run)
    assert kl(p, _product_of_marginals(p, 3)) < 0.01


def test_clamp_all_on_gives_all_ones():
    net = SamplingNetwork(4, substrate=IDEAL_SUB)
    net.b[:] = -5
    clamps = clamp_conditional({k: 1 for k in range(4)})
    rec = net.run(500.0, clamps, seed=3, warmup=0.0)
    settled = rec.states[rec.sample_times > 20.0]
    assert settled.mean() > 0.95
    assert np.mean(settled.all(axis=1)) > 0.8


def test_clamp_efficacy_on_and_off():
    net = SamplingNetwork(3, substrate=Substrate())
    clamps = clamp_conditional({0: 0, 1: 1})
    z = net.run(2000.0, clamps, seed=5).states
    assert z[:, 1].mean() >= 0.95
    assert z[:, 0].mean() <= 0.05
    assert 0.2 < z[:, 2].mean() < 0.8


def test_clamp_efficacy_with_random_network():
    net = SamplingNetwork(3, noise=RandomNetworkSpec(), substrate=Substrate())
    z = net.run(2000.0, clamp_conditional({0: 0, 1: 1}), seed=5).states
    assert z[:, 1].mean() >= 0.95 and z[:, 0].mean() <= 0.05


def test_clamp_conditional_empty_and_validation():
    assert clamp_conditional({}) == []
    (c,) = clamp_conditional({2: 1, 0: 0})
    assert c.ids.tolist() == [0, 2] and c.states.tolist() == [0, 1]
    assert (c.rate, c.multiplicity, c.weight) == (100.0, 5, 15)
    with pytest.raises(ConfigurationError):
        ClampStimulus([0], [1], multiplicity=0)
    with pytest.raises(ConfigurationError):
        ClampStimulus([0, 0], [0, 1])
    with pytest.raises(ConfigurationError):
        ClampStimulus([0], [2])


def test_clamp_events_respect_onset_offset():
    c = ClampStimulus([1], [1], onset=10.0, offset=40.0)
    ev = c.events(100.0, 50.0, weight_unit=1.0)
    assert np.unique(ev.times).tolist() == [110.0, 120.0, 130.0]
    assert ev.times.size == 15
    assert c.events(0.0, 5.0, 1.0).times.size == 0


def test_short_run_after_initial_spike_is_all_ones():
    net = SamplingNetwork(3, substrate=IDEAL_SUB)
    sess = net.session(seed=0)
    sess.state.u[:3] = 0.0  # above threshold: every unit spikes in the first step
    rec = sess.run(0.5 * SAMPLING_NEURON.tau_ref, sample_period=2.0)
    assert rec.states.tolist() == [[1, 1, 1]]


def test_online_states_match_offline_reconstruction():
    net = SamplingNetwork(3, substrate=Substrate())
    net.set_shadow(np.array([[0, 3.0, -2], [3, 0, 1], [-2, 1, 0]]), np.array([1.0, -2, 0]))
    sess = net.session(seed=2)
    rec = sess.run(300.0)
    trains = [rec.spike_train(k) for k in range(3)]
    offline = refractory_states(trains, sess.circuit.tau_ref_effective[:3], rec.sample_times)
    assert np.array_equal(offline, rec.states)


def test_empirical_distribution_examples():
    zeros = np.zeros((10, 3), dtype=np.uint8)
    p = empirical_distribution(zeros)
    assert p[0] == 1.0 and p.sum() == 1.0
    alt = np.array([[0, 1], [1, 0]] * 5, dtype=np.uint8)
    assert empirical_distribution(alt).tolist() == [0.0, 0.5, 0.5, 0.0]
    assert empirical_distribution(alt, subset=[1]).tolist() == [0.5, 0.5]
    rng = np.random.default_rng(0)
    p = empirical_distribution(rng.integers(0, 2, (1000, 5)))
    assert abs(p.sum() - 1.0) < 1e-12
    with pytest.raises(ConfigurationError):
        empirical_distribution(np.zeros((0, 3)))


def test_states_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    states = rng.integers(0, 2, (20, 13)).astype(np.uint8)
    times = np.arange(1, 21, dtype=float)
    write_states_csv(tmp_path / "z.csv", times, states)
    t, z = read_states_csv(tmp_path / "z.csv", 13)
    assert np.array_equal(z, states) and np.allclose(t, times)
    with open(tmp_path / "z.csv") as fh:
        lines = fh.read().splitlines()
    first = int(lines[1].split(",")[1], 16)
    assert first == sum(int(b) << k for k, b in enumerate(states[0]))


def test_runs_are_reproducible():
    net = SamplingNetwork(3, noise=RandomNetworkSpec(), substrate=Substrate())
    a = net.run(200.0, seed=9)
    b = net.run(200.0, seed=9)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.spike_times, b.spike_times)

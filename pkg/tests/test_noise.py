import csv

import numpy as np
import pytest
from scipy import stats

from lifsampling.dynamics import EXC, INH
from lifsampling.noise import (PoissonSource, RandomNetworkSpec, SilentNetworkError, build_random_network,
                               generate_poisson, rn_rate_check)
from lifsampling.params import RANDOM_NETWORK_NEURON, SAMPLING_NEURON, ConfigurationError, free_isi
from lifsampling.substrate import IDEAL, CalibrationError, Substrate, measure_activation


def test_zero_rate_gives_empty_train():
    assert generate_poisson(0.0, 1000.0, seed=1).size == 0


def test_poisson_count_within_three_sigma():
    train = generate_poisson(300.0, 1e5, seed=2)
    assert abs(train.size - 3e4) < 3 * np.sqrt(3e4)
    assert train.min() >= 0 and train.max() < 1e5


def test_poisson_reproducible():
    assert np.array_equal(generate_poisson(300.0, 1e3, seed=5), generate_poisson(300.0, 1e3, seed=5))
    assert not np.array_equal(generate_poisson(300.0, 1e3, seed=5), generate_poisson(300.0, 1e3, seed=6))


def test_poisson_intervals_are_exponential():
    rate = 300.0
    train = generate_poisson(rate, 1e4 / rate * 1000.0 * 1.02, seed=9)[:10001]
    isi = np.diff(train)
    assert isi.size == 1e4
    d = stats.kstest(isi, "expon", args=(0, 1000.0 / rate)).statistic
    assert d < 1.63 / np.sqrt(isi.size)  # 1% critical value


def test_poisson_rejects_bad_arguments():
    with pytest.raises(ConfigurationError):
        generate_poisson(10.0, 0.0)
    with pytest.raises(ConfigurationError):
        generate_poisson(-1.0, 10.0)
    with pytest.raises(ConfigurationError):
        PoissonSource(rate_exc=-5.0)


def test_poisson_source_events_per_channel():
    src = PoissonSource(rate_exc=300.0, rate_inh=0.0, weight=4)
    ev = src.events([0, 1, 2], 100.0, 1e4, np.random.default_rng(0), weight_unit=2.0)
    assert np.all(ev.channels == EXC)
    assert np.all(ev.weights == 8.0)
    assert ev.times.min() >= 100.0 and ev.times.max() < 100.0 + 1e4
    counts = np.bincount(ev.targets, minlength=3)
    assert np.all(np.abs(counts - 3000) < 3 * np.sqrt(3000))


def test_rn_in_degree_exact_and_no_self_connections():
    rn = build_random_network(RandomNetworkSpec(n=200, k_rn=20), n_targets=5, seed=3)
    assert np.all(rn.in_degree() == 20)
    assert not np.any(rn.recurrent[:, 0] == rn.recurrent[:, 1])
    for post in range(200):
        pres = rn.recurrent[rn.recurrent[:, 1] == post, 0]
        assert np.unique(pres).size == pres.size


def test_rn_projection_split_and_distinct_sources():
    spec = RandomNetworkSpec(k_noise=15)
    rn = build_random_network(spec, n_targets=8, seed=4)
    for target in range(8):
        rows = rn.projections[rn.projections[:, 1] == target]
        assert rows.shape[0] == 15
        assert np.unique(rows[:, 0]).size == 15
        assert np.sum(rows[:, 2] == EXC) == 8 and np.sum(rows[:, 2] == INH) == 7


def test_shared_partner_expectation():
    rn = build_random_network(RandomNetworkSpec(n=200, k_noise=15), n_targets=60, seed=5)
    shared = [rn.shared_partners(a, b) for a in range(60) for b in range(a + 1, 60)]
    assert np.mean(shared) == pytest.approx(15 ** 2 / 200, abs=0.2)


def test_rn_spec_validation():
    with pytest.raises(ConfigurationError):
        RandomNetworkSpec(n=20, k_rn=20)
    with pytest.raises(ConfigurationError):
        RandomNetworkSpec(n=20, k_noise=21)
    with pytest.raises(ConfigurationError):
        RandomNetworkSpec(weight=16)


def test_rn_is_stationary_and_asynchronous():
    rn = build_random_network(RandomNetworkSpec(), n_targets=5, seed=1)
    rate, cv = rn_rate_check(rn, seed=1)
    assert rate > 0
    assert cv < 0.2


def test_all_to_all_inhibition_lowers_rate():
    spec = RandomNetworkSpec(n=20, k_rn=19, k_noise=0, weight=15)
    rate, _ = rn_rate_check(build_random_network(spec, 0, seed=1), seed=1)
    assert rate < 1000.0 / free_isi(RANDOM_NETWORK_NEURON)


def test_isolated_rn_neuron_fires_at_analytic_rate():
    spec = RandomNetworkSpec(n=1, k_rn=0, k_noise=0)
    rate, _ = rn_rate_check(build_random_network(spec, 0, seed=1), seed=1)
    assert rate == pytest.approx(1000.0 / free_isi(RANDOM_NETWORK_NEURON), rel=0.01)


def test_silent_rn_is_diagnosed():
    quiet = RANDOM_NETWORK_NEURON.replace(E_leak=-60.0, V_reset=-60.0)
    spec = RandomNetworkSpec(n=10, k_rn=2, k_noise=0, params=quiet)
    with pytest.raises(SilentNetworkError):
        rn_rate_check(build_random_network(spec, 0, seed=1), seed=1)
    with pytest.raises(ConfigurationError):
        rn_rate_check(build_random_network(spec, 0, seed=1), duration=100.0)


def test_without_noise_activation_is_a_step():
    sub = Substrate(variability=IDEAL)
    try:
        fit, rates = measure_activation(SAMPLING_NEURON, RandomNetworkSpec(k_noise=0), sub,
                                        duration=2000.0, return_rates=True)
    except CalibrationError:
        return
    assert np.max(np.diff(rates)) > 0.5 * rates.max()
    assert fit.s < 1.0


def test_edge_list_export(tmp_path):
    spec = RandomNetworkSpec(n=10, k_rn=3, k_noise=4)
    rn = build_random_network(spec, 2, seed=0)
    rn.write_edges(tmp_path / "rn.csv")
    with open(tmp_path / "rn.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(r["kind"] == "rn" for r in rows) == 30
    assert sum(r["kind"] == "noise" for r in rows) == 8
    assert {r["channel"] for r in rows if r["kind"] == "rn"} == {"inh"}


def test_rn_generation_is_seeded():
    a = build_random_network(RandomNetworkSpec(), 5, seed=11)
    b = build_random_network(RandomNetworkSpec(), 5, seed=11)
    assert np.array_equal(a.recurrent, b.recurrent) and np.array_equal(a.projections, b.projections)

import numpy as np
import pytest

from lifsampling.dynamics import (EXC, INH, Circuit, ExternalInput, NumericalError, SynapseSpec,
                                  deliver_spike, read_spike_csv, refractory_states, step,
                                  write_spike_csv)
from lifsampling.params import (BIAS_NEURON, RANDOM_NETWORK_NEURON, SAMPLING_NEURON,
                                ConfigurationError, NeuronParams, charging_time, free_isi)
from oracles import charge_time, leak_decay

P = SAMPLING_NEURON


def test_neuron_params_invariants():
    with pytest.raises(ConfigurationError):
        P.replace(tau_ref=0.0)
    with pytest.raises(ConfigurationError):
        P.replace(V_thresh=-120.0)  # below E_inh
    with pytest.raises(ConfigurationError):
        P.replace(C_mem=-0.2)
    assert P.g_leak == pytest.approx(1000 * 0.2 / 7.0)


def test_fixed_point_at_rest():
    c = Circuit([P.replace(V_thresh=0.0)])
    s = c.initial_state(P.E_leak)
    c.run(s, 50.0)
    assert s.u[0] == pytest.approx(P.E_leak, abs=1e-12)


def test_free_decay_matches_closed_form():
    # subthreshold neuron: move threshold out of the way
    params = P.replace(V_thresh=0.0)
    c = Circuit([params])
    s = c.initial_state(P.E_leak + 10.0)
    c.run(s, params.tau_mem)
    expected = leak_decay(P.E_leak + 10.0, P.E_leak, params.tau_mem, params.tau_mem)
    assert abs(s.u[0] - expected) < 0.01 * abs(expected - P.E_leak)


def test_bias_neuron_isi_matches_analytic():
    c = Circuit([BIAS_NEURON])
    s = c.initial_state()
    rec = c.run(s, 200.0)
    isi = np.diff(rec.spike_times)
    analytic = BIAS_NEURON.tau_ref + charge_time(BIAS_NEURON.E_leak, BIAS_NEURON.V_reset,
                                                 BIAS_NEURON.V_thresh, BIAS_NEURON.tau_mem)
    assert free_isi(BIAS_NEURON) == pytest.approx(analytic)
    assert np.all(np.abs(isi - analytic) < c.dt)
    assert np.ptp(isi) < 1e-9  # periodic


def test_rn_neuron_single_isi():
    c = Circuit([RANDOM_NETWORK_NEURON])
    s = c.initial_state()
    isi = np.diff(c.run(s, 300.0).spike_times)
    assert np.all(np.abs(isi - free_isi(RANDOM_NETWORK_NEURON)) < c.dt)


def test_sampling_neuron_is_subthreshold_at_rest():
    assert charging_time(P) == np.inf
    c = Circuit([P])
    assert c.run(c.initial_state(), 100.0).spike_times.size == 0


def test_dt_guard():
    with pytest.raises(ConfigurationError):
        Circuit([P], dt=1.0)


def test_numerical_blowup_is_reported():
    c = Circuit([P])
    s = c.initial_state()
    s.u[0] = np.nan
    with pytest.raises(NumericalError):
        c.run(s, 1.0)


def test_weight_zero_event_is_inert():
    c = Circuit([P.replace(V_thresh=0.0)], pre=[0], post=[0], channel=EXC, weight=0.0)
    s = c.initial_state()
    deliver_spike(c, s, SynapseSpec(0, 0, "exc", 0), 0.0)
    c.run(s, 5.0)
    assert s.g_exc[0] == 0.0


def test_single_event_kernel_decays_by_e():
    c = Circuit([P.replace(V_thresh=0.0)])
    s = c.initial_state()
    deliver_spike(c, s, SynapseSpec(0, 0, "exc", 7, delay=1.0), 0.0)
    c.run(s, 1.0)
    assert s.pending_events() == [(pytest.approx(1.0), 0, EXC, 7.0)]
    c.run(s, P.tau_syn_exc)
    assert s.g_exc[0] == pytest.approx(7.0 * np.exp(-1.0), rel=1e-9)


def test_superposition_of_simultaneous_events():
    c = Circuit([P.replace(V_thresh=0.0)])
    s = c.initial_state()
    for _ in range(2):
        deliver_spike(c, s, SynapseSpec(0, 0, "inh", 5), 0.0)
    c.run(s, 1.1)
    assert s.g_inh[0] == pytest.approx(10.0 * np.exp(-0.1 / P.tau_syn_inh))


def test_conductance_superposition_of_spike_sets():
    def response(times):
        c = Circuit([P.replace(V_thresh=0.0)])
        s = c.initial_state()
        trace = []
        inputs = ExternalInput(np.asarray(times, float), 0, EXC, 3.0)
        for _ in range(300):
            c.run(s, 0.1, inputs if not trace else None)
            trace.append(s.g_exc[0])
        return np.array(trace)

    both = response([1.0, 7.3])
    assert np.allclose(both, response([1.0]) + response([7.3]))


def test_deliver_spike_rejects_unknown_post_and_past():
    c = Circuit([P])
    s = c.initial_state()
    with pytest.raises(ConfigurationError):
        deliver_spike(c, s, SynapseSpec(0, 3, "exc", 1), 0.0)
    c.run(s, 2.0)
    with pytest.raises(ConfigurationError):
        deliver_spike(c, s, SynapseSpec(0, 0, "exc", 1), 0.5)


def test_pending_events_sorted():
    c = Circuit([P, P])
    s = c.initial_state()
    deliver_spike(c, s, SynapseSpec(0, 1, "exc", 2, delay=3.0), 0.0)
    deliver_spike(c, s, SynapseSpec(0, 0, "inh", 4, delay=1.0), 0.0)
    events = s.pending_events()
    assert [e[0] for e in events] == sorted(e[0] for e in events)
    assert events[0][1:] == (0, INH, 4.0)


def test_synapse_spec_validation():
    with pytest.raises(ConfigurationError):
        SynapseSpec(0, 1, "exc", 16)
    with pytest.raises(ConfigurationError):
        SynapseSpec(0, 1, "exc", 3, delay=0.0)
    with pytest.raises(ConfigurationError):
        SynapseSpec(0, 1, "dopamine", 3)


def _three_neuron_run(dt):
    # every neuron is kicked from outside; the recurrent synapses shift the
    # kicked neurons' trajectories without chaining threshold crossings
    fast = P.replace(tau_syn_exc=1.0, tau_syn_inh=1.0)
    c = Circuit([fast] * 3, dt, pre=[0, 1, 2], post=[1, 2, 0], channel=[INH, EXC, INH],
                weight=[30.0, 15.0, 30.0], delay=1.0)
    s = c.initial_state(P.V_reset)
    kick = ExternalInput([5.0, 20.0, 35.0, 6.0, 21.0, 36.0, 7.0, 36.5],
                         [0, 0, 0, 1, 1, 1, 2, 2], EXC, [120.0] * 3 + [140.0] * 3 + [130.0] * 2)
    rec = c.run(s, 60.0, kick)
    return [rec.spike_train(k) for k in range(3)]


def test_dt_halving_convergence():
    coarse = _three_neuron_run(0.1)
    fine = _three_neuron_run(0.05)
    for a, b in zip(coarse, fine):
        assert a.size == b.size and a.size > 0
        assert np.max(np.abs(a - b)) < 0.1


def test_determinism_and_voltage_bounds():
    rng = np.random.default_rng(3)
    n = 20
    pre = rng.integers(0, n, 80)
    post = rng.integers(0, n, 80)
    runs = []
    for _ in range(2):
        c = Circuit([BIAS_NEURON] * 2 + [P] * (n - 2), pre=pre, post=post,
                    channel=rng.integers(0, 2, 80) * 0 + (pre % 2), weight=20.0)
        s = c.initial_state(np.linspace(-35, -21, n))
        lo, hi = [], []
        for _ in range(50):
            c.run(s, 2.0)
            lo.append(s.u.min())
            hi.append(s.u.max())
        runs.append(s.u.copy())
        assert min(lo) >= P.E_inh - 1e-9 and max(hi) <= P.E_exc + 1e-9
    assert np.array_equal(runs[0], runs[1])


def test_refractory_clamp_holds_reset():
    c = Circuit([BIAS_NEURON])
    s = c.initial_state()
    seen = 0
    for _ in range(100):
        step(c, s)
        if s.refractory[0] > 0:
            assert s.u[0] == BIAS_NEURON.V_reset
            seen += 1
    assert seen > 0


def test_step_returns_spikes():
    c = Circuit([BIAS_NEURON])
    s = c.initial_state(BIAS_NEURON.V_thresh - 1e-6)
    spikes = step(c, s)
    assert spikes == [(0, pytest.approx(0.1))]


def test_refractory_states_definition():
    z = refractory_states([np.array([10.0])], 4.0, [10.0, 13.9, 14.1])
    assert z[:, 0].tolist() == [1, 1, 0]
    assert refractory_states([np.array([])], 4.0, [1.0, 2.0]).sum() == 0


def test_refractory_states_duty_cycle():
    train = np.arange(0, 1000, 10.0)
    q = np.arange(0.05, 1000, 0.1)
    assert refractory_states([train], 4.0, q).mean() == pytest.approx(0.4, abs=1e-3)


def test_online_states_match_spike_reconstruction():
    c = Circuit([BIAS_NEURON, P], pre=[0], post=[1], channel=EXC, weight=30.0)
    s = c.initial_state()
    rec = c.run(s, 200.0, sample_period=1.0)
    trains = [rec.spike_train(k) for k in range(2)]
    offline = refractory_states(trains, c.tau_ref_effective, rec.sample_times)
    assert np.array_equal(offline, rec.states)


def test_spike_csv_roundtrip(tmp_path):
    ids = np.array([0, 2, 1])
    times = np.array([0.1, 1.2, 33.3])
    write_spike_csv(tmp_path / "s.csv", ids, times)
    r_ids, r_times = read_spike_csv(tmp_path / "s.csv")
    assert r_ids.tolist() == ids.tolist()
    assert np.allclose(r_times, times)

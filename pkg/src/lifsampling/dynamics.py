"""Clock-driven simulation of conductance-based LIF neurons.

The membrane obeys

    C du/dt = -g_l (u - E_leak) - g_inh (u - E_inh) - g_exc (u - E_exc)

outside the refractory period and is clamped to V_reset for tau_ref after a
spike. Synaptic conductances jump by the weight J at delivery (spike time plus
delay) and decay exponentially with tau_syn.

Each step uses exponential Euler: with the conductances frozen over the step,
u relaxes exactly towards the conductance-weighted reversal potential, and the
conductances decay exactly. Spikes are timestamped at the end of the step in
which u reaches threshold. Delayed deliveries go through a ring buffer indexed
by absolute step number.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .params import DEFAULT_DELAY, DEFAULT_DT, ConfigurationError, NeuronParams

EXC = 0
INH = 1
_CHANNELS = {"exc": EXC, "excitatory": EXC, "inh": INH, "inhibitory": INH, EXC: EXC, INH: INH}


class NumericalError(RuntimeError):
    """Non-finite membrane state; the integration step is too coarse or inputs are broken."""


def channel_index(channel) -> int:
    try:
        return _CHANNELS[channel]
    except (KeyError, TypeError):
        raise ConfigurationError(f"unknown synapse channel {channel!r}") from None


@dataclass(frozen=True)
class SynapseSpec:
    pre: int
    post: int
    channel: str
    weight: int
    delay: float = DEFAULT_DELAY

    def __post_init__(self):
        channel_index(self.channel)
        if int(self.weight) != self.weight or not 0 <= self.weight <= 15:
            raise ConfigurationError(f"hardware weight must be an integer in [0, 15], got {self.weight}")
        if not self.delay > 0:
            raise ConfigurationError(f"synaptic delay must be positive, got {self.delay}")


@dataclass
class NetworkState:
    """Mutable dynamical state of a :class:`Circuit`.

    ``refractory`` counts remaining refractory steps; ``ring`` holds pending
    conductance increments, slot ``s % len(ring)`` for absolute step ``s``.
    """

    u: np.ndarray
    g_exc: np.ndarray
    g_inh: np.ndarray
    refractory: np.ndarray
    ring: np.ndarray
    dt: float
    step: int = 0

    @property
    def t(self) -> float:
        return self.step * self.dt

    @property
    def refractory_remaining(self) -> np.ndarray:
        return self.refractory * self.dt

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.u.copy(), self.g_exc.copy(), self.g_inh.copy(),
            self.refractory.copy(), self.ring.copy(), self.dt, self.step,
        )

    def pending_events(self) -> list[tuple[float, int, int, float]]:
        """Queued deliveries as (delivery time, post id, channel, weight), sorted by time."""
        depth = self.ring.shape[0]
        events = []
        for offset in range(depth):
            absolute = self.step + offset
            slot = self.ring[absolute % depth]
            for ch, post in zip(*np.nonzero(slot)):
                events.append((absolute * self.dt, int(post), int(ch), float(slot[ch, post])))
        return events


@dataclass
class Recording:
    """Output of :meth:`Circuit.run`."""

    dt: float
    t_start: float
    t_stop: float
    sample_period: float
    recorded: np.ndarray
    states: np.ndarray
    sample_times: np.ndarray
    spike_times: np.ndarray
    spike_ids: np.ndarray
    counts: np.ndarray

    def rates(self) -> np.ndarray:
        """Mean firing rate per neuron in Hz."""
        return self.counts * 1000.0 / (self.t_stop - self.t_start)

    def spike_train(self, neuron: int) -> np.ndarray:
        return self.spike_times[self.spike_ids == neuron]


@dataclass
class ExternalInput:
    """Spike events injected from outside the circuit (no synaptic delay)."""

    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        n = self.times.size
        self.targets = np.broadcast_to(np.asarray(self.targets, dtype=np.int64), (n,)).copy()
        self.channels = np.broadcast_to(np.asarray(self.channels, dtype=np.int64), (n,)).copy()
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (n,)).copy()

    def __len__(self):
        return self.times.size

    @classmethod
    def concatenate(cls, parts: Iterable["ExternalInput"]) -> "ExternalInput":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(
            np.concatenate([p.times for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.channels for p in parts]),
            np.concatenate([p.weights for p in parts]),
        )


@numba.njit(cache=True)
def _advance(n_steps, step0, u, g_exc, g_inh, refr, ring,
             e_leak, e_exc, e_inh, v_thresh, v_reset, g_leak, c_mem,
             dec_exc, dec_inh, ref_steps, dt,
             indptr, post, chan, weight, delay,
             ext_step, ext_target, ext_chan, ext_weight,
             sample_every, rec_idx, states,
             spk_mask, spk_step, spk_id, counts):
    depth = ring.shape[0]
    n = u.shape[0]
    n_ext = ext_step.shape[0]
    n_rec = rec_idx.shape[0]
    ext_ptr = 0
    n_samples = 0
    n_spikes = 0
    for k in range(n_steps):
        s = step0 + k
        slot = s % depth
        for i in range(n):
            g_exc[i] += ring[slot, 0, i]
            g_inh[i] += ring[slot, 1, i]
            ring[slot, 0, i] = 0.0
            ring[slot, 1, i] = 0.0
        while ext_ptr < n_ext and ext_step[ext_ptr] == s:
            if ext_chan[ext_ptr] == 0:
                g_exc[ext_target[ext_ptr]] += ext_weight[ext_ptr]
            else:
                g_inh[ext_target[ext_ptr]] += ext_weight[ext_ptr]
            ext_ptr += 1
        for i in range(n):
            if refr[i] > 0:
                refr[i] -= 1
                u[i] = v_reset[i]
            else:
                g_tot = g_leak[i] + g_exc[i] + g_inh[i]
                u_inf = (g_leak[i] * e_leak[i] + g_exc[i] * e_exc[i] + g_inh[i] * e_inh[i]) / g_tot
                u[i] = u_inf + (u[i] - u_inf) * math.exp(-dt * g_tot / c_mem[i])
                if not math.isfinite(u[i]):
                    return n_samples, n_spikes, i + 1
                if u[i] >= v_thresh[i]:
                    u[i] = v_reset[i]
                    refr[i] = ref_steps[i]
                    counts[i] += 1
                    if spk_mask[i]:
                        spk_step[n_spikes] = s + 1
                        spk_id[n_spikes] = i
                        n_spikes += 1
                    for q in range(indptr[i], indptr[i + 1]):
                        target_slot = (s + 1 + delay[q]) % depth
                        ring[target_slot, chan[q], post[q]] += weight[q]
            g_exc[i] *= dec_exc[i]
            g_inh[i] *= dec_inh[i]
        if sample_every > 0 and (s + 1) % sample_every == 0:
            for r in range(n_rec):
                states[n_samples, r] = 1 if refr[rec_idx[r]] > 0 else 0
            n_samples += 1
    return n_samples, n_spikes, 0


class Circuit:
    """A fixed set of LIF neurons and delayed conductance synapses.

    Synapses are given as parallel arrays; ``weight`` is a conductance in
    hardware weight units (nS) and may exceed 15 for aggregated multapses.
    """

    def __init__(self, params: Sequence[NeuronParams], dt: float = DEFAULT_DT,
                 pre=(), post=(), channel=(), weight=(), delay=DEFAULT_DELAY):
        if not dt > 0:
            raise ConfigurationError("dt must be positive")
        self.params = list(params)
        self.dt = float(dt)
        n = len(self.params)
        self.n = n
        col = {name: np.array([getattr(p, name) for p in self.params], dtype=float)
               for name in NeuronParams.names()}
        shortest = min(col["tau_syn_exc"].min(initial=np.inf), col["tau_syn_inh"].min(initial=np.inf),
                       col["tau_mem"].min(initial=np.inf))
        if n and dt > shortest / 10 + 1e-12:
            raise ConfigurationError(f"dt={dt} ms exceeds min(tau_syn, tau_mem)/10 = {shortest / 10:.4g} ms")
        self._e_leak = col["E_leak"]
        self._e_exc = col["E_exc"]
        self._e_inh = col["E_inh"]
        self._v_thresh = col["V_thresh"]
        self._v_reset = col["V_reset"]
        self._c_mem = 1000.0 * col["C_mem"]
        self._g_leak = self._c_mem / col["tau_mem"]
        self._dec_exc = np.exp(-dt / col["tau_syn_exc"])
        self._dec_inh = np.exp(-dt / col["tau_syn_inh"])
        self._ref_steps = np.maximum(1, np.rint(col["tau_ref"] / dt)).astype(np.int64)

        pre = np.asarray(pre, dtype=np.int64).ravel()
        m = pre.size
        post = np.broadcast_to(np.asarray(post, dtype=np.int64), (m,))
        channel = np.broadcast_to(np.asarray(channel, dtype=np.int64), (m,))
        weight = np.broadcast_to(np.asarray(weight, dtype=float), (m,))
        delay = np.broadcast_to(np.asarray(delay, dtype=float), (m,))
        if m:
            if pre.min() < 0 or pre.max() >= n or post.min() < 0 or post.max() >= n:
                raise ConfigurationError("synapse refers to an unknown neuron id")
            if np.any((channel != EXC) & (channel != INH)):
                raise ConfigurationError("synapse channel must be 0 (exc) or 1 (inh)")
            if np.any(weight < 0):
                raise ConfigurationError("synaptic weights are non-negative; sign is the channel")
            if np.any(delay <= 0):
                raise ConfigurationError("synaptic delays must be positive")
        delay_steps = np.maximum(1, np.rint(delay / dt)).astype(np.int64)
        order = np.argsort(pre, kind="stable")
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(pre, minlength=n))]).astype(np.int64)
        self._post = np.ascontiguousarray(post[order])
        self._chan = np.ascontiguousarray(channel[order])
        self._weight = np.ascontiguousarray(weight[order])
        self._delay = np.ascontiguousarray(delay_steps[order])
        self.ring_depth = int(delay_steps.max(initial=0)) + 2

    @property
    def refractory_steps(self) -> np.ndarray:
        return self._ref_steps.copy()

    @property
    def tau_ref_effective(self) -> np.ndarray:
        """Refractory periods as realized on the dt grid."""
        return self._ref_steps * self.dt

    def synapse_table(self) -> dict[str, np.ndarray]:
        pre = np.repeat(np.arange(self.n), np.diff(self._indptr))
        return {"pre": pre, "post": self._post.copy(), "channel": self._chan.copy(),
                "weight": self._weight.copy(), "delay": self._delay * self.dt}

    def initial_state(self, u0=None) -> NetworkState:
        if u0 is None:
            u = self._v_reset.copy()
        else:
            u = np.broadcast_to(np.asarray(u0, dtype=float), (self.n,)).copy()
        return NetworkState(
            u=u,
            g_exc=np.zeros(self.n),
            g_inh=np.zeros(self.n),
            refractory=np.zeros(self.n, dtype=np.int64),
            ring=np.zeros((self.ring_depth, 2, self.n)),
            dt=self.dt,
        )

    def _check_state(self, state: NetworkState):
        if state.u.shape != (self.n,):
            raise ConfigurationError("state does not belong to this circuit")
        if abs(state.dt - self.dt) > 1e-12:
            raise ConfigurationError("state and circuit use different dt")
        if state.ring.shape[0] < self.ring_depth:
            _grow_ring(state, self.ring_depth)

    def run(self, state: NetworkState, duration: float, inputs: ExternalInput | None = None,
            sample_period: float | None = None, record=None, record_spikes=None) -> Recording:
        """Advance ``state`` in place by ``duration`` ms.

        ``record`` selects the neurons whose refractory state z is sampled every
        ``sample_period`` ms (aligned to multiples of the period);
        ``record_spikes`` selects neurons whose spike times are kept (default all).
        """
        self._check_state(state)
        n_steps = int(round(duration / self.dt))
        if n_steps < 0:
            raise ConfigurationError("duration must be non-negative")
        if sample_period is None:
            sample_every = 0
        else:
            sample_every = int(round(sample_period / self.dt))
            if sample_every < 1:
                raise ConfigurationError("sample period shorter than dt")
        rec_idx = np.arange(self.n) if record is None else np.asarray(record, dtype=np.int64)
        if sample_every == 0:
            rec_idx = rec_idx[:0]
        spk_mask = np.ones(self.n, dtype=np.bool_)
        if record_spikes is not None:
            spk_mask[:] = False
            spk_mask[np.asarray(record_spikes, dtype=np.int64)] = True

        step0 = state.step
        if inputs is not None and len(inputs):
            ext_step = np.floor(inputs.times / self.dt + 1e-9).astype(np.int64)
            keep = (ext_step >= step0) & (ext_step < step0 + n_steps)
            if np.any(ext_step < step0):
                raise ConfigurationError("external event scheduled before the current time")
            order = np.argsort(ext_step[keep], kind="stable")
            ext_step = ext_step[keep][order]
            ext_target = inputs.targets[keep][order]
            ext_chan = inputs.channels[keep][order]
            ext_weight = inputs.weights[keep][order]
            if ext_target.size and (ext_target.min() < 0 or ext_target.max() >= self.n):
                raise ConfigurationError("external event targets an unknown neuron id")
        else:
            ext_step = np.zeros(0, dtype=np.int64)
            ext_target = np.zeros(0, dtype=np.int64)
            ext_chan = np.zeros(0, dtype=np.int64)
            ext_weight = np.zeros(0)

        n_slots = (step0 + n_steps) // sample_every - step0 // sample_every if sample_every else 0
        states = np.zeros((n_slots, rec_idx.size), dtype=np.uint8)
        capacity = int(np.sum(n_steps // (self._ref_steps[spk_mask] + 1) + 1))
        spk_step = np.zeros(capacity, dtype=np.int64)
        spk_id = np.zeros(capacity, dtype=np.int64)
        counts = np.zeros(self.n, dtype=np.int64)

        n_samples, n_spikes, fault = _advance(
            n_steps, step0, state.u, state.g_exc, state.g_inh, state.refractory, state.ring,
            self._e_leak, self._e_exc, self._e_inh, self._v_thresh, self._v_reset,
            self._g_leak, self._c_mem, self._dec_exc, self._dec_inh, self._ref_steps, self.dt,
            self._indptr, self._post, self._chan, self._weight, self._delay,
            ext_step, ext_target, ext_chan, ext_weight,
            sample_every, rec_idx, states, spk_mask, spk_step, spk_id, counts,
        )
        if fault:
            raise NumericalError(f"non-finite membrane potential in neuron {fault - 1}; dt too large?")
        state.step = step0 + n_steps
        first = (step0 // sample_every + 1) * sample_every if sample_every else 0
        sample_times = (first + sample_every * np.arange(n_samples)) * self.dt
        return Recording(
            dt=self.dt, t_start=step0 * self.dt, t_stop=state.step * self.dt,
            sample_period=sample_every * self.dt, recorded=rec_idx,
            states=states[:n_samples], sample_times=sample_times,
            spike_times=spk_step[:n_spikes] * self.dt, spike_ids=spk_id[:n_spikes], counts=counts,
        )


def _grow_ring(state: NetworkState, depth: int):
    old = state.ring
    new = np.zeros((depth, 2, old.shape[2]))
    for offset in range(old.shape[0]):
        absolute = state.step + offset
        new[absolute % depth] = old[absolute % old.shape[0]]
    state.ring = new


def step(circuit: Circuit, state: NetworkState) -> list[tuple[int, float]]:
    """Advance by a single dt; returns the emitted spikes as (neuron, time)."""
    rec = circuit.run(state, circuit.dt)
    return list(zip(rec.spike_ids.tolist(), rec.spike_times.tolist()))


def deliver_spike(circuit: Circuit, state: NetworkState, synapse: SynapseSpec, spike_time: float):
    """Queue the conductance jump caused by a presynaptic spike at ``spike_time``."""
    if not 0 <= synapse.post < circuit.n:
        raise ConfigurationError(f"unknown post-synaptic neuron {synapse.post}")
    if spike_time < state.t - 1e-9:
        raise ConfigurationError("cannot deliver a spike from the past")
    arrival = int(round((spike_time + synapse.delay) / state.dt))
    ahead = arrival - state.step
    if ahead >= state.ring.shape[0]:
        _grow_ring(state, ahead + 1)
    state.ring[arrival % state.ring.shape[0], channel_index(synapse.channel), synapse.post] += synapse.weight
    return state


def refractory_states(spike_trains: Sequence[np.ndarray], tau_ref, query_times) -> np.ndarray:
    """Binary states z[t, k] = 1 iff neuron k spiked within (t - tau_ref, t].

    ``tau_ref`` may be a scalar or one value per train.
    """
    query_times = np.asarray(query_times, dtype=float)
    tau = np.broadcast_to(np.asarray(tau_ref, dtype=float), (len(spike_trains),))
    z = np.zeros((query_times.size, len(spike_trains)), dtype=np.uint8)
    eps = 1e-9
    for k, train in enumerate(spike_trains):
        train = np.asarray(train, dtype=float)
        if train.size == 0:
            continue
        upto = np.searchsorted(train, query_times + eps, side="right")
        after = np.searchsorted(train, query_times - tau[k] + eps, side="right")
        z[:, k] = upto > after
    return z


def write_spike_csv(path, spike_ids, spike_times):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["neuron_id", "time_ms"])
        for i, t in zip(np.asarray(spike_ids).tolist(), np.asarray(spike_times).tolist()):
            writer.writerow([i, f"{t:.3f}"])


def read_spike_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return data[:, 0].astype(np.int64), data[:, 1]

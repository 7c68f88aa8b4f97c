"""Background noise: private Poisson input or an inhibitory random network (RN)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import EXC, INH, Circuit, ExternalInput
from .params import DEFAULT_DELAY, DEFAULT_DT, RANDOM_NETWORK_NEURON, ConfigurationError, NeuronParams


# nS per weight LSB inside the RN (see Substrate.rn_weight_unit)
DEFAULT_RN_WEIGHT_UNIT = 0.15


class SilentNetworkError(RuntimeError):
    pass


def generate_poisson(rate: float, duration: float, seed=None, t_start: float = 0.0) -> np.ndarray:
    """Spike times (ms) of a homogeneous Poisson process with ``rate`` in Hz."""
    if not duration > 0:
        raise ConfigurationError("duration must be positive")
    if rate < 0:
        raise ConfigurationError("rate must be non-negative")
    rng = np.random.default_rng(seed)
    count = rng.poisson(rate * duration / 1000.0)
    return t_start + np.sort(rng.uniform(0.0, duration, count))


@dataclass(frozen=True)
class PoissonSource:
    """Private excitatory and inhibitory Poisson drive for every target neuron.

    ``weight`` is the hardware weight of the noise synapses; the paper leaves it
    unspecified, 15 puts the sampling neuron into a high-conductance state.
    """

    rate_exc: float = 300.0
    rate_inh: float = 300.0
    weight: float = 15.0

    def __post_init__(self):
        if self.rate_exc < 0 or self.rate_inh < 0:
            raise ConfigurationError("Poisson rates must be non-negative")

    def events(self, targets, t_start: float, duration: float, rng: np.random.Generator,
               weight_unit: float = 1.0) -> ExternalInput:
        """Events for all ``targets`` over [t_start, t_start + duration)."""
        targets = np.asarray(targets, dtype=np.int64)
        parts = []
        for channel, rate in ((EXC, self.rate_exc), (INH, self.rate_inh)):
            if rate == 0 or targets.size == 0:
                continue
            counts = rng.poisson(rate * duration / 1000.0, size=targets.size)
            times = t_start + rng.uniform(0.0, duration, counts.sum())
            parts.append(ExternalInput(times, np.repeat(targets, counts), channel, self.weight * weight_unit))
        return ExternalInput.concatenate(parts)


@dataclass(frozen=True)
class RandomNetworkSpec:
    n: int = 200
    k_rn: int = 20
    k_noise: int = 15
    weight: float = 10.0
    params: NeuronParams = field(default=RANDOM_NETWORK_NEURON)
    delay: float = DEFAULT_DELAY

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("random network needs at least one neuron")
        if not 0 <= self.k_rn < self.n:
            raise ConfigurationError(f"K_RN={self.k_rn} must lie in [0, N_r={self.n})")
        if not 0 <= self.k_noise <= self.n:
            raise ConfigurationError(f"K_noise={self.k_noise} must lie in [0, N_r={self.n}]")
        if not 0 <= self.weight <= 15:
            raise ConfigurationError("w_RN must be a hardware weight in [0, 15]")


@dataclass
class RandomNetwork:
    """Topology of an RN; neuron ids are local (0..n-1).

    ``recurrent`` holds (pre, post) pairs, all inhibitory. ``projections`` holds
    (rn_pre, target, channel) triples towards the sampling neurons: ceil(K/2)
    routed through the excitatory input circuit and floor(K/2) through the
    inhibitory one.
    """

    spec: RandomNetworkSpec
    recurrent: np.ndarray
    projections: np.ndarray

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.recurrent[:, 1], minlength=self.spec.n)

    def shared_partners(self, a: int, b: int) -> int:
        src_a = set(self.projections[self.projections[:, 1] == a, 0].tolist())
        src_b = set(self.projections[self.projections[:, 1] == b, 0].tolist())
        return len(src_a & src_b)

    def write_edges(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "pre", "post", "channel", "weight"])
            for pre, post in self.recurrent.tolist():
                writer.writerow(["rn", pre, post, "inh", self.spec.weight])
            for pre, post, ch in self.projections.tolist():
                writer.writerow(["noise", pre, post, "exc" if ch == EXC else "inh", self.spec.weight])


def build_random_network(spec: RandomNetworkSpec, n_targets: int, seed=None) -> RandomNetwork:
    """Draw an RN with exact in-degrees and its projections onto ``n_targets`` neurons."""
    rng = np.random.default_rng(seed)
    n = spec.n
    recurrent = np.zeros((n * spec.k_rn, 2), dtype=np.int64)
    others = np.arange(n - 1)
    for post in range(n):
        chosen = rng.choice(others, size=spec.k_rn, replace=False)
        chosen = chosen + (chosen >= post)  # skip self
        recurrent[post * spec.k_rn:(post + 1) * spec.k_rn] = np.column_stack(
            [chosen, np.full(spec.k_rn, post)])
    n_exc = (spec.k_noise + 1) // 2
    channels = np.array([EXC] * n_exc + [INH] * (spec.k_noise - n_exc), dtype=np.int64)
    projections = np.zeros((n_targets * spec.k_noise, 3), dtype=np.int64)
    for target in range(n_targets):
        chosen = rng.choice(n, size=spec.k_noise, replace=False)
        rows = slice(target * spec.k_noise, (target + 1) * spec.k_noise)
        projections[rows] = np.column_stack([chosen, np.full(spec.k_noise, target), channels])
    return RandomNetwork(spec, recurrent, projections)


def standalone_circuit(rn: RandomNetwork, params=None, dt: float = DEFAULT_DT,
                       weight_unit: float = DEFAULT_RN_WEIGHT_UNIT) -> Circuit:
    """The RN on its own, without projections."""
    params = params if params is not None else [rn.spec.params] * rn.spec.n
    return Circuit(params, dt, pre=rn.recurrent[:, 0], post=rn.recurrent[:, 1], channel=INH,
                   weight=rn.spec.weight * weight_unit, delay=rn.spec.delay)


def rn_rate_check(rn: RandomNetwork, duration: float = 1e4, seed=None, params=None,
                  dt: float = DEFAULT_DT, weight_unit: float = DEFAULT_RN_WEIGHT_UNIT,
                  bin_width: float = 10.0, warmup: float = 200.0):
    """Simulate the RN alone; returns (mean rate in Hz, CV of the binned population rate).

    Raises :class:`SilentNetworkError` when the network does not fire at all.
    """
    if duration < 1e4:
        raise ConfigurationError("rate check needs at least 1e4 ms")
    circuit = standalone_circuit(rn, params, dt, weight_unit)
    rng = np.random.default_rng(seed)
    p = rn.spec.params
    state = circuit.initial_state(rng.uniform(p.V_reset, p.V_thresh, rn.spec.n))
    circuit.run(state, warmup, record_spikes=())
    rec = circuit.run(state, duration)
    if rec.spike_times.size == 0:
        raise SilentNetworkError("random network is silent; check that E_leak > V_thresh")
    rate = rec.spike_times.size / rn.spec.n / (duration / 1000.0)
    edges = np.arange(rec.t_start, rec.t_stop + bin_width / 2, bin_width)
    binned = np.histogram(rec.spike_times, edges)[0]
    cv = float(binned.std() / binned.mean())
    return float(rate), cv

"""Sampling networks: sampling units, sign-paired couplings, noise wiring and clamping.

Neuron layout of a compiled network: sampling neurons ``0..n-1``, the shared
bias neuron ``n``, then the random-network neurons (if any).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import EXC, INH, Circuit, ExternalInput, Recording
from .noise import PoissonSource, RandomNetwork, RandomNetworkSpec, build_random_network
from .params import BIAS_NEURON, SAMPLING_NEURON, ConfigurationError, NeuronParams
from .substrate import W_MAX, Substrate, discretize, signed_hardware


@dataclass
class ClampStimulus:
    """Regular spike trains forcing units on (excitatory) or off (inhibitory).

    Each clamped unit receives ``multiplicity`` parallel synapses of weight
    ``weight`` driven at ``rate`` Hz. ``onset``/``offset`` are relative to the
    start of the segment the stimulus is applied in.
    """

    ids: np.ndarray
    states: np.ndarray
    rate: float = 100.0
    multiplicity: int = 5
    weight: float = W_MAX
    onset: float = 0.0
    offset: float = np.inf

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).ravel()
        self.states = np.broadcast_to(np.asarray(self.states, dtype=np.int64), self.ids.shape).copy()
        if self.multiplicity < 1:
            raise ConfigurationError("clamp multiplicity must be at least 1")
        if np.any((self.states != 0) & (self.states != 1)):
            raise ConfigurationError("clamp states must be 0 or 1")
        if np.unique(self.ids).size != self.ids.size:
            raise ConfigurationError("a unit cannot be clamped on and off at once")

    def events(self, t0: float, duration: float, weight_unit: float) -> ExternalInput:
        start = max(self.onset, 0.0)
        stop = min(self.offset, duration)
        if stop <= start or self.ids.size == 0 or self.rate <= 0:
            return ExternalInput()
        period = 1000.0 / self.rate
        ticks = t0 + start + period * np.arange(int(np.ceil((stop - start) / period - 1e-9)))
        n_ticks = ticks.size
        times = np.tile(np.repeat(ticks, self.multiplicity), self.ids.size)
        per_unit = n_ticks * self.multiplicity
        targets = np.repeat(self.ids, per_unit)
        channels = np.repeat(np.where(self.states == 1, EXC, INH), per_unit)
        return ExternalInput(times, targets, channels, self.weight * weight_unit)


def clamp_conditional(evidence: dict, **kwargs) -> list[ClampStimulus]:
    """Clamp stimuli realising the partial state ``evidence`` ({unit: 0/1})."""
    if not evidence:
        return []
    ids = np.array(sorted(evidence), dtype=np.int64)
    return [ClampStimulus(ids, [int(evidence[i]) for i in ids], **kwargs)]


class SamplingNetwork:
    """A network of sampling units with shadow weights in hardware units.

    ``W`` (symmetric, zero diagonal) and ``b`` are real-valued; emulation uses
    their deterministic 4-bit discretization. ``layers`` (sizes) turns the
    network into a layered one where only ``couplings`` between layer pairs
    are allowed (default: consecutive layers).
    """

    def __init__(self, n: int, noise=None, substrate: Substrate | None = None,
                 layers: Sequence[int] | None = None, couplings=None,
                 unit_params: Sequence[NeuronParams] | None = None,
                 bias_params: NeuronParams | None = None,
                 trial_seed: int | None = None, rn_seed: int | None = None):
        self.n = int(n)
        self.noise = PoissonSource() if noise is None and layers is None else noise
        self.substrate = substrate or Substrate()
        self.trial_seed = trial_seed
        self.W = np.zeros((n, n))
        self.b = np.zeros(n)
        self.layers = None
        if layers is not None:
            layers = [int(k) for k in layers]
            if sum(layers) != n:
                raise ConfigurationError(f"layer sizes {layers} do not add up to {n} units")
            self.layers = layers
            edges = np.concatenate([[0], np.cumsum(layers)])
            self.layer_slices = [slice(edges[k], edges[k + 1]) for k in range(len(layers))]
            couplings = couplings if couplings is not None else [(k, k + 1) for k in range(len(layers) - 1)]
            self.mask = np.zeros((n, n), dtype=bool)
            for a, c in couplings:
                if a == c:
                    raise ConfigurationError("within-layer couplings are not allowed in a layered network")
                self.mask[self.layer_slices[a], self.layer_slices[c]] = True
                self.mask[self.layer_slices[c], self.layer_slices[a]] = True
        else:
            self.mask = ~np.eye(n, dtype=bool)
        base = list(unit_params) if unit_params is not None else [SAMPLING_NEURON] * n
        if len(base) != n:
            raise ConfigurationError("need one parameter set per sampling unit")
        self._base_params = base
        self._bias_base = bias_params or BIAS_NEURON
        self.rn: RandomNetwork | None = None
        if isinstance(self.noise, RandomNetworkSpec):
            seed = rn_seed if rn_seed is not None else self.substrate.variability.seed
            self.rn = build_random_network(self.noise, n, seed=[int(seed), 7])

    # -- bookkeeping ---------------------------------------------------------
    @property
    def n_bias(self) -> int:
        return 1

    @property
    def n_rn(self) -> int:
        return 0 if self.rn is None else self.rn.spec.n

    @property
    def n_neurons(self) -> int:
        return self.n + self.n_bias + self.n_rn

    def layer(self, k: int) -> np.ndarray:
        return np.arange(self.n)[self.layer_slices[k]]

    def set_shadow(self, W=None, b=None):
        if W is not None:
            W = np.asarray(W, dtype=float)
            if W.shape != (self.n, self.n):
                raise ConfigurationError("weight matrix has the wrong shape")
            if not np.array_equal(W, W.T):
                raise ConfigurationError("shadow weights must be symmetric")
            self.W = np.where(self.mask, W, 0.0)
        if b is not None:
            self.b = np.asarray(b, dtype=float).copy()
        return self

    def hardware_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Signed 4-bit (W, b) as written to the emulated chip."""
        return signed_hardware(self.W) * self.mask, signed_hardware(self.b)

    def clip_fraction(self) -> float:
        vals = np.concatenate([self.W[np.triu(self.mask, 1)], self.b])
        return float(np.mean(np.abs(vals) > W_MAX + 0.5)) if vals.size else 0.0

    def neuron_params(self) -> list[NeuronParams]:
        var = self.substrate.variability
        params = [var.neuron(p, k, self.trial_seed) for k, p in enumerate(self._base_params)]
        params.append(var.neuron(self._bias_base, self.n, self.trial_seed))
        if self.rn is not None:
            params.extend(var.neuron(self.rn.spec.params, self.n + 1 + k, self.trial_seed)
                          for k in range(self.rn.spec.n))
        return params

    # -- compilation ---------------------------------------------------------
    def compile(self, active: np.ndarray | None = None, params=None) -> Circuit:
        """Build the emulated circuit.

        ``active[post, pre]`` may switch off individual directed couplings.
        """
        unit = self.substrate.weight_unit
        n = self.n
        W_hw, b_hw = self.hardware_weights()
        pre, post, chan, weight = [], [], [], []

        nz = np.flatnonzero(b_hw)
        pre.append(np.full(nz.size, n))
        post.append(nz)
        chan.append(np.where(b_hw[nz] > 0, EXC, INH))
        weight.append(np.abs(b_hw[nz]) * unit)

        directed = W_hw != 0
        if active is not None:
            directed &= np.asarray(active, dtype=bool)
        p_idx, q_idx = np.nonzero(directed)  # row = post, col = pre
        pre.append(q_idx)
        post.append(p_idx)
        chan.append(np.where(W_hw[p_idx, q_idx] > 0, EXC, INH))
        weight.append(np.abs(W_hw[p_idx, q_idx]) * unit)

        if self.rn is not None:
            spec = self.rn.spec
            off = n + 1
            pre += [self.rn.recurrent[:, 0] + off, self.rn.projections[:, 0] + off]
            post += [self.rn.recurrent[:, 1] + off, self.rn.projections[:, 1]]
            chan += [np.full(len(self.rn.recurrent), INH), self.rn.projections[:, 2]]
            weight += [np.full(len(self.rn.recurrent), spec.weight * self.substrate.rn_weight_unit),
                       np.full(len(self.rn.projections), spec.weight * self.substrate.rn_projection_unit)]

        return Circuit(
            params if params is not None else self.neuron_params(),
            self.substrate.dt,
            pre=np.concatenate(pre), post=np.concatenate(post),
            channel=np.concatenate(chan), weight=np.concatenate(weight),
            delay=self.substrate.delay,
        )

    def session(self, seed=0, active=None) -> "Session":
        return Session(self, seed, active)

    def run(self, duration: float, clamps: Sequence[ClampStimulus] = (), seed=0,
            sample_period: float | None = 1.0, warmup: float = 100.0) -> Recording:
        """Fresh emulation: ``warmup`` ms discarded, then ``duration`` ms recorded."""
        sess = self.session(seed)
        if warmup > 0:
            sess.run(warmup, clamps, sample_period=None, record_spikes=False)
        return sess.run(duration, clamps, sample_period=sample_period)


class Session:
    """A running emulation whose state persists across consecutive segments."""

    def __init__(self, network: SamplingNetwork, seed=0, active=None):
        self.network = network
        self.rng = np.random.default_rng(seed)
        self._params = network.neuron_params()
        self.circuit = network.compile(active, self._params)
        lo = np.array([p.V_reset for p in self._params])
        hi = np.array([p.V_thresh for p in self._params])
        self.state = self.circuit.initial_state(self.rng.uniform(lo, hi))

    @property
    def t(self) -> float:
        return self.state.t

    def set_active(self, active=None):
        """Switch directed couplings on/off without resetting the dynamics."""
        self.circuit = self.network.compile(active, self._params)

    def reload(self, active=None):
        """Pick up changed shadow weights of the network."""
        self.circuit = self.network.compile(active, self._params)

    def run(self, duration: float, clamps: Sequence[ClampStimulus] = (),
            sample_period: float | None = 1.0, record_spikes: bool = True) -> Recording:
        net = self.network
        t0 = self.state.t
        parts = [c.events(t0, duration, net.substrate.clamp_weight_unit) for c in clamps]
        if isinstance(net.noise, PoissonSource) and duration > 0:
            parts.append(net.noise.events(np.arange(net.n), t0, duration, self.rng, net.substrate.weight_unit))
        inputs = ExternalInput.concatenate(parts)
        units = np.arange(net.n)
        return self.circuit.run(self.state, duration, inputs, sample_period=sample_period,
                                record=units, record_spikes=units if record_spikes else ())


def build_network(spec, substrate: Substrate | None = None, noise="default", fit=None,
                  trial_seed=None, **kwargs) -> SamplingNetwork:
    """Assemble a sampling network.

    ``spec`` is either a :class:`~lifsampling.boltzmann.BoltzmannTarget` (flat,
    fully connected) or a sequence of layer sizes (layered, e.g. 144-60-4).
    With an :class:`~lifsampling.substrate.ActivationFit` the target is
    translated to hardware weights; layered networks start at zero.
    """
    from .boltzmann import BoltzmannTarget
    from .substrate import translate

    if isinstance(spec, BoltzmannTarget):
        noise = PoissonSource() if noise == "default" else noise
        net = SamplingNetwork(spec.n, noise, substrate, trial_seed=trial_seed, **kwargs)
        if fit is not None:
            W_hw, b_hw = translate(spec.W, spec.b, fit)
            net.set_shadow(W_hw, b_hw)
        return net
    sizes = [int(k) for k in spec]
    noise = RandomNetworkSpec(n=400) if noise == "default" else noise
    return SamplingNetwork(sum(sizes), noise, substrate, layers=sizes, trial_seed=trial_seed, **kwargs)


def empirical_distribution(states, subset=None) -> np.ndarray:
    """Normalized histogram over the 2^k joint states of ``subset``.

    State index is sum_i z_i 2^i over the subset order.
    """
    states = np.asarray(states)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ConfigurationError("need at least one sampled state")
    cols = np.arange(states.shape[1]) if subset is None else np.asarray(subset, dtype=np.int64)
    k = cols.size
    index = (states[:, cols].astype(np.int64) << np.arange(k)).sum(axis=1)
    counts = np.bincount(index, minlength=2 ** k).astype(float)
    return counts / counts.sum()


def write_states_csv(path, times, states):
    """State time series as (time, packed state bits in hex), unit 0 in the lowest bit."""
    states = np.asarray(states, dtype=np.uint8)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_ms", "state_hex"])
        for t, row in zip(np.asarray(times).tolist(), states):
            value = int.from_bytes(np.packbits(row[::-1]).tobytes(), "big") >> ((-row.size) % 8)
            writer.writerow([f"{t:.3f}", format(value, "x")])


def read_states_csv(path, n_units: int):
    times, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for t, hexbits in reader:
            value = int(hexbits, 16)
            times.append(float(t))
            rows.append([(value >> k) & 1 for k in range(n_units)])
    return np.array(times), np.array(rows, dtype=np.uint8).reshape(len(rows), n_units)

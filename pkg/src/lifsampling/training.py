"""In-the-loop wake-sleep training on shadow weights.

Every iteration emulates the network with the discretized shadow weights,
measures sleep statistics, and moves the shadow weights along
eta * (<.>_wake - <.>_sleep) with momentum.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boltzmann import RBM, BoltzmannTarget, dkl, enumerate_target, moments, write_rbm
from .network import ClampStimulus, SamplingNetwork, empirical_distribution
from .params import ConfigurationError

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    eta: float = 1.0
    momentum: float = 0.6
    iterations: int = 500
    sleep_duration: float = 1e4
    # data mode: clamped duration per wake pattern, patterns per class
    wake_duration: float = 100.0
    per_class: int = 7
    sample_period: float = 1.0
    warmup: float = 100.0
    seed: int = 0
    divergence_factor: float = 10.0
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative")
        if not (self.sleep_duration > 0 and self.wake_duration > 0):
            raise ConfigurationError("phase durations must be positive")


@dataclass
class Statistics:
    """First moments <z_i> and the full (symmetric) matrix of <z_i z_j>."""

    mean: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.second = np.asarray(self.second, dtype=float)

    @classmethod
    def from_states(cls, states) -> "Statistics":
        z = np.asarray(states, dtype=float)
        if z.ndim != 2 or z.shape[0] == 0:
            raise ConfigurationError("need at least one state sample")
        return cls(z.mean(axis=0), z.T @ z / z.shape[0])

    @classmethod
    def from_table(cls, table) -> "Statistics":
        return cls(*moments(table))

    @classmethod
    def average(cls, stats) -> "Statistics":
        stats = list(stats)
        return cls(np.mean([s.mean for s in stats], axis=0), np.mean([s.second for s in stats], axis=0))

    def upper(self) -> np.ndarray:
        return self.second[np.triu_indices(self.mean.size, 1)]

    def is_consistent(self, tol: float = 1e-12) -> bool:
        m = self.mean
        if np.any(m < -tol) or np.any(m > 1 + tol):
            return False
        bound = np.minimum.outer(m, m)
        off = ~np.eye(m.size, dtype=bool)
        return bool(np.all(self.second[off] <= bound[off] + tol) and np.all(self.second >= -tol))


@dataclass
class ShadowParams:
    """Real-valued shadow couplings and biases plus their momentum buffers."""

    W: np.ndarray
    b: np.ndarray
    vel_W: np.ndarray = None
    vel_b: np.ndarray = None

    def __post_init__(self):
        self.W = np.array(self.W, dtype=float)
        self.b = np.array(self.b, dtype=float)
        if self.vel_W is None:
            self.vel_W = np.zeros_like(self.W)
        if self.vel_b is None:
            self.vel_b = np.zeros_like(self.b)

    def copy(self) -> "ShadowParams":
        return ShadowParams(self.W.copy(), self.b.copy(), self.vel_W.copy(), self.vel_b.copy())


def wake_statistics_analytic(target: BoltzmannTarget) -> Statistics:
    return Statistics.from_table(enumerate_target(target))


def sleep_statistics(network: SamplingNetwork, duration: float, seed=0, clamps=(),
                     sample_period: float = 1.0, warmup: float = 100.0):
    """Moments of the free-running network; returns (Statistics, sampled states)."""
    if clamps:
        raise ConfigurationError("the sleep phase must run without clamps")
    if not duration > 0:
        raise ConfigurationError("sleep duration must be positive")
    rec = network.run(duration, seed=seed, sample_period=sample_period, warmup=warmup)
    return Statistics.from_states(rec.states), rec.states


def bottom_up_mask(network: SamplingNetwork) -> np.ndarray:
    """active[post, pre] with top-down synapses (hidden onto visible/label) switched off."""
    if network.layers is None or len(network.layers) != 3:
        raise ConfigurationError("clamped wake phase needs a visible-hidden-label network")
    active = np.ones((network.n, network.n), dtype=bool)
    hidden = network.layer(1)
    for k in (0, 2):
        active[np.ix_(network.layer(k), hidden)] = False
    return active


def wake_statistics_clamped(network: SamplingNetwork, images, labels, duration: float,
                            seed=0, sample_period: float = 1.0, settle: float = 10.0) -> Statistics:
    """Clamp visible and label layers to each pattern and sample the hidden layer.

    Top-down synapses are off for the whole phase; the first ``settle`` ms of
    every pattern are discarded.
    """
    if not duration > 0:
        raise ConfigurationError("wake duration must be positive")
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    visible, label_units = network.layer(0), network.layer(2)
    sess = network.session(seed, active=bottom_up_mask(network))
    stats = []
    for img, lab in zip(images, labels):
        onehot = np.zeros(label_units.size, dtype=np.int64)
        onehot[lab] = 1
        clamp = ClampStimulus(np.concatenate([visible, label_units]), np.concatenate([img, onehot]))
        sess.run(settle, [clamp], sample_period=None, record_spikes=False)
        rec = sess.run(duration, [clamp], sample_period=sample_period, record_spikes=False)
        stats.append(Statistics.from_states(rec.states))
    return Statistics.average(stats)


def update(params: ShadowParams, wake: Statistics, sleep: Statistics, config: TrainConfig,
           mask=None) -> ShadowParams:
    """One momentum step: v <- m v + eta (wake - sleep); param <- param + v."""
    n = params.b.size
    if wake.mean.shape != (n,) or sleep.mean.shape != (n,):
        raise ConfigurationError("statistics do not match the parameter dimension")
    iu = np.triu_indices(n, 1)
    grad_upper = wake.second[iu] - sleep.second[iu]
    grad_W = np.zeros((n, n))
    grad_W[iu] = grad_upper
    grad_W = grad_W + grad_W.T
    if mask is not None:
        grad_W = np.where(mask, grad_W, 0.0)
    grad_b = wake.mean - sleep.mean
    out = params.copy()
    out.vel_W = config.momentum * params.vel_W + config.eta * grad_W
    out.vel_b = config.momentum * params.vel_b + config.eta * grad_b
    out.W = params.W + out.vel_W
    out.b = params.b + out.vel_b
    return out


@dataclass
class TraceRow:
    iteration: int
    metric: float
    mean_abs_dw: float
    clip_fraction: float


@dataclass
class TrainResult:
    W: np.ndarray
    b: np.ndarray
    best_iteration: int
    best_metric: float
    trace: list = field(default_factory=list)

    def write_trace(self, path):
        write_trace(path, self.trace)


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "metric", "mean_abs_dw", "clip_fraction"])
        for row in trace:
            writer.writerow([row.iteration, repr(float(row.metric)), repr(float(row.mean_abs_dw)),
                             repr(float(row.clip_fraction))])


def _hardware_change(before: ShadowParams, after: ShadowParams, mask) -> float:
    from .substrate import signed_hardware

    dW = np.abs(signed_hardware(after.W) - signed_hardware(before.W))[np.triu(mask, 1)]
    db = np.abs(signed_hardware(after.b) - signed_hardware(before.b))
    vals = np.concatenate([dW, db])
    return float(vals.mean()) if vals.size else 0.0


def initial_shadow_uniform(n: int, seed=None, low: float = -15.0, high: float = 15.0) -> ShadowParams:
    """Symmetric couplings and biases uniform over the signed hardware range."""
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.uniform(low, high, (n, n)), 1)
    return ShadowParams(upper + upper.T, rng.uniform(low, high, n))


def train_target(network: SamplingNetwork, target: BoltzmannTarget, config: TrainConfig,
                 init: ShadowParams | None = None, trace_path=None) -> TrainResult:
    """Fit the network's sampled distribution to ``target`` (analytic wake phase).

    The metric of each iterate is DKL(sampled || target) from that iterate's own
    sleep run; the best iterate is returned.
    """
    if network.n != target.n:
        raise ConfigurationError("network and target differ in size")
    p_star = enumerate_target(target)
    wake = wake_statistics_analytic(target)
    params = init.copy() if init is not None else ShadowParams(network.W, network.b)
    network.set_shadow(params.W, params.b)
    trace = []
    best = (np.inf, 0, params.W.copy(), params.b.copy())
    initial_metric = None
    for it in range(config.iterations):
        network.set_shadow(params.W, params.b)
        sleep, states = sleep_statistics(network, config.sleep_duration, seed=[config.seed, it],
                                         sample_period=config.sample_period, warmup=config.warmup)
        metric = dkl(empirical_distribution(states), p_star)
        clip = network.clip_fraction()
        if metric < best[0]:
            best = (metric, it, params.W.copy(), params.b.copy())
        new = update(params, wake, sleep, config, network.mask)
        trace.append(TraceRow(it, metric, _hardware_change(params, new, network.mask), clip))
        params = new
        if initial_metric is None:
            initial_metric = metric
        elif np.isfinite(initial_metric) and metric > config.divergence_factor * initial_metric:
            if trace_path:
                write_trace(trace_path, trace)
            raise TrainingDiverged(f"metric {metric:.4g} exceeded {config.divergence_factor}x "
                                   f"its initial value {initial_metric:.4g}", trace)
    if config.iterations == 0:
        best = (np.nan, -1, params.W.copy(), params.b.copy())
    network.set_shadow(best[2], best[3])
    if trace_path:
        write_trace(trace_path, trace)
    return TrainResult(best[2], best[3], best[1], best[0], trace)


def stratified_batch(labels, per_class: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels)
    smallest = np.bincount(labels).min(initial=per_class)
    if smallest < per_class:
        raise ConfigurationError(f"a batch needs {per_class} images per class, smallest class has {smallest}")
    idx = [rng.choice(np.flatnonzero(labels == k), per_class, replace=False)
           for k in np.unique(labels)]
    return np.concatenate(idx)


def train_data(network: SamplingNetwork, images, labels, config: TrainConfig,
               evaluate=None, checkpoint_dir=None, trace_path=None) -> TrainResult:
    """Wake-sleep training of a visible-hidden-label network on binary images.

    ``evaluate(network) -> error`` scores an iterate (lower is better); it runs
    every ``config.eval_every`` iterations and decides the returned iterate.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([config.seed, 101])
    params = ShadowParams(network.W, network.b)
    trace = []
    best = (np.inf, -1, params.W.copy(), params.b.copy())
    initial_metric = None

    def score(it):
        nonlocal best, initial_metric
        network.set_shadow(params.W, params.b)
        metric = float(evaluate(network)) if evaluate is not None else np.nan
        if evaluate is not None and metric < best[0]:
            best = (metric, it, params.W.copy(), params.b.copy())
        if initial_metric is None:
            initial_metric = metric
        return metric

    for it in range(config.iterations):
        metric = score(it) if it % config.eval_every == 0 else np.nan
        if (initial_metric and np.isfinite(metric) and initial_metric > 0
                and metric > config.divergence_factor * initial_metric):
            raise TrainingDiverged(f"metric {metric:.4g} exceeded {config.divergence_factor}x "
                                   f"its initial value {initial_metric:.4g}", trace)
        network.set_shadow(params.W, params.b)
        batch = stratified_batch(labels, config.per_class, rng)
        wake = wake_statistics_clamped(network, images[batch], labels[batch], config.wake_duration,
                                       seed=[config.seed, it, 0], sample_period=config.sample_period)
        sleep_time = config.wake_duration * batch.size
        sleep, _ = sleep_statistics(network, sleep_time, seed=[config.seed, it, 1],
                                    sample_period=config.sample_period, warmup=config.warmup)
        new = update(params, wake, sleep, config, network.mask)
        trace.append(TraceRow(it, metric, _hardware_change(params, new, network.mask),
                              network.clip_fraction()))
        params = new
        if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, it + 1, network, params)
    if config.iterations > 0 or evaluate is not None:
        final = score(config.iterations)
        trace.append(TraceRow(config.iterations, final, 0.0, network.clip_fraction()))
    if evaluate is None:
        best = (np.nan, config.iterations, params.W.copy(), params.b.copy())
    network.set_shadow(best[2], best[3])
    if trace_path:
        write_trace(trace_path, trace)
    return TrainResult(best[2], best[3], best[1], best[0], trace)


def save_checkpoint(directory, iteration: int, network: SamplingNetwork, params: ShadowParams):
    """RBM record of the shadow weights plus an .npz sidecar with momentum buffers."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    v, h = network.layer(0), network.layer(1)
    lab = network.layer(2)
    rbm = RBM(np.vstack([params.W[np.ix_(v, h)], params.W[np.ix_(lab, h)]]),
              params.b[v].copy(), params.b[h].copy(), params.b[lab].copy())
    write_rbm(directory / f"checkpoint_{iteration:05d}.rbm", rbm)
    np.savez(directory / f"checkpoint_{iteration:05d}_shadow.npz", W=params.W, b=params.b,
             vel_W=params.vel_W, vel_b=params.vel_b)

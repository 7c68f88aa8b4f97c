"""Experiment orchestration: target learning and inference, data tasks, metrics and manifests."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .boltzmann import RBM, BoltzmannTarget, conditional, dkl, enumerate_target, pretrain_rbm
from .datasets import (FMNIST_CLASSES, MNIST_CLASSES, BinaryDataset, bundled_mnist_subset,
                       prepare, read_idx)
from .network import ClampStimulus, SamplingNetwork, build_network, clamp_conditional, empirical_distribution
from .noise import PoissonSource, RandomNetworkSpec
from .params import ConfigurationError
from .substrate import (ActivationFit, ClipWarning, Substrate, VariabilityModel, average_fit,
                        measure_activation, translate)
from .training import TrainConfig, initial_shadow_uniform, train_data, train_target

log = logging.getLogger(__name__)

# learning rates per experiment kind
ETA_POISSON = 1.0
ETA_RN = 0.5
ETA_DATA = 0.4

PRESETS = {
    "small": dict(n_targets=10, repetitions=1, iterations=500, sleep_duration=1e4, test_duration=5e5,
                  train_per_class=200, test_per_class=250, data_iterations=100, pretrain_epochs=50,
                  completion_per_class=25),
    "paper": dict(n_targets=20, repetitions=10, iterations=500, sleep_duration=1e5, test_duration=5e5,
                  train_per_class=None, test_per_class=None, data_iterations=500, pretrain_epochs=200,
                  completion_per_class=None),
}


@dataclass
class ExperimentConfig:
    """Every knob of an experiment; ``None`` per-class counts mean "all images"."""

    preset: str = "small"
    seed: int = 0
    substrate_seed: int = 0
    sigma_fixed: float = 0.05
    sigma_trial: float = 0.02
    weight_unit: float = 2.0
    rn_weight_unit: float = 0.15
    clamp_weight_unit: float = 10.0
    rn_projection_unit: float = 5.0
    # target distributions
    noise: str = "poisson"
    poisson_rate: float = 300.0
    poisson_weight: float = 15.0
    rn_size: int = 200
    n_units: int = 5
    n_targets: int = 10
    repetitions: int = 1
    iterations: int = 500
    sleep_duration: float = 1e4
    test_duration: float = 5e5
    eta: float | None = None
    momentum: float = 0.6
    evidence: dict = field(default_factory=lambda: {0: 0, 1: 1})
    # data
    dataset: str = "mnist"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    classes: list | None = None
    train_per_class: int | None = 200
    test_per_class: int | None = 250
    hidden: int = 60
    data_rn_size: int = 400
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.05
    data_iterations: int = 100
    data_eta: float = ETA_DATA
    wake_duration: float = 100.0
    eval_every: int = 10
    checkpoint_every: int = 50
    validation_size: int = 100
    validation_duration: float = 300.0
    classify_duration: float = 500.0
    calibration_neurons: int = 16
    calibration_duration: float = 1e4
    occlusion_scheme: str = "salt_pepper"
    occlusion_fraction: float = 0.25
    completion_duration: float = 500.0
    completion_per_class: int | None = 25
    gap_duration: float = 100.0
    dream_dwell: float = 500.0
    dream_cycles: int = 5
    dream_box: float = 10.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.noise not in ("poisson", "rn"):
            raise ConfigurationError("noise must be 'poisson' or 'rn'")
        if self.occlusion_scheme not in ("salt_pepper", "patch"):
            raise ConfigurationError("occlusion scheme must be 'salt_pepper' or 'patch'")
        if not 0 <= self.occlusion_fraction <= 1:
            raise ConfigurationError("occlusion fraction must lie in [0, 1]")
        if self.dataset not in ("mnist", "fmnist"):
            raise ConfigurationError("dataset must be 'mnist' or 'fmnist'")
        self.evidence = {int(k): int(v) for k, v in self.evidence.items()}
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigurationError(f"{name}: file {path} does not exist")

    @classmethod
    def from_preset(cls, preset: str = "small", **overrides) -> "ExperimentConfig":
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}")
        values = dict(PRESETS[preset])
        values.update(overrides)
        return cls(preset=preset, **values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            values = json.load(fh)
        unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        preset = overrides.pop("preset", None) or values.pop("preset", "small")
        values.pop("preset", None)
        merged = dict(PRESETS.get(preset, {}))
        merged.update(values)
        merged.update(overrides)
        return cls(preset=preset, **merged)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        text = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()

    def substrate(self) -> Substrate:
        return Substrate(VariabilityModel(self.sigma_fixed, self.sigma_trial, self.substrate_seed),
                         weight_unit=self.weight_unit, rn_weight_unit=self.rn_weight_unit,
                         clamp_weight_unit=self.clamp_weight_unit,
                         rn_projection_unit=self.rn_projection_unit)

    def noise_backend(self):
        if self.noise == "poisson":
            return PoissonSource(self.poisson_rate, self.poisson_rate, self.poisson_weight)
        return RandomNetworkSpec(n=self.rn_size)

    def target_eta(self) -> float:
        if self.eta is not None:
            return self.eta
        return ETA_POISSON if self.noise == "poisson" else ETA_RN

    def class_ids(self):
        if self.classes is not None:
            return list(self.classes)
        return list(MNIST_CLASSES if self.dataset == "mnist" else FMNIST_CLASSES)


def trial_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# -- target distributions ---------------------------------------------------------

def draw_target(seed, n: int = 5) -> BoltzmannTarget:
    """Couplings and biases drawn from 2 [Beta(0.5, 0.5) - 0.5]."""
    return BoltzmannTarget.random_beta(n, seed=seed)


def dkl_trace(states, p_star, sample_period: float = 1.0, n_points: int = 40, subset=None):
    """DKL of the running empirical distribution at log-spaced times; (times_ms, dkl)."""
    states = np.asarray(states)
    cols = np.arange(states.shape[1]) if subset is None else np.asarray(subset)
    index = (states[:, cols].astype(np.int64) << np.arange(cols.size)).sum(axis=1)
    counts = np.unique(np.geomspace(10, index.size, n_points).astype(np.int64))
    values = []
    for k in counts:
        p = np.bincount(index[:k], minlength=2 ** cols.size) / k
        values.append(dkl(p, p_star))
    return counts * sample_period, np.array(values)


def power_law_slope(times, values, decades: float = 2.0) -> float:
    """Slope of log(DKL) over log(t) across the first ``decades`` of the trace."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (times <= times[0] * 10 ** decades) & (values > 0)
    return float(np.polyfit(np.log10(times[sel]), np.log10(values[sel]), 1)[0])


def iterations_to_half(trace) -> int:
    """First iteration whose metric is at most half the initial one (len if never)."""
    m = np.array([row.metric for row in trace])
    hit = np.flatnonzero(m <= m[0] / 2)
    return int(hit[0]) if hit.size else len(m)


def run_target_experiment(cfg: ExperimentConfig, target_id: int = 0, repetition: int = 0) -> dict:
    """Train on one Beta-drawn target, then evaluate joint and conditional sampling."""
    target = draw_target([cfg.seed, target_id], cfg.n_units)
    p_star = enumerate_target(target)
    tseed = trial_seed(cfg.seed, target_id, repetition)
    net = build_network(target, cfg.substrate(), noise=cfg.noise_backend(), trial_seed=tseed)
    tc = TrainConfig(eta=cfg.target_eta(), momentum=cfg.momentum, iterations=cfg.iterations,
                     sleep_duration=cfg.sleep_duration, seed=tseed)
    result = train_target(net, target, tc, init=initial_shadow_uniform(cfg.n_units, seed=[tseed, 1]))

    rec = net.run(cfg.test_duration, seed=[tseed, 2])
    p_test = empirical_distribution(rec.states)
    times, trace = dkl_trace(rec.states, p_star, rec.sample_period)

    free = [i for i in range(cfg.n_units) if i not in cfg.evidence]
    crec = net.run(cfg.test_duration, clamp_conditional(cfg.evidence), seed=[tseed, 3])
    cond_star = conditional(p_star, cfg.evidence)
    cond_test = empirical_distribution(crec.states, free)
    ctimes, ctrace = dkl_trace(crec.states, cond_star, crec.sample_period, subset=free)
    on = [i for i, v in cfg.evidence.items() if v == 1]
    off = [i for i, v in cfg.evidence.items() if v == 0]
    return {
        "target_id": target_id,
        "repetition": repetition,
        "trial_seed": tseed,
        "noise": cfg.noise,
        "initial_dkl": result.trace[0].metric if result.trace else float("nan"),
        "best_iteration": result.best_iteration,
        "train_dkl": result.best_metric,
        "half_iteration": iterations_to_half(result.trace) if result.trace else 0,
        "test_dkl": dkl(p_test, p_star),
        "conditional_dkl": dkl(cond_test, cond_star),
        "clamp_on": float(crec.states[:, on].mean()) if on else float("nan"),
        "clamp_off": float(1 - crec.states[:, off].mean()) if off else float("nan"),
        "slope": power_law_slope(times, trace),
        "_train_trace": result.trace,
        "_dkl_trace": list(zip(times.tolist(), trace.tolist())),
        "_cond_trace": list(zip(ctimes.tolist(), ctrace.tolist())),
        "_tables": {"p_star": p_star, "p_test": p_test, "cond_star": cond_star, "cond_test": cond_test},
        "_weights": (result.W, result.b),
    }


def _target_job(args):
    cfg, tid, rep = args
    return run_target_experiment(cfg, tid, rep)


def bench_targets(cfg: ExperimentConfig, threads: int = 1, targets=None) -> list[dict]:
    """All (target, repetition) pairs; results ordered by (target, repetition)."""
    targets = range(cfg.n_targets) if targets is None else targets
    jobs = [(cfg, t, r) for t in targets for r in range(cfg.repetitions)]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            return list(pool.map(_target_job, jobs))
    return [_target_job(j) for j in jobs]


def sample_untrained(cfg: ExperimentConfig, target_id: int = 0, fit: ActivationFit | None = None) -> dict:
    """Sample a target straight after translation through the activation fit (no training)."""
    target = draw_target([cfg.seed, target_id], cfg.n_units)
    p_star = enumerate_target(target)
    substrate = cfg.substrate()
    tseed = trial_seed(cfg.seed, target_id, 0)
    if fit is None:
        probe = build_network(target, substrate, noise=cfg.noise_backend(), trial_seed=tseed)
        fit = calibrate(cfg, probe)[1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClipWarning)
        net = build_network(target, substrate, noise=cfg.noise_backend(), fit=fit, trial_seed=tseed)
    rec = net.run(cfg.test_duration, seed=[tseed, 2])
    times, trace = dkl_trace(rec.states, p_star, rec.sample_period)
    p = empirical_distribution(rec.states)
    return {"target_id": target_id, "trial_seed": tseed, "noise": cfg.noise, "test_dkl": dkl(p, p_star),
            "_dkl_trace": list(zip(times.tolist(), trace.tolist())),
            "_tables": {"p_star": p_star, "p_test": p}}


# -- calibration -------------------------------------------------------------------

def calibrate(cfg: ExperimentConfig, network: SamplingNetwork, neurons=None):
    """Activation fits of a subset of the network's sampling neurons and their average."""
    params = network.neuron_params()
    if neurons is None:
        count = min(cfg.calibration_neurons, network.n)
        neurons = np.unique(np.linspace(0, network.n - 1, count).astype(int))
    noise = network.noise
    fits = measure_activation([params[k] for k in neurons], noise, network.substrate,
                              duration=cfg.calibration_duration, seed=[cfg.seed, 11])
    return fits, average_fit(fits)


# -- data tasks --------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[BinaryDataset, BinaryDataset]:
    """Train and test sets, reduced to 12x12 and binarized."""
    classes = cfg.class_ids()
    if cfg.train_images:
        train = prepare(read_idx(cfg.train_images), read_idx(cfg.train_labels), classes)
        if cfg.test_images:
            test = prepare(read_idx(cfg.test_images), read_idx(cfg.test_labels), classes)
        else:
            test = train.per_class(cfg.test_per_class, offset=cfg.train_per_class or 0)
        if cfg.train_per_class:
            train = train.per_class(cfg.train_per_class)
        if cfg.test_images and cfg.test_per_class:
            test = test.per_class(cfg.test_per_class)
        return train, test
    if cfg.dataset != "mnist":
        raise ConfigurationError("Fashion-MNIST needs IDX files (train_images/train_labels)")
    if cfg.train_per_class is None or cfg.test_per_class is None:
        raise ConfigurationError("the bundled MNIST sample needs explicit per-class counts")
    X, y = bundled_mnist_subset()
    full = prepare(X, y, classes)
    return full.per_class(cfg.train_per_class), full.per_class(cfg.test_per_class, offset=cfg.train_per_class)


def pretrain(cfg: ExperimentConfig, train: BinaryDataset) -> RBM:
    return pretrain_rbm(train.flat, train.labels, cfg.hidden, n_label=train.n_classes,
                        epochs=cfg.pretrain_epochs, learning_rate=cfg.pretrain_lr, seed=[cfg.seed, 21])


def data_network(cfg: ExperimentConfig, n_visible: int, n_label: int) -> SamplingNetwork:
    return build_network([n_visible, cfg.hidden, n_label], cfg.substrate(),
                         noise=RandomNetworkSpec(n=cfg.data_rn_size), trial_seed=trial_seed(cfg.seed, 31))


def load_rbm_into(network: SamplingNetwork, rbm: RBM, fit: ActivationFit) -> float:
    """Translate an abstract RBM onto the network; returns the clipped fraction."""
    target = rbm.to_target()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClipWarning)
        W, b = translate(target.W, target.b, fit)
    network.set_shadow(W, b)
    return network.clip_fraction()


@dataclass
class Classification:
    error: float
    confusion: np.ndarray
    predictions: np.ndarray
    ties: int


def readout_label(counts) -> tuple[int, bool]:
    """Most active label unit, lowest index on ties; returns (label, tied)."""
    counts = np.asarray(counts)
    return int(np.argmax(counts)), bool(np.sum(counts == counts.max()) > 1)


def classify(network: SamplingNetwork, data: BinaryDataset, duration: float = 500.0, seed=0) -> Classification:
    """Clamp each image and read the label as the most active label neuron (lowest index on ties)."""
    sess = network.session(seed)
    visible, labels = network.layer(0), network.layer(2)
    preds = np.zeros(len(data), dtype=np.int64)
    ties = 0
    for k, img in enumerate(data.flat):
        rec = sess.run(duration, [ClampStimulus(visible, img)], sample_period=None)
        counts = np.bincount(rec.spike_ids, minlength=network.n)[labels]
        preds[k], tied = readout_label(counts)
        ties += tied
    if ties:
        log.info("%d of %d label readouts tied; lowest label index chosen", ties, len(data))
    confusion = np.zeros((data.n_classes, data.n_classes), dtype=np.int64)
    np.add.at(confusion, (data.labels, preds), 1)
    return Classification(float(np.mean(preds != data.labels)), confusion, preds, ties)


def reference_error(rbm: RBM, data: BinaryDataset, seed=0, steps: int = 200) -> float:
    preds, _ = rbm.classify_gibbs(data.flat, steps, seed=seed)
    return float(np.mean(preds != data.labels))


def train_data_network(cfg: ExperimentConfig, train: BinaryDataset, rbm: RBM, network=None,
                       checkpoint_dir=None):
    """Calibrate, translate the pre-trained RBM and train in the loop; returns (network, result, fit)."""
    net = network or data_network(cfg, train.flat.shape[1], train.n_classes)
    _, fit = calibrate(cfg, net)
    load_rbm_into(net, rbm, fit)
    rng = np.random.default_rng([cfg.seed, 41])
    val = train.subset(rng.choice(len(train), min(cfg.validation_size, len(train)), replace=False))
    tc = TrainConfig(eta=cfg.data_eta, momentum=cfg.momentum, iterations=cfg.data_iterations,
                     wake_duration=cfg.wake_duration, eval_every=cfg.eval_every, seed=cfg.seed,
                     checkpoint_every=cfg.checkpoint_every if checkpoint_dir else 0)
    result = train_data(net, train.flat, train.labels, tc,
                        evaluate=lambda n: classify(n, val, cfg.validation_duration, seed=[cfg.seed, 42]).error,
                        checkpoint_dir=checkpoint_dir)
    return net, result, fit


def occlude(shape, scheme: str, fraction: float, seed=None) -> np.ndarray:
    """Flat boolean mask of pixels that receive no clamp input."""
    h, w = shape
    total = h * w
    count = int(round(fraction * total))
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), dtype=bool)
    if count == 0:
        return mask.ravel()
    if scheme == "salt_pepper":
        mask.ravel()[rng.choice(total, count, replace=False)] = True
    elif scheme == "patch":
        side = int(round(np.sqrt(count)))
        if side * side != count:
            raise ConfigurationError(f"{count} masked pixels do not form a square patch")
        if side > min(h, w):
            raise ConfigurationError(f"a {side}x{side} patch does not fit a {h}x{w} image")
        r, c = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
        mask[r:r + side, c:c + side] = True
    else:
        raise ConfigurationError(f"unknown occlusion scheme {scheme!r}")
    return mask.ravel()


def mse(original, reconstruction) -> float:
    original = np.asarray(original, dtype=float)
    return float(np.mean((original - np.asarray(reconstruction, dtype=float)) ** 2))


def random_input(ids, rng) -> ClampStimulus:
    return ClampStimulus(ids, rng.integers(0, 2, len(ids)))


@dataclass
class Completion:
    times: np.ndarray           # ms after stimulus onset
    mse: np.ndarray             # (images, times)
    label_error: np.ndarray     # (times,)
    final_states: np.ndarray    # (images, visible) at the end of each presentation
    masks: np.ndarray


def pattern_complete(network: SamplingNetwork, data: BinaryDataset, scheme: str = "salt_pepper",
                     fraction: float = 0.25, duration: float = 500.0, gap: float = 100.0, seed=0) -> Completion:
    """Present occluded images; masked visibles run free and are compared to the original."""
    sess = network.session(seed)
    rng = np.random.default_rng([int(np.sum(np.atleast_1d(seed))), 51])
    visible, labels = network.layer(0), network.layer(2)
    shape = data.bits.shape[1:]
    n_t = int(round(duration))
    errors = np.zeros((len(data), n_t))
    label_ok = np.zeros((len(data), n_t))
    final = np.zeros((len(data), visible.size), dtype=np.uint8)
    masks = np.zeros((len(data), visible.size), dtype=bool)
    for k, img in enumerate(data.flat):
        mask = occlude(shape, scheme, fraction, seed=rng.integers(2 ** 32))
        masks[k] = mask
        if gap > 0:
            sess.run(gap, [random_input(visible, rng)], sample_period=None, record_spikes=False)
        clamp = ClampStimulus(visible[~mask], img[~mask])
        t0 = sess.t
        rec = sess.run(duration, [clamp], sample_period=1.0)
        z = rec.states[:, visible]
        errors[k] = np.mean(z[:, mask] != img[mask], axis=1) if mask.any() else 0.0
        # cumulative label spike counts since onset
        lab_sel = np.isin(rec.spike_ids, labels)
        bins = np.floor(rec.spike_times[lab_sel] - t0).astype(np.int64).clip(0, n_t - 1)
        cum = np.zeros((n_t, labels.size))
        np.add.at(cum, (bins, rec.spike_ids[lab_sel] - labels[0]), 1)
        pred = np.argmax(np.cumsum(cum, axis=0), axis=1)
        label_ok[k] = pred == data.labels[k]
        final[k] = z[-1]
    return Completion(np.arange(1, n_t + 1, dtype=float), errors, 1 - label_ok.mean(axis=0), final, masks)


@dataclass
class Dream:
    labels: np.ndarray      # scheduled label per recorded sample
    states: np.ndarray      # (samples, visible)
    grayscale: np.ndarray   # box-filtered states


def guided_dream(network: SamplingNetwork, schedule, dwell: float = 500.0, gap: float = 100.0,
                 box: float = 10.0, seed=0) -> Dream:
    """Clamp the label layer one-hot per ``schedule`` and record the visible layer."""
    visible, labels = network.layer(0), network.layer(2)
    schedule = [int(s) for s in schedule]
    if dwell <= 0 or not schedule:
        empty = np.zeros((0, visible.size))
        return Dream(np.zeros(0, dtype=np.int64), empty.astype(np.uint8), empty)
    sess = network.session(seed)
    rng = np.random.default_rng([int(np.sum(np.atleast_1d(seed))), 61])
    out_labels, out_states, out_gray = [], [], []
    width = max(1, int(round(box)))
    kernel = np.ones(width) / width
    for lab in schedule:
        if gap > 0:
            sess.run(gap, [random_input(visible, rng)], sample_period=None, record_spikes=False)
        onehot = np.zeros(labels.size, dtype=np.int64)
        onehot[lab] = 1
        rec = sess.run(dwell, [ClampStimulus(labels, onehot)], sample_period=1.0, record_spikes=False)
        z = rec.states[:, visible]
        gray = np.apply_along_axis(lambda col: np.convolve(col, kernel, mode="same"), 0, z.astype(float))
        out_labels.append(np.full(z.shape[0], lab))
        out_states.append(z)
        out_gray.append(gray)
    return Dream(np.concatenate(out_labels), np.concatenate(out_states), np.concatenate(out_gray))


def dream_match(dream: Dream, train: BinaryDataset) -> np.ndarray:
    """For each class: the class whose thresholded training mean is closest (Hamming) to the
    thresholded mean dream image; ties go to the smaller L1 distance of the raw means."""
    train_means = np.array([train.flat[train.labels == k].mean(axis=0) for k in range(train.n_classes)])
    closest = np.full(train.n_classes, -1)
    for k in range(train.n_classes):
        sel = dream.labels == k
        if sel.any():
            dm = dream.states[sel].mean(axis=0)
            hamming = ((train_means > 0.5) != (dm > 0.5)).sum(axis=1)
            l1 = np.abs(train_means - dm).sum(axis=1)
            closest[k] = int(np.lexsort((l1, hamming))[0])
    return closest


# -- records and persistence ---------------------------------------------------------------

@dataclass
class RunRecord:
    config: ExperimentConfig
    kind: str
    metrics: list = field(default_factory=list)
    dkl_traces: list = field(default_factory=list)
    train_traces: list = field(default_factory=list)
    mse_traces: list = field(default_factory=list)
    confusion: np.ndarray | None = None
    wall_clock: float = 0.0

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def add_target_results(self, results):
        for r in results:
            self.metrics.append({k: v for k, v in r.items() if not k.startswith("_")})
            for kind in ("_dkl_trace", "_cond_trace"):
                for t, v in r.get(kind, []):
                    self.dkl_traces.append({"target_id": r["target_id"], "trial_seed": r["trial_seed"],
                                            "kind": "joint" if kind == "_dkl_trace" else "conditional",
                                            "time_ms": t, "dkl": v})
            for row in r.get("_train_trace", []):
                self.train_traces.append({"target_id": r["target_id"], "trial_seed": r["trial_seed"],
                                          **dataclasses.asdict(row)})


QUANTILE_METRICS = ("test_dkl", "conditional_dkl", "train_dkl", "error")


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row.get(h)) for h in header])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def emit_plot_data(record: RunRecord, out_dir) -> list[Path]:
    """CSV files for plotting: metrics, quantiles, DKL/MSE/training traces, confusion matrix."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    metric_cols = sorted({k for row in record.metrics for k in row})
    if "trial_seed" in metric_cols:
        metric_cols.insert(0, metric_cols.pop(metric_cols.index("trial_seed")))
    _write_rows(out / "metrics.csv", metric_cols or ["trial_seed"], record.metrics)
    paths.append(out / "metrics.csv")

    rows = []
    for name in QUANTILE_METRICS:
        vals = np.array([r[name] for r in record.metrics if name in r], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            q = np.percentile(vals, [0, 25, 50, 75, 100])
            rows.append({"metric": name, "count": vals.size, "min": q[0], "q25": q[1], "median": q[2],
                         "q75": q[3], "max": q[4]})
    _write_rows(out / "quantiles.csv", ["metric", "count", "min", "q25", "median", "q75", "max"], rows)
    paths.append(out / "quantiles.csv")

    _write_rows(out / "dkl_traces.csv", ["target_id", "trial_seed", "kind", "time_ms", "dkl"], record.dkl_traces)
    _write_rows(out / "train_traces.csv",
                ["target_id", "trial_seed", "iteration", "metric", "mean_abs_dw", "clip_fraction"],
                record.train_traces)
    _write_rows(out / "mse_traces.csv", ["scheme", "trial_seed", "time_ms", "median_mse", "label_error"],
                record.mse_traces)
    paths += [out / "dkl_traces.csv", out / "train_traces.csv", out / "mse_traces.csv"]

    with open(out / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        if record.confusion is None:
            writer.writerow(["true_label"])
        else:
            k = record.confusion.shape[0]
            writer.writerow(["true_label"] + [f"pred_{j}" for j in range(k)])
            for i, row in enumerate(record.confusion.tolist()):
                writer.writerow([i] + row)
    paths.append(out / "confusion.csv")
    return paths


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, record: RunRecord, files) -> Path:
    """manifest.json with config hash, code version, wall-clock and per-file checksums."""
    out = Path(out_dir)
    with open(out / "config.json", "w") as fh:
        json.dump(record.config.as_dict(), fh, indent=2, sort_keys=True, default=str)
    files = sorted({Path(f) for f in files} | {out / "config.json"})
    manifest = {
        "kind": record.kind,
        "config_hash": record.config_hash,
        "code_version": __version__,
        "wall_clock_s": round(record.wall_clock, 3),
        "files": {str(Path(f).relative_to(out)): sha256_file(f) for f in files},
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start

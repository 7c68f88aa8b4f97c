"""Hardware realism: 4-bit weights, sign-paired synapses, parameter mismatch, calibration."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.special import expit
from scipy.stats import spearmanr

from .noise import DEFAULT_RN_WEIGHT_UNIT
from .params import DEFAULT_DELAY, DEFAULT_DT, ConfigurationError, NeuronParams

log = logging.getLogger(__name__)

W_MAX = 15

_POSITIVE = ("tau_ref", "tau_mem", "C_mem", "tau_syn_exc", "tau_syn_inh")


class CalibrationError(RuntimeError):
    pass


class ClipWarning(UserWarning):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def discretize(shadow):
    """Map real-valued shadow weights onto an (exc, inh) pair of 4-bit weights.

    Magnitudes are rounded half away from zero and clipped to [0, 15]; the sign
    selects the channel, so at most one of the two is non-zero.
    """
    shadow = np.asarray(shadow, dtype=float)
    mag = np.clip(np.floor(np.abs(shadow) + 0.5), 0, W_MAX).astype(np.int64)
    exc = np.where(shadow > 0, mag, 0)
    inh = np.where(shadow < 0, mag, 0)
    if exc.ndim == 0:
        return int(exc), int(inh)
    return exc, inh


def signed_hardware(shadow) -> np.ndarray:
    """The effective signed hardware weight exc - inh."""
    exc, inh = discretize(shadow)
    return np.asarray(exc) - np.asarray(inh)


@dataclass
class SignedWeight:
    shadow: float

    @property
    def exc(self) -> int:
        return discretize(self.shadow)[0]

    @property
    def inh(self) -> int:
        return discretize(self.shadow)[1]


def _jitter(params: NeuronParams, sigma: float, rng: np.random.Generator) -> NeuronParams:
    if sigma == 0:
        return params
    values = params.as_dict()
    for name in NeuronParams.names():
        while True:
            factor = 1.0 + sigma * rng.standard_normal()
            if name not in _POSITIVE or factor > 0:
                break
        values[name] = values[name] * factor
    try:
        return NeuronParams(**values)
    except ConfigurationError:
        # reversal ordering violated; redraw the whole set
        return _jitter(params, sigma, rng)


def apply_fixed_pattern(params: NeuronParams, neuron_id: int, substrate_seed: int,
                        sigma: float = 0.05) -> NeuronParams:
    """Static mismatch: every analog parameter scaled by its own (1 + N(0, sigma)) factor.

    Deterministic in (neuron_id, substrate_seed).
    """
    if sigma < 0:
        raise ConfigurationError("sigma must be non-negative")
    rng = np.random.default_rng([int(substrate_seed), int(neuron_id), 0])
    return _jitter(params, sigma, rng)


@dataclass(frozen=True)
class VariabilityModel:
    """Fixed-pattern mismatch (per substrate seed) plus trial-to-trial write noise."""

    sigma_fixed: float = 0.05
    sigma_trial: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.sigma_fixed < 0 or self.sigma_trial < 0:
            raise ConfigurationError("variability sigmas must be non-negative")

    def neuron(self, base: NeuronParams, neuron_id: int, trial_seed=None) -> NeuronParams:
        params = apply_fixed_pattern(base, neuron_id, self.seed, self.sigma_fixed)
        if trial_seed is not None and self.sigma_trial > 0:
            rng = np.random.default_rng([int(self.seed), int(neuron_id), 1, int(trial_seed)])
            params = _jitter(params, self.sigma_trial, rng)
        return params


IDEAL = VariabilityModel(0.0, 0.0, 0)


@dataclass(frozen=True)
class Substrate:
    """Emulated chip: mismatch model plus the weight-to-conductance calibration.

    ``weight_unit`` is the conductance (nS) of one weight LSB on sampling-neuron
    inputs; ``rn_weight_unit`` the same for synapses inside the random network,
    which run at a lower conductance scale to keep the RN asynchronous;
    ``clamp_weight_unit`` the same for the host-driven clamp multapses, which
    must override the background noise; ``rn_projection_unit`` the same for the
    RN-to-sampling-neuron projections, which must carry as much noise as the
    Poisson backend.
    """

    variability: VariabilityModel = field(default_factory=VariabilityModel)
    weight_unit: float = 2.0
    rn_weight_unit: float = DEFAULT_RN_WEIGHT_UNIT
    clamp_weight_unit: float = 10.0
    rn_projection_unit: float = 5.0
    dt: float = DEFAULT_DT
    delay: float = DEFAULT_DELAY


@dataclass
class ActivationFit:
    nu_0: float
    w_b0: float
    s: float
    residual: float = 0.0

    def __post_init__(self):
        if not self.nu_0 > 0:
            raise CalibrationError(f"fitted plateau must be positive, got {self.nu_0}")
        if not self.s > 0:
            raise CalibrationError(f"fitted width must be positive, got {self.s}")

    def rate(self, w_b):
        return self.nu_0 / (1.0 + np.exp(-(np.asarray(w_b, dtype=float) - self.w_b0) / self.s))

    def as_dict(self) -> dict:
        return asdict(self)


def logistic_rate(w, nu_0, w_b0, s):
    return nu_0 * expit((w - w_b0) / s)


def fit_logistic(w_b, rates, min_width: float = 0.05) -> ActivationFit:
    """Least-squares fit of nu_0 / (1 + exp(-(w_b - w_b0) / s)).

    ``residual`` is the RMS deviation relative to nu_0.
    """
    w_b = np.asarray(w_b, dtype=float)
    rates = np.asarray(rates, dtype=float)
    if rates.max() <= 0:
        raise CalibrationError(f"no activity at any sweep point: {list(zip(w_b, rates))}")
    half = rates.max() / 2
    guess_mid = w_b[np.argmin(np.abs(rates - half))]
    try:
        popt, _ = curve_fit(logistic_rate, w_b, rates, p0=[rates.max(), guess_mid, 2.0],
                            bounds=([1e-9, w_b.min() - 50, 1e-6], [np.inf, w_b.max() + 50, 100.0]),
                            maxfev=20000)
    except (RuntimeError, ValueError) as exc:
        raise CalibrationError(
            f"logistic fit failed ({exc}); raw points: {list(zip(w_b.tolist(), rates.tolist()))}"
        ) from None
    nu_0, w_b0, s = popt
    residual = float(np.sqrt(np.mean((logistic_rate(w_b, *popt) - rates) ** 2)) / nu_0)
    if s < min_width:
        raise CalibrationError(
            f"activation is a step (s={s:.3g}); raw points: {list(zip(w_b.tolist(), rates.tolist()))}"
        )
    return ActivationFit(float(nu_0), float(w_b0), float(s), residual)


def is_monotone(w_b, rates, threshold: float = 0.95) -> bool:
    rho = spearmanr(w_b, rates).statistic
    return bool(rho > threshold)


def measure_activation(neuron_params, noise, substrate: Substrate | None = None,
                       sweep=np.arange(-15, 16), duration: float = 1e4, seed=0,
                       return_rates: bool = False):
    """Bias sweep of one or more sampling neurons; one :class:`ActivationFit` each.

    ``neuron_params`` is a single :class:`NeuronParams` or a list of them. All
    sweep points of all neurons run side by side in one emulation as
    uncoupled sampling units sharing the bias neuron and noise backend.
    """
    from dataclasses import replace

    from .network import SamplingNetwork

    # the given parameters are already the realized (mismatched) ones
    substrate = replace(substrate or Substrate(), variability=IDEAL)
    single = isinstance(neuron_params, NeuronParams)
    plist = [neuron_params] if single else list(neuron_params)
    sweep = np.asarray(sweep, dtype=float)
    units = [p for p in plist for _ in sweep]
    biases = np.tile(sweep, len(plist))
    net = SamplingNetwork(len(units), noise=noise, substrate=substrate, unit_params=units)
    net.b = biases.copy()
    rec = net.run(duration, seed=seed, sample_period=None, warmup=200.0)
    rates = rec.rates()[:net.n].reshape(len(plist), sweep.size)
    fits = []
    for row in rates:
        if noise is None:
            try:
                fits.append(fit_logistic(sweep, row))
            except CalibrationError:
                fits.append(None)
        else:
            fits.append(fit_logistic(sweep, row))
    out = fits[0] if single else fits
    if return_rates:
        return out, (rates[0] if single else rates)
    return out


def average_fit(fits) -> ActivationFit:
    fits = [f for f in fits if f is not None]
    return ActivationFit(
        float(np.mean([f.nu_0 for f in fits])),
        float(np.mean([f.w_b0 for f in fits])),
        float(np.mean([f.s for f in fits])),
        float(np.mean([f.residual for f in fits])),
    )


def write_calibration_csv(path, fits):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["neuron", "nu_0", "w_b0", "s", "residual"])
        for k, f in enumerate(fits):
            writer.writerow([k, f"{f.nu_0:.6g}", f"{f.w_b0:.6g}", f"{f.s:.6g}", f"{f.residual:.6g}"])


def read_calibration_csv(path) -> list[ActivationFit]:
    with open(path, newline="") as fh:
        return [ActivationFit(float(r["nu_0"]), float(r["w_b0"]), float(r["s"]), float(r["residual"]))
                for r in csv.DictReader(fh)]


def translate(W, b, fit: ActivationFit):
    """Abstract Boltzmann parameters to real-valued hardware (shadow) weights.

    Bias: w_b = w_b0 + s * b; couplings: s * W. Warns when magnitudes will be
    clipped by the 4-bit range.
    """
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    w_bias = fit.w_b0 + fit.s * b
    w_coupling = fit.s * W
    n_clip = int(np.sum(np.abs(w_bias) > W_MAX + 0.5) + np.sum(np.abs(w_coupling) > W_MAX + 0.5))
    if n_clip:
        total = w_bias.size + w_coupling.size
        warnings.warn(f"{n_clip} of {total} translated weights exceed the 4-bit range and will be clipped",
                      ClipWarning, stacklevel=2)
    return w_coupling, w_bias

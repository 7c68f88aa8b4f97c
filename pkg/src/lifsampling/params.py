"""Neuron parameter sets for the conductance-based LIF model.

Units: potentials in mV, times in ms (biological frame), capacitance in nF.
Conductances are expressed in nS; one hardware weight unit is one nS.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np


class ConfigurationError(ValueError):
    """Raised for inconsistent network or experiment configuration."""


@dataclass(frozen=True)
class NeuronParams:
    V_reset: float
    E_leak: float
    V_thresh: float
    E_inh: float
    E_exc: float
    tau_ref: float
    tau_mem: float
    C_mem: float
    tau_syn_exc: float
    tau_syn_inh: float

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("tau_ref", "tau_mem", "C_mem", "tau_syn_exc", "tau_syn_inh"):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if not self.E_inh < self.V_thresh < self.E_exc:
            raise ConfigurationError(
                f"need E_inh < V_thresh < E_exc, got {self.E_inh}, {self.V_thresh}, {self.E_exc}"
            )

    @property
    def g_leak(self) -> float:
        """Leak conductance in nS (C_mem / tau_mem)."""
        return 1000.0 * self.C_mem / self.tau_mem

    def replace(self, **changes) -> "NeuronParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# The membrane time constant is quoted only approximately ("ca. 7 ms"); 7 ms is used.
SAMPLING_NEURON = NeuronParams(
    V_reset=-35.0, E_leak=-20.0, V_thresh=-20.0, E_inh=-100.0, E_exc=60.0,
    tau_ref=4.0, tau_mem=7.0, C_mem=0.2, tau_syn_exc=8.0, tau_syn_inh=8.0,
)

BIAS_NEURON = NeuronParams(
    V_reset=-30.0, E_leak=60.0, V_thresh=-20.0, E_inh=-100.0, E_exc=60.0,
    tau_ref=1.5, tau_mem=7.0, C_mem=0.2, tau_syn_exc=5.0, tau_syn_inh=5.0,
)

RANDOM_NETWORK_NEURON = NeuronParams(
    V_reset=-60.0, E_leak=-10.0, V_thresh=-20.0, E_inh=-100.0, E_exc=60.0,
    tau_ref=4.0, tau_mem=7.0, C_mem=0.2, tau_syn_exc=8.0, tau_syn_inh=8.0,
)

DEFAULT_DT = 0.1
DEFAULT_DELAY = 1.0


def charging_time(params: NeuronParams) -> float:
    """Time for a free membrane to charge from V_reset to V_thresh.

    Only defined for suprathreshold leak potentials; returns inf otherwise.
    """
    if params.E_leak <= params.V_thresh:
        return float("inf")
    return params.tau_mem * np.log(
        (params.E_leak - params.V_reset) / (params.E_leak - params.V_thresh)
    )


def free_isi(params: NeuronParams) -> float:
    """Inter-spike interval of an unconnected suprathreshold neuron."""
    return params.tau_ref + charging_time(params)

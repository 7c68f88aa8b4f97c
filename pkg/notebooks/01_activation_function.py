"""
Activation function of a sampling unit
======================================

A sampling neuron driven by background noise fires at a rate that depends
logistically on the weight of its bias synapse. This script sweeps that
weight for a few mismatched neurons under both noise backends and fits the
logistic curve used later to translate Boltzmann parameters to hardware.
"""

# %%
import numpy as np

from lifsampling.network import build_network
from lifsampling.noise import PoissonSource, RandomNetworkSpec
from lifsampling.substrate import Substrate, average_fit, measure_activation

substrate = Substrate()
sweep = np.arange(-15, 16)

# %% Poisson background: every neuron gets private excitatory and inhibitory trains.
net = build_network([4], substrate, noise=PoissonSource())
fits, rates = measure_activation(net.neuron_params()[:net.n], net.noise, substrate, sweep=sweep,
                                 duration=1e4, seed=1, return_rates=True)
for k, fit in enumerate(fits):
    print(f"neuron {k}: nu_0={fit.nu_0:6.1f} Hz  w_b0={fit.w_b0:+.2f}  s={fit.s:.2f}  residual={fit.residual:.3f}")

# %% The measured curve next to the fit for neuron 0.
for w, r in zip(sweep[::3], rates[0][::3]):
    print(f"w_b={w:+3d}  measured {r:6.1f} Hz  fit {fits[0].rate(w):6.1f} Hz")

# %% Random-network background: noise comes from a recurrent inhibitory population.
net_rn = build_network([4], substrate, noise=RandomNetworkSpec())
fits_rn = measure_activation(net_rn.neuron_params()[:net_rn.n], net_rn.noise, substrate, sweep=sweep,
                             duration=1e4, seed=1)
avg_po, avg_rn = average_fit(fits), average_fit(fits_rn)
print("average Poisson fit:", avg_po.as_dict())
print("average RN fit:     ", avg_rn.as_dict())

# %% Fixed-pattern mismatch spreads the fitted offsets and widths across neurons.
print("w_b0 spread:", np.std([f.w_b0 for f in fits_rn]).round(2), "LSB")
print("s spread:   ", np.std([f.s for f in fits_rn]).round(2), "LSB")

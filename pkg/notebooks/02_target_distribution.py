"""
Learning a 5-unit Boltzmann distribution in the loop
====================================================

A random target over five binary variables is translated to hardware weights
through the average activation fit, then refined by wake-sleep updates that
use the emulated network's own samples. The trained network is finally used
for conditional inference with two units clamped.
"""

# %%
import numpy as np

from lifsampling import experiments as ex

# A shortened run; the "small" preset uses 500 iterations and a 5e5 ms test.
cfg = ex.ExperimentConfig.from_preset("small", iterations=100, test_duration=1e5)
target = ex.draw_target([cfg.seed, 0])
print("target biases:", target.b.round(2))

# %% Sampling straight after translation, before any training.
untrained = ex.sample_untrained(cfg, target_id=0)
print(f"untrained DKL: {untrained['test_dkl']:.4f}")

# %% Training, then the joint and conditional tests.
res = ex.run_target_experiment(cfg, target_id=0)
print(f"best iterate {res['best_iteration']} with training DKL {res['train_dkl']:.4f}")
print(f"test DKL {res['test_dkl']:.4f}, power-law slope of the DKL trace {res['slope']:.2f}")
print(f"conditional DKL with evidence {cfg.evidence}: {res['conditional_dkl']:.4f}")
print(f"clamp efficacy: on {res['clamp_on']:.3f}, off {res['clamp_off']:.3f}")

# %% Learning curve, every tenth iteration.
for row in res["_train_trace"][::10]:
    print(f"iteration {row.iteration:3d}  DKL {row.metric:.4f}")

# %% Sampled versus target probabilities of the most likely states.
tables = res["_tables"]
order = np.argsort(tables["p_star"])[::-1][:8]
for s in order:
    print(f"state {s:2d}  target {tables['p_star'][s]:.3f}  sampled {tables['p_test'][s]:.3f}")

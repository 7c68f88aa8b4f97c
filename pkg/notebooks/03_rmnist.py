"""
Classification, pattern completion and dreaming on reduced MNIST
================================================================

Images of four digit classes are reduced to 12x12 binary pixels. An RBM
(144 visible, 60 hidden, 4 label units) is pre-trained in software, mapped
onto the emulated network and fine-tuned in the loop. The same network then
classifies test images, completes occluded ones and, with a label clamped,
produces images of that class.
"""

# %%
import numpy as np

from lifsampling import experiments as ex

# The "small" preset with fewer completion images; runs in a few minutes.
cfg = ex.ExperimentConfig.from_preset("small", completion_per_class=5, dream_cycles=2)
train, test = ex.load_data(cfg)
print(f"{len(train)} training and {len(test)} test images, classes {train.class_map.tolist()}")
print(f"fraction of ink pixels: {train.bits.mean():.3f}")

# %% Software pre-training and the Gibbs-sampling reference error.
rbm = ex.pretrain(cfg, train)
print(f"reference RBM error: {ex.reference_error(rbm, test, seed=1):.2%}")

# %% Map onto the emulated network and train in the loop.
net, result, fit = ex.train_data_network(cfg, train, rbm)
print(f"activation fit used for translation: {fit.as_dict()}")
for row in result.trace:
    if np.isfinite(row.metric):
        print(f"iteration {row.iteration:3d}  validation error {row.metric:.2%}")

# %% Classification of the test set from the most active label neuron.
cls = ex.classify(net, test, cfg.classify_duration, seed=2)
print(f"test error {cls.error:.2%}")
print(cls.confusion)

# %% Pattern completion under both occlusion schemes.
subset = test.per_class(cfg.completion_per_class)
for scheme in ("salt_pepper", "patch"):
    comp = ex.pattern_complete(net, subset, scheme, 0.25, cfg.completion_duration, cfg.gap_duration, seed=3)
    med = np.median(comp.mse, axis=0)
    print(f"{scheme}: median MSE at onset {med[0]:.3f}, 50 ms {med[49]:.3f}, 100 ms {med[99]:.3f}")

# %% Guided dreaming: cycle through the labels and look at the mean image per label.
schedule = list(range(train.n_classes)) * cfg.dream_cycles
dream = ex.guided_dream(net, schedule, cfg.dream_dwell, cfg.gap_duration, cfg.dream_box, seed=4)
print("closest class mean per clamped label:", ex.dream_match(dream, train).tolist())
for label in range(train.n_classes):
    mean = dream.states[dream.labels == label].mean(axis=0).reshape(12, 12)
    print(f"label {train.class_map[label]}")
    print("\n".join("".join("#" if v > 0.5 else "." for v in row) for row in mean))

"""
How well is the true class probability predicted?
=================================================

Each modality has a small regressor that guesses, from the gated input, how
much probability the modality's own classifier will put on the correct
class. Here modality ``m1`` carries signal for half the samples and ``m2``
for the other half, so a useful estimate should favour the informative one
sample by sample.
"""

# %%
import numpy as np

from mmdyn import SyntheticSpec, SyntheticTabular, TrainConfig, patient_split, synthesize_dataset, train
from mmdyn.confidence import tcp_calibration_stats
from mmdyn.evaluation import confidence_rows, tcp_error_curve

spec = SyntheticSpec(2000, 2, [SyntheticTabular("m1", 50, 10), SyntheticTabular("m2", 50, 10)],
                     assignment="exclusive")
dataset, truth = synthesize_dataset(spec, seed=0)
split = patient_split(dataset, {"P2"}, 0.2, seed=0)
model = train(TrainConfig(epochs=50, latent_dims={"m1": 32, "m2": 32}), dataset, split)

# %%
# Per-sample ordering
# -------------------
out = model.forward_numpy(dataset, split.test_indices)
wins = []
for k, i in enumerate(split.test_indices):
    (good,) = truth.informative_modalities[i]
    bad = "m2" if good == "m1" else "m1"
    wins.append(out["tcp_hat"][good][k] > out["tcp_hat"][bad][k])
print(f"informative modality ranked higher on {100 * np.mean(wins):.1f}% of test samples")

# %%
# Calibration and the relative-error curve
# ----------------------------------------
# The curve reports, for each threshold x, the share of samples whose estimate
# overshoots the true class probability by at least a factor 1 + x.
rows = confidence_rows(model, dataset, split.test_indices)
thresholds = np.round(np.arange(0, 1.01, 0.25), 2)
for name in model.modality_names:
    t = [r["tcp"] for r in rows if r["modality"] == name]
    th = [r["tcp_hat"] for r in rows if r["modality"] == name]
    stats = tcp_calibration_stats(t, th)
    curve = tcp_error_curve(t, th, thresholds)
    print(f"{name}: mae {stats['mae']:.3f} ± {stats['mae_std']:.3f}, mean tcp {stats['mean_tcp']:.3f}")
    print("   " + "  ".join(f"x={x:g}: {f:.2f}" for x, f in zip(curve.thresholds, curve.fractions)))

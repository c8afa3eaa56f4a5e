"""Recover a fine-scale latent field from coarse aggregate labels.

The model only ever sees one number per region, yet the learned spatial
latent can be evaluated at any point.  This script trains on regional
aggregates of a single spatial field, queries the posterior on a dense
grid, and compares it with the generating truth at the observed points.

Writes disaggregation.png when matplotlib is importable; always prints a
correlation summary.

    python3 demos/02_disaggregation.py
"""
import numpy as np

from agggp import (
    ResolutionConfig,
    SynthConfig,
    disaggregate,
    generate,
    initialize_model,
    train,
)

config = SynthConfig(
    grid=(8, 8),
    resolutions=(
        ResolutionConfig("space", "spatial", 2, 40, "matern32", 1.0, 0.3),
    ),
    seed=11,
    noise_std_fraction=0.05,
)
result = generate(config)
data = result.dataset
print(f"{data.n_regions} regions, {40 * data.n_regions} latent points")

labels = np.array([b.label for b in data.bags()])
model = initialize_model(data, points_per_region=2,
                         noise_var=1e-3 * float(np.var(labels)))
warm, _ = train(model, data, iterations=2000, lr=1e-3,
                update="per-batch", train_hyperparams=False, seed=0)
fitted, _ = train(warm, data, iterations=4000, lr=1e-3,
                  update="per-batch", seed=1)

# Posterior mean of the latent at every point the generator used, paired
# with the true latent values those points received.
truth = {entry["region_id"]: np.asarray(entry["values"])
         for entry in result.ground_truth["latents"]}
estimates, actual = [], []
for bag in data.bags():
    points = bag.resolutions[0].points
    posterior = disaggregate(fitted, "space", points)
    estimates.append([p.mean for p in posterior])
    actual.append(truth[bag.region_id])
estimates = np.concatenate(estimates)
actual = np.concatenate(actual)
r = np.corrcoef(estimates, actual)[0, 1]
print(f"pointwise correlation with the generating field: {r:.3f}")

# Dense posterior surface for plotting.
side = 60
lon, lat = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side))
grid_points = np.column_stack([lon.ravel(), lat.ravel()])
surface = np.array([p.mean for p in disaggregate(fitted, "space", grid_points)])

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("matplotlib not installed; skipping the figure")
else:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2))
    axes[0].imshow(surface.reshape(side, side), origin="lower",
                   extent=(0, 1, 0, 1))
    axes[0].set_title("posterior mean surface")
    sc = axes[1].scatter(
        np.concatenate([b.resolutions[0].points[:, 0] for b in data.bags()]),
        np.concatenate([b.resolutions[0].points[:, 1] for b in data.bags()]),
        c=actual, s=4)
    axes[1].set_title("generating latent at sample points")
    fig.colorbar(sc, ax=axes[1])
    fig.tight_layout()
    fig.savefig("disaggregation.png", dpi=120)
    print("wrote disaggregation.png")

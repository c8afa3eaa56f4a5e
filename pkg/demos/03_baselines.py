"""Cross-validated comparison of every regression method on one dataset.

Runs k-fold cross validation for the variational multi-resolution model,
its single-resolution variant, the exact aggregated GP, a GP on region
centroids, both mean-embedding ridge regressions, and plain linear
regression on centroids, then prints one aligned summary table.

    python3 demos/03_baselines.py
"""
import numpy as np

from agggp import (
    METHODS,
    ResolutionConfig,
    SynthConfig,
    format_table,
    generate,
    run_cv,
)

config = SynthConfig(
    grid=(6, 5),
    resolutions=(
        ResolutionConfig("features", "covariate", 2, 10, "rbf", 1.0, 1.0),
        ResolutionConfig("space", "spatial", 2, 20, "matern32", 1.0, 0.4),
    ),
    seed=5,
    noise_std_fraction=0.1,
)
data = generate(config).dataset
print(f"dataset: {data.n_regions} regions, resolutions {data.resolution_names}")

# Short fits keep the demo quick; the table is about relative behaviour,
# not peak accuracy.  vbagg is restricted to the spatial resolution since
# it models exactly one.
reports = []
for method in METHODS:
    kwargs = {"resolutions": ["space"]} if method == "vbagg" else {}
    params = {"iterations": 1500, "lr": 1e-3} if method in ("mvbagg", "vbagg") else {}
    report = run_cv(data, method, k=3, seed=0, params=params, **kwargs)
    reports.append(report)
    summary = report.summary()
    shown = {k: round(v[0], 4) for k, v in summary.items()}
    print(f"  {method}: {shown}")

print()
print(format_table(reports))

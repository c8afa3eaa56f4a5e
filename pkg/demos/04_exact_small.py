"""Exact aggregated GP regression, and what the variational bound gives up.

At small scale the aggregated-output GP has a closed form: the labels are
jointly Gaussian with covariance built from bag-averaged kernels, so the
log marginal likelihood and the aggregate posterior are exact.  This
script fits that exact model, then shows two facts about the variational
approximation:

  * its objective never exceeds the exact evidence, and
  * with inducing points at every observed point and the posterior
    optimized, its predictions agree with the exact ones.

    python3 demos/04_exact_small.py
"""
import numpy as np

from agggp import exact_gp, kernels, optim, variational
from agggp.bags import Bag, Dataset, MultiResBag
from agggp.kernels import KernelSpec

rng = np.random.default_rng(42)

# Twelve regions, one resolution, a handful of points each.
spec = KernelSpec("rbf", scale=1.0, lengthscale=0.8, input_dim=1)
regions = []
for i in range(12):
    m = int(rng.integers(2, 5))
    pts = rng.uniform(0, 4, size=(m, 1))
    regions.append(MultiResBag(f"r{i:03d}",
                               [Bag(f"r{i:03d}", pts, np.full(m, 1.0 / m))],
                               None))

# Draw labels from the generating model itself so the exact fit is 'right'.
noise_var = 0.05
K = exact_gp.aggregated_gram_sum([spec], regions)
L = np.linalg.cholesky(K + noise_var * np.eye(len(regions)))
y = L @ rng.standard_normal(len(regions))
regions = [MultiResBag(r.region_id, r.resolutions, float(yi))
           for r, yi in zip(regions, y)]
data = Dataset.from_bags(regions, resolution_names=["x"])

exact = exact_gp.fit(data.bags(), [spec], noise_var=noise_var)
lml = exact_gp.log_marginal_likelihood(exact)
print(f"exact log marginal likelihood: {lml:.4f}")

# Same hyperparameters, inducing set = every observed point.
Z = data.points_block(0)
prior_cov = kernels.add_jitter(kernels.gram(spec, Z), spec.scale)
state = variational.VariationalState(
    inducing=[Z.copy()],
    mean=[np.zeros(len(Z))],
    cov_factor=[kernels.chol_lower(prior_cov)],
)
model = variational.MVBAggModel(["x"], [spec], state, noise_var)

bound_init = variational.elbo(model, data.bags(), data.n_regions)
print(f"variational bound at the prior:  {bound_init:.4f}  (gap "
      f"{lml - bound_init:.4f})")

fitted = model
for stage, (iters, lr) in enumerate([(3000, 1e-2), (2000, 1e-3)]):
    fitted, _ = optim.train(fitted, data, iterations=iters,
                            batch_size=len(regions), lr=lr, seed=stage,
                            update="per-batch", train_hyperparams=False)
bound_opt = variational.elbo(fitted, data.bags(), data.n_regions)
print(f"variational bound optimized:     {bound_opt:.4f}  (gap "
      f"{lml - bound_opt:.4f})")

exact_preds = exact_gp.predict_many(exact, regions)
var_preds = [variational.predict_bag(fitted, r) for r in regions]
worst = max(abs(e.mean - v.mean) for e, v in zip(exact_preds, var_preds))
print(f"largest |exact - variational| posterior mean: {worst:.2e}")

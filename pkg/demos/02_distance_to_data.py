"""The smoothed distance-to-data and the error bound built on it.

The OOD penalty is motivated by a bound: a model's error at a query cannot
exceed its error at the nearest training point plus a Lipschitz term in the
distance to the data. Here we check each piece numerically.

    python3 demos/02_distance_to_data.py
"""
import numpy as np

from rbplan.ood import (certify_bound, log_perturbed_density, min_distance_sq, run_theory_suite,
                        smoothed_distance_sq, lemma1_constant)

rng = np.random.default_rng(0)
data = rng.normal(size=(32, 3))
q = rng.normal(size=(4, 3)) * 2

# Soft minimum over data points: approaches the hard minimum as sigma shrinks.
hard = min_distance_sq(q, data)[0]
for sigma in (1.0, 0.3, 0.1, 0.01):
    soft = smoothed_distance_sq(q, data, sigma)
    print(f"sigma={sigma:<5} max |soft - hard| = {np.abs(soft - hard).max():.2e}"
          f"  (allowed {sigma ** 2 * np.log(len(data)):.2e})")

# It is also a rescaled log density of the data smoothed with Gaussian noise.
sigma = 0.4
lhs = -sigma ** 2 * log_perturbed_density(q, data, sigma)
rhs = smoothed_distance_sq(q, data, sigma, C1=0.0) + lemma1_constant(len(data), 3, sigma)
print("log-density identity residual:", np.abs(lhs - rhs).max())

# Bound check on a toy "model error" e(s) = |sin s| known at 50 points.
pts = rng.uniform(0, 2 * np.pi, (50, 1))
queries = rng.uniform(0, 2 * np.pi, (10_000, 1))
out = certify_bound(lambda s: np.abs(np.sin(s)), pts, queries, sigma=0.1)
print(f"bound on |sin|: estimated L={out['lipschitz']:.3f}, violations={out['violations']}, "
      f"tightest slack={out['min_slack']:.3f}")

# Everything at once, as `rbplan verify-theory` runs it.
report = run_theory_suite()
for name, check in report["checks"].items():
    print(f"  {name:12s} violations={check['violations']}")
print("suite ok:", report["ok"])

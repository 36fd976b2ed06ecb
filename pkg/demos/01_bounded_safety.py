"""Bounded safety on a small chain: exact value, Monte Carlo estimate, model error.

Run with ``python demos/01_bounded_safety.py``.
"""

import numpy as np

from ambs.logic import TransitionSystem, parse_formula
from ambs.measure import (MeasureQuery, beta_for_kl, enumerate_measure, exact_measure,
                          kl_alpha_budget, mc_estimate, mix_with_uniform, row_kl,
                          sample_size_exact)

rng = np.random.default_rng(0)
safe = parse_formula("!hazard")

# A five-state chain; state 4 is a hazard.
T = np.array([
    [0.6, 0.3, 0.1, 0.0, 0.0],
    [0.1, 0.6, 0.2, 0.1, 0.0],
    [0.0, 0.2, 0.5, 0.2, 0.1],
    [0.0, 0.0, 0.3, 0.5, 0.2],
    [0.0, 0.0, 0.0, 0.0, 1.0],
])
labels = [frozenset()] * 4 + [frozenset({"hazard"})]
system = TransitionSystem(kernel=T, labels=labels)

print("probability of staying safe for n steps from state 0")
for n in range(1, 7):
    q = MeasureQuery(system, safe, 0, n)
    print(f"  n={n}: dynamic programming {exact_measure(q):.6f}, path enumeration {enumerate_measure(q):.6f}")

# Estimate from sampled paths with the Hoeffding sample size for (eps, delta) = (0.05, 0.05).
n = 6
m = sample_size_exact(0.05, 0.05)
q = MeasureQuery(system, safe, 0, n)
est = mc_estimate(q, m, rng)
print(f"\nMonte Carlo with m={m} paths: {est:.4f} (exact {exact_measure(q):.4f})")

# A model whose rows drift towards uniform, staying inside the per-row KL budget
# that keeps the change in the measure below eps/2.
eps = 0.2
alpha = kl_alpha_budget(eps, n)
beta = beta_for_kl(T, alpha)
T_hat = mix_with_uniform(T, beta)
mu = exact_measure(q)
mu_hat = exact_measure(MeasureQuery(TransitionSystem(kernel=T_hat, labels=labels), safe, 0, n))
print(f"\nKL budget {alpha:.2e}; mixing weight {beta:.4f}; worst row KL {row_kl(T, T_hat).max():.2e}")
print(f"true {mu:.5f}, model {mu_hat:.5f}, gap {abs(mu - mu_hat):.5f} <= {eps / 2}")

"""Shield verdicts on a slippery grid, checked against the exact measure.

The shield imagines m futures for each proposed action with the true
dynamics, so its estimate should agree with the exact probability of
avoiding hazards over the look-ahead horizon.

Run with ``python demos/02_shield_verdicts.py``.
"""

import numpy as np

from ambs.agent import TabularSoftmaxPolicy
from ambs.envs import GridHazardEnv
from ambs.shield import Shield, ShieldConfig, exact_pair_measure
from ambs.world_model import TrueDynamicsModel

env = GridHazardEnv(slip=0.1)
mdp = env.finite_mdp()
model = TrueDynamicsModel(mdp, env.formula, env.cost_value)
task = TabularSoftmaxPolicy(mdp.n_states, 4)  # uniform random proposals
backup = TabularSoftmaxPolicy(mdp.n_states, 4)

cfg = ShieldConfig(delta=0.1, epsilon=0.05, horizon=5, lookahead=5, cost_value=env.cost_value)
print(f"m={cfg.samples} imagined traces per verdict; accept iff estimate >= {cfg.accept_level:.2f}")

exact = exact_pair_measure(mdp, task, env.formula, cfg.horizon)
rng = np.random.default_rng(0)
routes = {name: Shield(cfg, route=name) for name in ("rollout", "binomial")}
for sh in routes.values():
    sh.refresh(model, task)

names = ["N", "E", "S", "W"]
print("\ncell    action  exact   rollout  binomial  verdict")
for cell in [(2, 3), (2, 1), (5, 6), (0, 0)]:
    s = env.encode(cell, 0)
    for a in range(4):
        d_roll = routes["rollout"].decide(s, a, backup, rng)
        d_bin = routes["binomial"].decide(s, a, backup, rng)
        verdict = "override" if d_roll.overridden else "accept"
        print(f"{str(cell):6s}  {names[a]:6s}  {exact[s, a]:.3f}   {d_roll.mu_tilde:.3f}    "
              f"{d_bin.mu_tilde:.3f}     {verdict}")

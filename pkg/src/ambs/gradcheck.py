"""Central finite-difference checks of every policy-gradient operation.

The scalar objective of each op is its surrogate (coefficients held fixed),
evaluated through :func:`ambs.agent.surrogate_objective`; the check compares
the analytic gradient with central differences of that scalar.
"""

from __future__ import annotations

import numpy as np

from . import agent as ag
from .world_model import TabularModel, imagine

OPERATIONS = ("vanilla", "penl", "plpg", "copt", "safe")


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def random_problem(rng, n_states=12, n_actions=3, batch=6, horizon=5, cost_value=10.0):
    """A random finite model, imagined batch and return arrays."""
    model = TabularModel(n_states, n_actions, cost_value, smoothing=0.3)
    rec = {
        "obs": rng.integers(n_states, size=400), "actions": rng.integers(n_actions, size=400),
        "next_obs": rng.integers(n_states, size=400), "rewards": rng.normal(size=400),
        "continues": np.ones(400),
    }
    rec["costs"] = np.where(rec["next_obs"] % 4 == 0, cost_value, 0.0)
    model.partial_fit(rec)
    snap = model.snapshot()
    policy = ag.TabularSoftmaxPolicy(n_states, n_actions, rng.normal(size=(n_states, n_actions)))
    b = imagine(snap, policy, rng.integers(n_states, size=batch), horizon, rng)
    G = rng.normal(size=b.rewards.shape)
    GC = np.abs(rng.normal(size=b.rewards.shape)) * cost_value
    safe_values = np.abs(rng.normal(size=b.states.shape)) * 3
    return policy, b, G, GC, safe_values


def report_for(op, policy, batch, G, GC, safe_values, gamma=0.997, C=10.0):
    if op == "vanilla":
        return ag.grad_vanilla(batch, G, policy)
    if op == "penl":
        return ag.grad_penl(batch, G, GC, 1.0, policy)
    if op == "plpg":
        return ag.grad_plpg(batch, G, GC, 0.8, safe_values, policy)
    if op == "copt":
        return ag.grad_copt(batch, G, GC, 1.0, 10.0, gamma, batch.horizon, C, policy)
    if op == "safe":
        return ag.grad_safe(batch, GC, policy)
    raise ValueError(op)


def check_operation(op, rng, points=50, h=1e-5, n_states=12):
    """Max relative error of ``op`` over ``points`` random parameter points."""
    worst = 0.0
    for _ in range(points):
        policy, batch, G, GC, sv = random_problem(rng, n_states=n_states)
        rep = report_for(op, policy, batch, G, GC, sv)
        probe = policy.copy()

        def objective(theta):
            probe.set_params(theta)
            return ag.surrogate_objective(probe, batch, rep.coefficients)

        fd = central_difference(objective, policy.params.copy(), h)
        worst = max(worst, relative_error(rep.grad, fd))
    return worst


def check_all(rng, points=50, h=1e-5):
    return {op: check_operation(op, rng, points, h) for op in OPERATIONS}

"""Randomised instance suites for the measure-level inequalities.

Each suite returns a list of :class:`SuiteRow` (one per checked quantity)
and is deterministic given its generator.  The ``theory`` CLI subcommand and
the acceptance tests both run these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .logic import Atom, Not, TransitionSystem
from .measure import (MeasureQuery, TinyPomdp, beta_for_kl, enumerate_measure, exact_measure,
                      kl_alpha_budget, mc_estimate_batch, mix_with_uniform, row_kl,
                      sample_size_exact, validate_error_amplification, validate_pinsker,
                      validate_theorem2, validate_theorem3)

SAFE = Not(Atom("hazard"))
SUITES = ("thm1", "thm2", "thm3", "lemma", "pinsker")


@dataclass(frozen=True)
class SuiteRow:
    suite: str
    instance: int
    quantity: float
    bound: float
    passed: bool
    note: str = ""


def random_kernel(rng, S: int, sparsity: float = 0.3) -> np.ndarray:
    """Random row-stochastic matrix with some structural zeros (never a zero row)."""
    K = rng.dirichlet(np.full(S, 0.7), size=S)
    drop = rng.random((S, S)) < sparsity
    drop[np.arange(S), rng.integers(S, size=S)] = False
    K = np.where(drop, 0.0, K)
    return K / K.sum(axis=1, keepdims=True)


def random_labels(rng, S: int, anchor: int = 0, p_hazard: float = 0.25):
    hazard = rng.random(S) < p_hazard
    hazard[anchor] = False
    return tuple(frozenset({"hazard"}) if h else frozenset() for h in hazard)


def suite_thm1(rng, instances=5, repetitions=1000, epsilon=0.1, delta=0.05, max_rate=0.07):
    """Coverage of the Monte Carlo estimate with m = sample_size_exact(eps, delta)."""
    m = sample_size_exact(epsilon, delta)
    rows = []
    for i in range(instances):
        S = int(rng.integers(3, 11))
        n = int(rng.integers(2, 7))
        while S ** n > 10 ** 6:
            n -= 1
        labels = random_labels(rng, S)
        system = TransitionSystem(kernel=random_kernel(rng, S), labels=labels)
        q = MeasureQuery(system, SAFE, 0, n)
        mu = enumerate_measure(q)
        dp = exact_measure(q)
        est = mc_estimate_batch(q, m, repetitions, rng)
        rate = float(np.mean(np.abs(est - mu) > epsilon))
        agree = abs(mu - dp) <= 1e-12
        rows.append(SuiteRow("thm1", i, rate, max_rate, rate <= max_rate and agree,
                             f"S={S} n={n} m={m} mu={mu:.6f} dp_agrees={agree}"))
    return rows


def suite_thm2(rng, instances=100, epsilon=0.2, n=4):
    """|mu - mu_hat| <= eps/2 for uniform-mixing models with per-row KL at the budget."""
    alpha = kl_alpha_budget(epsilon, n)
    rows = []
    for i in range(instances):
        S = int(rng.integers(3, 9))
        T = random_kernel(rng, S)
        beta = beta_for_kl(T, alpha) * float(rng.uniform(0.5, 1.0))
        T_hat = mix_with_uniform(T, beta)
        labels = random_labels(rng, S)
        chk = validate_theorem2(T, T_hat, SAFE, labels, 0, n, epsilon)
        # literal path enumeration of both measures as an independent route
        mu = enumerate_measure(MeasureQuery(TransitionSystem(kernel=T, labels=labels), SAFE, 0, n))
        mu_hat = enumerate_measure(MeasureQuery(TransitionSystem(kernel=T_hat, labels=labels), SAFE, 0, n))
        agree = abs(abs(mu - mu_hat) - chk.quantity) <= 1e-12
        rows.append(SuiteRow("thm2", i, chk.quantity, chk.bound, chk.holds and agree,
                             f"S={S} beta={beta:.4g} maxKL={row_kl(T, T_hat).max():.3e}"))
    return rows


def _perturbed_pair(rng, S):
    T = random_kernel(rng, S, sparsity=0.0)
    noise = rng.dirichlet(np.ones(S), size=S)
    w = float(rng.uniform(0.0, 0.3))
    return T, (1 - w) * T + w * noise


def suite_lemma(rng, instances=100, t_max=8):
    """TV between t-step marginals against t sqrt(alpha/2), t = 1..t_max."""
    rows = []
    for i in range(instances):
        S = int(rng.integers(2, 9))
        T, T_hat = _perturbed_pair(rng, S)
        anchor = int(rng.integers(S))
        for t in range(1, t_max + 1):
            chk = validate_error_amplification(T, T_hat, t, anchor)
            rows.append(SuiteRow("lemma", i, chk.quantity, chk.bound, chk.holds, f"S={S} t={t}"))
    return rows


def suite_pinsker(rng, instances=100):
    rows = []
    for i in range(instances):
        S = int(rng.integers(2, 9))
        T, T_hat = _perturbed_pair(rng, S)
        for s in range(S):
            chk = validate_pinsker(T[s], T_hat[s])
            rows.append(SuiteRow("pinsker", i, chk.quantity, chk.bound, chk.holds, f"S={S} row={s}"))
    return rows


def random_pomdp(rng):
    S = int(rng.integers(2, 5))
    A = int(rng.integers(1, 3))
    n_obs = int(rng.integers(1, 4))
    P = rng.dirichlet(np.full(S, 0.8), size=(S, A))
    O = rng.dirichlet(np.full(n_obs, 0.8), size=S)
    init = rng.dirichlet(np.ones(S))
    noise = rng.dirichlet(np.ones(S), size=(S, A))
    w = float(rng.uniform(0.0, 0.4))
    P_hat = (1 - w) * P + w * noise
    logits = rng.normal(size=(S, A))

    def policy(belief):
        z = belief @ logits
        e = np.exp(z - z.max())
        return e / e.sum()

    return TinyPomdp(P, O, init), P_hat, policy


def suite_thm3(rng, instances=100, horizon=3):
    """State-level divergence at most the belief-level divergence (KL and TV)."""
    rows = []
    for i in range(instances):
        pomdp, P_hat, policy = random_pomdp(rng)
        for f in ("KL", "TV"):
            checks = validate_theorem3(pomdp, P_hat, policy, f, horizon)
            worst = max(checks, key=lambda c: c.quantity - c.bound if math.isfinite(c.bound) else -math.inf)
            ok = all(c.holds for c in checks)
            rows.append(SuiteRow("thm3", i, worst.quantity, worst.bound, ok,
                                 f"{f} beliefs={len(checks)}"))
    return rows


def run_suite(name: str, rng, instances: int | None = None):
    runners = {"thm1": suite_thm1, "thm2": suite_thm2, "thm3": suite_thm3,
               "lemma": suite_lemma, "pinsker": suite_pinsker}
    names = SUITES if name == "all" else (name,)
    rows = []
    for n in names:
        kwargs = {} if instances is None else {"instances": instances}
        rows.extend(runners[n](rng, **kwargs))
    return rows

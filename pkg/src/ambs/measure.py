"""Bounded-safety measures, sample-size bounds and divergence checks.

The measure of a query ``(T, Psi, s, n)`` is the probability that a path
``s_0 = s, s_1, .., s_n`` drawn from ``T`` satisfies ``Psi`` at every
position, the anchor included.  Two exact routes are provided (backward
DP and literal path enumeration) so that each can check the other, plus
the Monte Carlo estimator whose sample size the Hoeffding bounds govern.

The ``validate_*`` functions compute both sides of the inequalities used
to justify estimating the measure in a learned model and return a
:class:`BoundCheck`; they raise :class:`PreconditionError` when the
hypothesis of the inequality does not hold for the given instance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigurationError, PreconditionError
from .logic import Formula, TransitionSystem, formula_mask

MAX_EXACT_STATES = 64
MAX_EXACT_HORIZON = 12
MAX_ENUMERATED_PATHS = 10 ** 6
BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class MeasureQuery:
    system: TransitionSystem
    formula: Formula
    anchor: int
    horizon: int

    def __post_init__(self):
        if self.horizon < 0:
            raise PreconditionError("horizon must be >= 0")

    def safe_mask(self) -> np.ndarray:
        if self.system.labels is None:
            raise PreconditionError("transition system carries no labels")
        return formula_mask(self.system.labels, self.formula)


@dataclass(frozen=True)
class EstimatorSpec:
    epsilon: float
    delta: float
    samples: int | None = None
    mode: str = "exact-system"

    def __post_init__(self):
        _check_unit(self.epsilon, "epsilon")
        _check_unit(self.delta, "delta")
        if self.mode not in ("exact-system", "approximate-system"):
            raise ConfigurationError(f"unknown estimator mode {self.mode!r}")
        if self.samples is None:
            object.__setattr__(self, "samples", self.required_samples)
        elif self.samples < self.required_samples:
            raise ConfigurationError(
                f"m={self.samples} is below the bound {self.required_samples} for this mode"
            )

    @property
    def required_samples(self) -> int:
        if self.mode == "exact-system":
            return sample_size_exact(self.epsilon, self.delta)
        return sample_size_approx(self.epsilon, self.delta)


def _check_unit(x, name):
    if not 0.0 < x < 1.0:
        raise ConfigurationError(f"{name} must lie in (0, 1), got {x}")


def _guard(system: TransitionSystem, n: int):
    if not system.finite:
        raise PreconditionError("exact measure needs a finite transition system")
    if system.n_states > MAX_EXACT_STATES or n > MAX_EXACT_HORIZON:
        raise PreconditionError(
            f"exact measure limited to |S| <= {MAX_EXACT_STATES}, n <= {MAX_EXACT_HORIZON}"
        )


def safety_values(kernel: np.ndarray, safe: np.ndarray, n: int) -> np.ndarray:
    """v_n(s) for every state: v_0 = 1[safe], v_k = 1[safe] * T v_{k-1}."""
    safe = safe.astype(float)
    v = safe.copy()
    for _ in range(n):
        v = safe * (kernel @ v)
    return v


def exact_measure(q: MeasureQuery) -> float:
    _guard(q.system, q.horizon)
    return float(safety_values(q.system.kernel, q.safe_mask(), q.horizon)[q.anchor])


def enumerate_measure(q: MeasureQuery) -> float:
    """Sum of path probabilities over all safe length-n paths (literal oracle)."""
    if not q.system.finite:
        raise PreconditionError("path enumeration needs a finite transition system")
    S, n = q.system.n_states, q.horizon
    if S ** n > MAX_ENUMERATED_PATHS:
        raise PreconditionError(f"|S|^n = {S ** n} paths exceeds the enumeration limit")
    safe = q.safe_mask()
    if not safe[q.anchor]:
        return 0.0
    kernel = q.system.kernel
    total = 0.0
    for path in itertools.product(np.flatnonzero(safe), repeat=n):
        prob, prev = 1.0, q.anchor
        for s in path:
            prob *= kernel[prev, s]
            if prob == 0.0:
                break
            prev = s
        total += prob
    return total


def mc_estimate(q: MeasureQuery, spec: EstimatorSpec | int, rng: np.random.Generator) -> float:
    """Fraction of ``m`` sampled paths that stay safe through position n."""
    m = spec if isinstance(spec, (int, np.integer)) else spec.samples
    if m <= 0:
        raise ConfigurationError("need at least one sampled trace")
    paths = q.system.sample_paths(q.anchor, q.horizon, int(m), rng)
    return float(_path_safety(q, paths).mean())


def mc_estimate_batch(q: MeasureQuery, m: int, repetitions: int, rng) -> np.ndarray:
    """``repetitions`` independent estimates with ``m`` paths each."""
    if m <= 0:
        raise ConfigurationError("need at least one sampled trace")
    paths = q.system.sample_paths(q.anchor, q.horizon, int(m) * repetitions, rng)
    return _path_safety(q, paths).reshape(repetitions, m).mean(axis=1)


def _path_safety(q, paths):
    if q.system.finite:
        return q.safe_mask()[paths].all(axis=1)
    return np.asarray(q.system.labels(paths, q.formula)).all(axis=1)


def sample_size_exact(epsilon: float, delta: float) -> int:
    """Hoeffding bound for sampling the true system: ceil(ln(2/delta) / (2 eps^2))."""
    _check_unit(epsilon, "epsilon")
    _check_unit(delta, "delta")
    return math.ceil(math.log(2.0 / delta) / (2.0 * epsilon ** 2))


def sample_size_approx(epsilon: float, delta: float) -> int:
    """Bound for sampling a KL-close model: ceil(2 ln(2/delta) / eps^2)."""
    _check_unit(epsilon, "epsilon")
    _check_unit(delta, "delta")
    return math.ceil(2.0 * math.log(2.0 / delta) / epsilon ** 2)


def kl_alpha_budget(epsilon: float, n: int) -> float:
    """Largest per-state KL for which the model measure is within eps/2."""
    _check_unit(epsilon, "epsilon")
    if n < 1:
        raise PreconditionError("horizon must be >= 1")
    return epsilon ** 2 / (2.0 * n ** 2)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; +inf when p puts mass where q has none."""
    p, q = _pair(p, q)
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tv_distance(p, q) -> float:
    p, q = _pair(p, q)
    return 0.5 * float(np.abs(p - q).sum())


def divergences(p, q) -> tuple[float, float]:
    return kl_divergence(p, q), tv_distance(p, q)


def _pair(p, q):
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise PreconditionError(f"support mismatch: {p.shape} vs {q.shape}")
    return p, q


def row_kl(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Per-row KL(P[s] || Q[s]) with +inf where absolute continuity fails."""
    P, Q = np.asarray(P, float), np.asarray(Q, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(P / Q), 0.0)
    out = terms.sum(axis=-1)
    bad = ((P > 0) & (Q == 0)).any(axis=-1)
    return np.where(bad, np.inf, out)


def mix_with_uniform(T: np.ndarray, beta: float) -> np.ndarray:
    """(1 - beta) T + beta U, row-wise."""
    T = np.asarray(T, float)
    return (1.0 - beta) * T + beta / T.shape[-1]


def mixture_row_kl(T: np.ndarray, beta: float) -> np.ndarray:
    """Closed form of KL(T[s] || (1-beta) T[s] + beta/S) per row."""
    T = np.asarray(T, float)
    S = T.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(T > 0, T * (np.log(T) - np.log((1 - beta) * T + beta / S)), 0.0)
    return terms.sum(axis=-1)


def beta_for_kl(T: np.ndarray, alpha: float) -> float:
    """Largest mixing weight whose max-row KL does not exceed ``alpha``."""
    def excess(beta):
        return mixture_row_kl(T, beta).max() - alpha
    if excess(1.0) <= 0:
        return 1.0
    beta = brentq(excess, 0.0, 1.0, xtol=1e-14)
    # brentq may land a hair above the root
    while excess(beta) > 0:
        beta = np.nextafter(beta, 0.0)
    return float(beta)


class BoundCheck(NamedTuple):
    quantity: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.quantity <= self.bound + BOUND_SLACK


def _anchor_distribution(anchor, S):
    if np.ndim(anchor) == 0:
        d = np.zeros(S)
        d[int(anchor)] = 1.0
        return d
    return np.asarray(anchor, float)


def marginals(T: np.ndarray, anchor, t: int) -> np.ndarray:
    d = _anchor_distribution(anchor, T.shape[0])
    for _ in range(t):
        d = d @ T
    return d


def validate_error_amplification(T, T_hat, t: int, anchor=0, alpha: float | None = None) -> BoundCheck:
    """TV between time-t marginals against t * sqrt(alpha / 2).

    ``alpha`` defaults to the largest per-row KL of the pair; an explicit
    ``alpha`` must dominate every row.
    """
    T, T_hat = np.asarray(T, float), np.asarray(T_hat, float)
    kl = row_kl(T, T_hat).max()
    if alpha is None:
        alpha = kl
    elif kl > alpha + BOUND_SLACK:
        raise PreconditionError(f"max row KL {kl:.3e} exceeds alpha={alpha:.3e}")
    if not math.isfinite(alpha):
        raise PreconditionError("per-row KL is infinite")
    lhs = tv_distance(marginals(T, anchor, t), marginals(T_hat, anchor, t))
    return BoundCheck(lhs, t * math.sqrt(alpha / 2.0))


def validate_pinsker(p, q) -> BoundCheck:
    kl, tv = divergences(p, q)
    return BoundCheck(tv, math.sqrt(kl / 2.0))


def validate_theorem2(T, T_hat, formula: Formula, labels, anchor: int, n: int,
                      epsilon: float) -> BoundCheck:
    """|mu - mu_hat| (both exact) against epsilon / 2.

    Requires every per-row KL(T || T_hat) to be at most eps^2 / (2 n^2).
    """
    alpha = kl_alpha_budget(epsilon, n)
    kl = row_kl(T, T_hat).max()
    if kl > alpha + BOUND_SLACK:
        raise PreconditionError(f"max row KL {kl:.3e} exceeds budget {alpha:.3e}")
    mu = exact_measure(MeasureQuery(TransitionSystem(kernel=T, labels=labels), formula, anchor, n))
    mu_hat = exact_measure(MeasureQuery(
        TransitionSystem(kernel=T_hat, labels=labels, origin="model"), formula, anchor, n))
    return BoundCheck(abs(mu - mu_hat), epsilon / 2.0)


def certified_epsilon(alpha: float, n: int) -> float:
    """Smallest eps certified by a per-row KL of ``alpha`` at horizon n."""
    return math.sqrt(2.0 * alpha) * n


# --- partial observability -------------------------------------------------

@dataclass(frozen=True)
class TinyPomdp:
    """Enumerable POMDP: ``transition[s, a, s']``, ``observation[s, o]``."""

    transition: np.ndarray
    observation: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        P, O = np.asarray(self.transition, float), np.asarray(self.observation, float)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "observation", O)
        object.__setattr__(self, "initial", np.asarray(self.initial, float))
        S, A, _ = P.shape
        if S > 4 or O.shape[1] > 3:
            raise PreconditionError("enumeration guard: at most 4 states and 3 observations")
        if not np.allclose(P.sum(-1), 1) or not np.allclose(O.sum(-1), 1):
            raise ConfigurationError("transition and observation rows must sum to 1")


def _belief_key(b: np.ndarray):
    return tuple(np.round(b, 12))


def _belief_law(pomdp, transition, belief, action_probs):
    """Distribution over next beliefs (exact filter of ``transition``)."""
    law = {}
    O = pomdp.observation
    for a, pa in enumerate(action_probs):
        if pa == 0:
            continue
        pred = belief @ transition[:, a, :]
        for o in range(O.shape[1]):
            joint = pred * O[:, o]
            mass = joint.sum()
            if mass <= 0:
                continue
            key = _belief_key(joint / mass)
            law[key] = law.get(key, 0.0) + pa * mass
    return law


def _reachable_beliefs(pomdp, policy, horizon):
    beliefs, frontier = [], [pomdp.initial]
    for _ in range(horizon):
        beliefs.extend(frontier)
        nxt = []
        for b in frontier:
            for key in _belief_law(pomdp, pomdp.transition, b, policy(b)):
                nxt.append(np.array(key))
        frontier = nxt
    return beliefs


def _fdiv(kind, p, q):
    return kl_divergence(p, q) if kind == "KL" else tv_distance(p, q)


def validate_theorem3(pomdp: TinyPomdp, approx_transition, policy, f: str = "KL",
                      horizon: int = 3) -> list[BoundCheck]:
    """State-level against belief-level divergence at every reachable belief.

    ``policy(belief)`` returns action probabilities.  Beliefs are the exact
    filtering distributions of each system, so the law of the next belief
    is a distribution over probability vectors and ``s'`` given ``b'`` is
    ``b'`` itself under either system.  Returns one check per belief
    reachable within ``horizon`` steps (of the true system).
    """
    if f not in ("KL", "TV"):
        raise ConfigurationError(f"unknown divergence {f!r}")
    if horizon > 4:
        raise PreconditionError("enumeration guard: horizon <= 4")
    approx_transition = np.asarray(approx_transition, float)
    checks = []
    for b in _reachable_beliefs(pomdp, policy, horizon):
        pi = np.asarray(policy(b), float)
        state_true = np.einsum("a,s,sat->t", pi, b, pomdp.transition)
        state_model = np.einsum("a,s,sat->t", pi, b, approx_transition)
        law_true = _belief_law(pomdp, pomdp.transition, b, pi)
        law_model = _belief_law(pomdp, approx_transition, b, pi)
        keys = sorted(set(law_true) | set(law_model))
        p = np.array([law_true.get(k, 0.0) for k in keys])
        q = np.array([law_model.get(k, 0.0) for k in keys])
        checks.append(BoundCheck(_fdiv(f, state_true, state_model), _fdiv(f, p, q)))
    return checks

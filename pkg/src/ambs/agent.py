"""Policies, critics, TD(lambda) targets and the policy-gradient family.

Gradient operations work on batches of imagined traces laid out as in
:mod:`ambs.world_model`: ``states`` (B, H+1), ``actions`` (B, H) and
per-timestep return arrays ``G`` / ``GC`` of shape (B, H) aligned with the
actions.  Each op returns the ascent direction of the surrogate

    sum_b w_b sum_t coef[b, t] * log pi(a[b, t] | s[b, t])

with the coefficients held constant (stop-gradient), so a trainer applies
``params += lr * report.grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, PreconditionError

PLPG_CLAMP_MAX = 10.0


# --- policies ---------------------------------------------------------------

class TabularSoftmaxPolicy:
    """Per-state logits over a finite action set."""

    discrete = True

    def __init__(self, n_states: int, n_actions: int, logits=None, name="policy"):
        self.n_states, self.n_actions = n_states, n_actions
        self.logits = np.zeros((n_states, n_actions)) if logits is None else np.array(logits, float)
        if self.logits.shape != (n_states, n_actions):
            raise ConfigurationError("logits shape does not match (S, A)")
        self.name = name
        self._table = None

    @property
    def params(self) -> np.ndarray:
        return self.logits.reshape(-1)

    def set_params(self, flat):
        self.logits = np.asarray(flat, float).reshape(self.n_states, self.n_actions).copy()
        self._table = None

    def _tables(self):
        # probabilities and cdf for the current logits, rebuilt after set_params
        if self._table is None:
            z = self.logits - self.logits.max(axis=-1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=-1, keepdims=True)
            self._table = (p, np.cumsum(p, axis=-1))
        return self._table

    def copy(self):
        return TabularSoftmaxPolicy(self.n_states, self.n_actions, self.logits.copy(), self.name)

    def probs(self, states=None) -> np.ndarray:
        p = self._tables()[0]
        return p.copy() if states is None else p[states]

    def sample(self, states, rng):
        cdf = self._tables()[1][np.asarray(states)]
        u = rng.random(cdf.shape[:-1] + (1,))
        a = np.minimum((cdf < u).sum(axis=-1), self.n_actions - 1)
        return a, a

    def raw_from_action(self, a):
        return a

    def log_prob(self, states, actions):
        z = self.logits[states]
        m = z.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
        return np.take_along_axis(z, np.asarray(actions)[..., None], axis=-1)[..., 0] - lse

    def score_gradient(self, states, actions, coef) -> np.ndarray:
        """sum coef * grad log pi(a|s) as a flat vector (onehot(a) - pi(s))."""
        s = np.asarray(states).reshape(-1)
        a = np.asarray(actions).reshape(-1)
        c = np.asarray(coef, float).reshape(-1)
        g = np.zeros_like(self.logits)
        np.add.at(g, (s, a), c)
        np.add.at(g, s, -c[:, None] * self.probs(s))
        return g.reshape(-1)

    def entropy_gradient(self, states, weight) -> np.ndarray:
        """Gradient of sum_s weight * H(pi(.|s)) w.r.t. the logits."""
        s = np.asarray(states).reshape(-1)
        p = self.probs(s)
        logp = np.log(np.maximum(p, 1e-300))
        h = -(p * logp).sum(axis=-1, keepdims=True)
        g = np.zeros_like(self.logits)
        np.add.at(g, s, -weight * p * (logp + h))
        return g.reshape(-1)

    def to_dict(self):
        return {"kind": "tabular-softmax", "name": self.name, "logits": self.logits.tolist()}


LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0


class GaussianLinearPolicy:
    """u ~ N(phi(s) W, diag(exp(log_std))^2), action a = tanh(u).

    The log-density includes the tanh change-of-variables term, which has no
    parameter dependence given u, so gradients are taken in u-space.
    """

    discrete = False

    def __init__(self, features, action_dim: int, weights=None, log_std=None, name="policy"):
        self.features = features
        self.action_dim = action_dim
        self.weights = np.zeros((features.size, action_dim)) if weights is None else np.array(weights, float)
        self.log_std = np.full(action_dim, -0.5) if log_std is None else np.array(log_std, float)
        self.name = name

    @property
    def params(self):
        return np.concatenate([self.weights.reshape(-1), self.log_std])

    def set_params(self, flat):
        flat = np.asarray(flat, float)
        k = self.weights.size
        self.weights = flat[:k].reshape(self.weights.shape).copy()
        self.log_std = np.clip(flat[k:], LOG_STD_MIN, LOG_STD_MAX)

    def copy(self):
        return GaussianLinearPolicy(self.features, self.action_dim, self.weights.copy(),
                                    self.log_std.copy(), self.name)

    def mean(self, states):
        return self.features(states) @ self.weights

    def sample(self, states, rng):
        mu = self.mean(states)
        u = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return np.tanh(u), u

    def raw_from_action(self, a):
        return np.arctanh(np.clip(a, -1 + 1e-9, 1 - 1e-9))

    def log_prob(self, states, raw):
        mu = self.mean(states)
        std = np.exp(self.log_std)
        z = (raw - mu) / std
        gauss = -0.5 * z ** 2 - self.log_std - 0.5 * math.log(2 * math.pi)
        squash = np.log(np.maximum(1 - np.tanh(raw) ** 2, 1e-12))
        return (gauss - squash).sum(axis=-1)

    def score_gradient(self, states, raw, coef):
        phi = self.features(states).reshape(-1, self.features.size)
        u = np.asarray(raw, float).reshape(-1, self.action_dim)
        c = np.asarray(coef, float).reshape(-1)
        mu = phi @ self.weights
        var = np.exp(2 * self.log_std)
        gw = phi.T @ (c[:, None] * (u - mu) / var)
        gs = (c[:, None] * ((u - mu) ** 2 / var - 1.0)).sum(axis=0)
        return np.concatenate([gw.reshape(-1), gs])

    def entropy_gradient(self, states, weight):
        # Gaussian entropy depends only on log_std
        n = np.size(states) // max(np.shape(states)[-1], 1)
        out = np.zeros(self.weights.size + self.action_dim)
        out[self.weights.size:] = weight * n
        return out

    def to_dict(self):
        return {"kind": "gaussian-linear", "name": self.name, "weights": self.weights.tolist(),
                "log_std": self.log_std.tolist(), "features": self.features.to_dict()}


def clip_by_norm(grad, max_norm):
    """Rescale ``grad`` so its Euclidean norm is at most ``max_norm`` (None disables)."""
    if max_norm is None:
        return grad, False
    norm = float(np.linalg.norm(grad))
    if norm <= max_norm:
        return grad, False
    return grad * (max_norm / norm), True


def policy_from_dict(d, features=None):
    if d["kind"] == "tabular-softmax":
        logits = np.array(d["logits"])
        return TabularSoftmaxPolicy(*logits.shape, logits=logits, name=d["name"])
    if d["kind"] == "gaussian-linear":
        from .world_model import RbfFeatures

        feats = features or RbfFeatures.from_dict(d["features"])
        w = np.array(d["weights"])
        return GaussianLinearPolicy(feats, w.shape[1], w, d["log_std"], d["name"])
    raise ConfigurationError(f"unknown policy kind {d['kind']!r}")


# --- critics ----------------------------------------------------------------

class TabularCritic:
    """State values with a slow target copy (Polyak fraction ``target_fraction``)."""

    def __init__(self, n_states, lr=0.1, target_fraction=0.02, init=None):
        self.values = np.zeros(n_states) if init is None else np.array(init, float)
        self.target = self.values.copy()
        self.lr, self.target_fraction = lr, target_fraction

    def value(self, states, target=False):
        return (self.target if target else self.values)[states]

    def update(self, states, targets):
        s = np.asarray(states).reshape(-1)
        y = np.asarray(targets, float).reshape(-1)
        err = np.zeros_like(self.values)
        cnt = np.zeros_like(self.values)
        np.add.at(err, s, y - self.values[s])
        np.add.at(cnt, s, 1.0)
        seen = cnt > 0
        self.values[seen] += self.lr * err[seen] / cnt[seen]
        self.soft_update()

    def soft_update(self):
        self.target += self.target_fraction * (self.values - self.target)

    def to_dict(self):
        return {"kind": "tabular", "values": self.values.tolist(), "target": self.target.tolist(),
                "lr": self.lr, "target_fraction": self.target_fraction}

    @classmethod
    def from_dict(cls, d):
        c = cls(len(d["values"]), d["lr"], d["target_fraction"], d["values"])
        c.target = np.array(d["target"])
        return c


class LinearCritic:
    """Linear value on features with SGD on squared error."""

    def __init__(self, features, lr=0.05, target_fraction=0.02, init=None):
        self.features = features
        self.weights = np.zeros(features.size) if init is None else np.array(init, float)
        self.target = self.weights.copy()
        self.lr, self.target_fraction = lr, target_fraction

    def value(self, states, target=False):
        return self.features(states) @ (self.target if target else self.weights)

    def update(self, states, targets):
        phi = self.features(states).reshape(-1, self.features.size)
        y = np.asarray(targets, float).reshape(-1)
        err = y - phi @ self.weights
        self.weights += self.lr * phi.T @ err / len(y)
        self.soft_update()

    def soft_update(self):
        self.target += self.target_fraction * (self.weights - self.target)

    def to_dict(self):
        return {"kind": "linear", "weights": self.weights.tolist(), "target": self.target.tolist(),
                "lr": self.lr, "target_fraction": self.target_fraction}

    @classmethod
    def from_dict(cls, d, features):
        c = cls(features, d["lr"], d["target_fraction"], d["weights"])
        c.target = np.array(d["target"])
        return c


@dataclass
class TwinSafetyCritic:
    """Two cost critics; downstream bootstraps use the elementwise minimum."""

    first: object
    second: object

    def value(self, states, target=True):
        return np.minimum(self.first.value(states, target), self.second.value(states, target))

    def update(self, states, targets):
        self.first.update(states, targets)
        self.second.update(states, targets)

    def to_dict(self):
        return {"first": self.first.to_dict(), "second": self.second.to_dict()}


def critic_from_dict(d, features=None):
    if d["kind"] == "tabular":
        return TabularCritic.from_dict(d)
    return LinearCritic.from_dict(d, features)


# --- returns ------------------------------------------------------------------

def td_lambda(rewards, values, gamma: float, lam: float, continues=None) -> np.ndarray:
    """TD(lambda) targets along the last axis.

    ``rewards`` has length H (reward of the transition out of s_t) and
    ``values`` length H+1.  R(s_H) = V(s_H) and, for t < H,
    R(s_t) = r_t + g_t ((1 - lam) V(s_{t+1}) + lam R(s_{t+1})) with
    g_t = gamma * continues[t+1].
    """
    r = np.asarray(rewards, float)
    v = np.asarray(values, float)
    if v.shape[:-1] != r.shape[:-1] or v.shape[-1] != r.shape[-1] + 1:
        raise PreconditionError(f"values {v.shape} must be rewards {r.shape} plus one step")
    g = gamma * (np.ones_like(v) if continues is None else np.asarray(continues, float))
    out = np.empty_like(v)
    out[..., -1] = v[..., -1]
    for t in range(r.shape[-1] - 1, -1, -1):
        out[..., t] = r[..., t] + g[..., t + 1] * ((1 - lam) * v[..., t + 1] + lam * out[..., t + 1])
    return out


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Monte Carlo returns G_t = sum_{i>=t} gamma^{i-t} r_i along the last axis."""
    r = np.asarray(rewards, float)
    out = np.empty_like(r)
    acc = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        acc = r[..., t] + gamma * acc
        out[..., t] = acc
    return out


# --- gradients ------------------------------------------------------------------

@dataclass
class GradientReport:
    grad: np.ndarray
    coefficients: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise FloatingPointError("non-finite gradient entries")


def _weights(batch_size, weights):
    if weights is None:
        return np.full(batch_size, 1.0 / batch_size)
    w = np.asarray(weights, float)
    if w.shape != (batch_size,):
        raise PreconditionError("need one weight per trace")
    return w


def _policy_inputs(batch):
    states = batch.states[:, :-1]
    actions = batch.raw_actions if batch.raw_actions is not None else batch.actions
    return states, actions


def _report(batch, coef, policy, weights, **diag):
    coef = np.asarray(coef, float)
    if coef.shape != batch.rewards.shape:
        raise PreconditionError(f"coefficients {coef.shape} do not align with actions {batch.rewards.shape}")
    w = _weights(coef.shape[0], weights)
    states, actions = _policy_inputs(batch)
    grad = policy.score_gradient(states, actions, coef * w[:, None])
    diag.setdefault("mean_coefficient", float(coef.mean()))
    return GradientReport(grad, coef, diag)


def surrogate_objective(policy, batch, coefficients, weights=None) -> float:
    """Scalar whose parameter gradient every gradient op returns."""
    coef = np.asarray(coefficients, float)
    w = _weights(coef.shape[0], weights)
    states, actions = _policy_inputs(batch)
    return float((w[:, None] * coef * policy.log_prob(states, actions)).sum())


def grad_vanilla(batch, G, policy, weights=None) -> GradientReport:
    return _report(batch, G, policy, weights)


def grad_penl(batch, G, GC, alpha: float, policy, weights=None) -> GradientReport:
    if alpha < 0:
        raise ConfigurationError("penalty coefficient must be nonnegative")
    return _report(batch, np.asarray(G) - alpha * np.asarray(GC), policy, weights)


def plpg_delta(costs, safe_values) -> np.ndarray:
    """delta_t = -c_{t+1} + V_safe(s_t) - V_safe(s_{t+1}), nonnegative costs.

    ``costs`` and ``safe_values`` are per-state arrays of length H+1; the cost
    paid by action a_t is that of its arrival state.
    """
    c = np.asarray(costs, float)
    v = np.asarray(safe_values, float)
    return -c[..., 1:] + v[..., :-1] - v[..., 1:]


def grad_plpg(batch, G, GC, alpha: float, safe_values, policy, weights=None,
              clamp_max: float = PLPG_CLAMP_MAX) -> GradientReport:
    """``safe_values`` is V_C of the backup policy at every state of the batch (B, H+1)."""
    if alpha < 0:
        raise ConfigurationError("penalty coefficient must be nonnegative")
    delta = plpg_delta(batch.costs, safe_values)
    raw = np.exp(np.minimum(delta, 50.0))
    hits = int(np.count_nonzero(raw > clamp_max))
    mult = np.clip(raw, 0.0, clamp_max)
    coef = mult * np.asarray(G) - alpha * np.asarray(GC)
    return _report(batch, coef, policy, weights, clamp_hits=hits, mean_multiplier=float(mult.mean()))


def copt_center(gamma: float, T: int, C: float) -> float:
    return C * gamma ** (T - 1)


def copt_weight(x, kappa: float, gamma: float, T: int, C: float):
    """Logistic weight centred at gamma^(T-1) C with scale kappa."""
    if not kappa > 0:
        raise ConfigurationError("sigmoid scale must be positive")
    z = (np.asarray(x, float) - copt_center(gamma, T, C)) / kappa
    out = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(out) if np.ndim(out) == 0 else out


def suffix_costs(costs, gamma: float) -> np.ndarray:
    """cost(s_t) = sum_{i=t}^{H} gamma^(i-t-1) c_i over per-state costs (length H+1).

    The i = t term carries gamma^-1, exactly as the weighting is written.
    """
    c = np.asarray(costs, float)
    acc = np.zeros(c.shape[:-1])
    out = np.empty_like(c)
    for t in range(c.shape[-1] - 1, -1, -1):
        acc = c[..., t] / gamma + gamma * acc
        out[..., t] = acc
    return out


def grad_copt(batch, G, GC, alpha: float, kappa: float, gamma: float, T: int, C: float,
              policy, weights=None) -> GradientReport:
    if alpha < 0:
        raise ConfigurationError("penalty coefficient must be nonnegative")
    x = suffix_costs(batch.costs, gamma)[..., :-1]
    W = copt_weight(x, kappa, gamma, T, C)
    coef = (1.0 - W) * np.asarray(G) - alpha * np.asarray(GC)
    return _report(batch, coef, policy, weights, mean_weight=float(np.mean(W)),
                   counter_examples=int(np.count_nonzero(x >= copt_center(gamma, T, C))))


def grad_safe(batch, GC, safe_policy, weights=None) -> GradientReport:
    """Ascent direction of -E[sum GC log pi_safe], i.e. descent on expected cost."""
    return _report(batch, -np.asarray(GC, float), safe_policy, weights)


# --- augmented Lagrangian ----------------------------------------------------------

@dataclass(frozen=True)
class LagrangianState:
    lam: float = 0.01
    mu: float = 5e-9
    sigma: float = 1e-6
    threshold: float = 1.0
    mu_rule: str = "monotone"
    mu_cap: float = 1e6

    def __post_init__(self):
        if self.lam < 0 or not self.mu > 0:
            raise ConfigurationError("need lambda >= 0 and mu > 0")
        if self.mu_rule not in ("monotone", "literal"):
            raise ConfigurationError(f"unknown mu rule {self.mu_rule!r}")


def next_mu(state: LagrangianState) -> float:
    grown = state.mu ** (1.0 + state.sigma)
    if state.mu_rule == "literal":
        return max(grown, 1.0)
    return max(state.mu, min(state.mu_cap, max(grown, state.mu)))


def lagrangian_step(state: LagrangianState, cost_estimate: float):
    """Penalty value and updated multipliers for a cost estimate J_C."""
    g = cost_estimate - state.threshold
    if state.lam + state.mu * g >= 0:
        psi = state.lam * g + 0.5 * state.mu * g * g
        lam = state.lam + state.mu * g
    else:
        psi = -state.lam ** 2 / (2 * state.mu)
        lam = 0.0
    return psi, replace(state, lam=lam, mu=next_mu(state))


def lagrangian_penalty_slope(state: LagrangianState, cost_estimate: float) -> float:
    """d Psi / d J_C, the effective cost weight in the policy gradient."""
    return max(0.0, state.lam + state.mu * (cost_estimate - state.threshold))

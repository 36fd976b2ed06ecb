"""Learned dynamics with reward/cost/continuation heads, and imagination.

Models accumulate statistics (``partial_fit``) and hand out immutable
snapshots; imagination and the shield only ever see snapshots.  A snapshot
exposes ``sample_next(states, actions, rng)``, ``reward(states, actions)``,
``cost(states)`` (values in {0, C}) and ``continues(states)``.

Imagined batches use the layout

* ``states[:, t]``    for t = 0..H   (t = 0 is the start state)
* ``actions[:, t]``   for t = 0..H-1
* ``rewards[:, t]``   reward for the transition out of ``states[:, t]``
* ``costs[:, t]``     cost of ``states[:, t]``
* ``continues[:, t]`` continuation flag of ``states[:, t]``
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._sampling import RowSampler
from .errors import ConfigurationError, PreconditionError
from .logic import LabelledMdp, Trace, formula_mask, policy_matrix
from .measure import row_kl

MODEL_SCHEMA = "model-v1"


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions <o, a, r, c, gamma, o'>."""

    def __init__(self, capacity: int, obs_shape=(), action_shape=(), discrete=True):
        if capacity <= 0:
            raise ConfigurationError("replay capacity must be positive")
        self.capacity = int(capacity)
        obs_dtype = np.int64 if discrete else float
        act_dtype = np.int64 if discrete else float
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=obs_dtype)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros((capacity,) + tuple(action_shape), dtype=act_dtype)
        self.rewards = np.zeros(capacity)
        self.costs = np.zeros(capacity)
        self.continues = np.ones(capacity)
        self.size = 0
        self.head = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, cost, cont, next_obs):
        i = self.head
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.costs[i] = cost
        self.continues[i] = cont
        self.next_obs[i] = next_obs
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def _order(self):
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.head + np.arange(self.capacity)) % self.capacity

    def records(self, since: int = 0) -> dict:
        """Transitions in insertion order; ``since`` skips the oldest entries
        by global insertion count (those already seen by an incremental fit)."""
        order = self._order()
        first = self.total_added - self.size
        order = order[max(since - first, 0):]
        return {k: getattr(self, k)[order] for k in
                ("obs", "actions", "rewards", "costs", "continues", "next_obs")}

    def sample_obs(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            raise PreconditionError("replay buffer is empty")
        return self.obs[rng.integers(self.size, size=n)]

    @property
    def evicted(self) -> bool:
        return self.total_added > self.capacity


# --- tabular ----------------------------------------------------------------

class TabularModel:
    """Dirichlet-smoothed count model over a finite state/action space."""

    def __init__(self, n_states: int, n_actions: int, cost_value: float,
                 smoothing: float = 0.5):
        if smoothing <= 0:
            raise ConfigurationError("smoothing pseudo-count must be positive")
        if cost_value <= 0:
            raise ConfigurationError("cost value must be positive")
        self.n_states, self.n_actions = n_states, n_actions
        self.smoothing = float(smoothing)
        self.cost_value = float(cost_value)
        self.reset()

    def reset(self):
        S, A = self.n_states, self.n_actions
        self.counts = np.zeros((S, A, S))
        self.reward_sum = np.zeros((S, A))
        self.violation_sum = np.zeros(S)
        self.continue_sum = np.zeros(S)
        self.state_visits = np.zeros(S)
        self.seen = 0

    def partial_fit(self, rec: dict):
        s = np.asarray(rec["obs"], dtype=np.int64)
        a = np.asarray(rec["actions"], dtype=np.int64)
        s2 = np.asarray(rec["next_obs"], dtype=np.int64)
        np.add.at(self.counts, (s, a, s2), 1.0)
        np.add.at(self.reward_sum, (s, a), rec["rewards"])
        np.add.at(self.violation_sum, s2, (np.asarray(rec["costs"]) > 0).astype(float))
        np.add.at(self.continue_sum, s2, rec["continues"])
        np.add.at(self.state_visits, s2, 1.0)
        self.seen += len(s)
        return self

    def snapshot(self) -> "TabularSnapshot":
        visits = self.counts.sum(axis=2)
        P = (self.counts + self.smoothing) / (visits + self.smoothing * self.n_states)[..., None]
        with np.errstate(invalid="ignore", divide="ignore"):
            reward = np.where(visits > 0, self.reward_sum / visits, 0.0)
            violation = np.where(self.state_visits > 0, self.violation_sum / self.state_visits, 0.0)
            cont = np.where(self.state_visits > 0, self.continue_sum / self.state_visits, 1.0)
        return TabularSnapshot(P, reward, violation, cont, self.cost_value)

    def to_dict(self) -> dict:
        nz = np.nonzero(self.counts)
        return {
            "schema": MODEL_SCHEMA, "kind": "tabular",
            "n_states": self.n_states, "n_actions": self.n_actions,
            "smoothing": self.smoothing, "cost_value": self.cost_value,
            "counts": [[int(i), int(j), int(k), float(self.counts[i, j, k])] for i, j, k in zip(*nz)],
            "reward_sum": self.reward_sum.tolist(),
            "violation_sum": self.violation_sum.tolist(),
            "continue_sum": self.continue_sum.tolist(),
            "state_visits": self.state_visits.tolist(),
            "seen": self.seen,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularModel":
        _check_schema(d, "tabular")
        m = cls(d["n_states"], d["n_actions"], d["cost_value"], d["smoothing"])
        for i, j, k, c in d["counts"]:
            m.counts[i, j, k] = c
        m.reward_sum = np.array(d["reward_sum"])
        m.violation_sum = np.array(d["violation_sum"])
        m.continue_sum = np.array(d["continue_sum"])
        m.state_visits = np.array(d["state_visits"])
        m.seen = d["seen"]
        return m


@dataclass(frozen=True)
class TabularSnapshot:
    """Immutable predictive distribution of a :class:`TabularModel`."""

    transition: np.ndarray
    reward_table: np.ndarray
    violation_prob: np.ndarray
    continue_prob: np.ndarray
    cost_value: float
    _rows: RowSampler = field(default=None, repr=False, compare=False)

    discrete = True

    def __post_init__(self):
        object.__setattr__(self, "_rows", RowSampler(self.transition))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def sample_next(self, states, actions, rng):
        return self._rows.sample(np.asarray(states) * self.n_actions + np.asarray(actions), rng)

    def reward(self, states, actions):
        return self.reward_table[states, actions]

    def violation(self, states):
        return self.violation_prob[states] > 0.5

    def cost(self, states):
        return np.where(self.violation(states), self.cost_value, 0.0)

    def continues(self, states):
        return (self.continue_prob[states] > 0.5).astype(float)


class TrueDynamicsModel:
    """Snapshot-compatible wrapper around an exact finite MDP."""

    discrete = True

    def __init__(self, mdp: LabelledMdp, formula, cost_value: float):
        self.mdp = mdp
        self.transition = mdp.transition
        self.cost_value = float(cost_value)
        self._unsafe = ~formula_mask(mdp.labels, formula)
        self._rows = RowSampler(mdp.transition)

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    def sample_next(self, states, actions, rng):
        return self._rows.sample(np.asarray(states) * self.n_actions + np.asarray(actions), rng)

    def reward(self, states, actions):
        return self.mdp.reward[states, actions]

    def violation(self, states):
        return self._unsafe[states]

    def cost(self, states):
        return np.where(self._unsafe[states], self.cost_value, 0.0)

    def continues(self, states):
        return np.ones(np.shape(states))


# --- linear Gaussian ----------------------------------------------------------

@dataclass(frozen=True)
class RbfFeatures:
    """Bias plus Gaussian bumps on selected state dimensions.

    ``relative`` maps state vectors to ``s[rel[1]] - s[rel[0]]`` pairs before
    the bumps are applied (used for goal-relative features).
    """

    centers: tuple
    width: float
    dims: tuple = (0, 1)
    relative: tuple | None = None
    raw: bool = True

    def __call__(self, states) -> np.ndarray:
        s = np.asarray(states, float)
        if self.relative is not None:
            a, b = self.relative
            x = s[..., list(b)] - s[..., list(a)]
        else:
            x = s[..., list(self.dims)]
        c = np.asarray(self.centers, float)
        d2 = ((x[..., None, :] - c) ** 2).sum(-1)
        parts = [np.ones(s.shape[:-1] + (1,)), np.exp(-d2 / (2 * self.width ** 2))]
        if self.raw:
            parts.insert(1, x)
        return np.concatenate(parts, axis=-1)

    @property
    def size(self) -> int:
        dim = len(self.relative[0]) if self.relative is not None else len(self.dims)
        return 1 + len(self.centers) + (dim if self.raw else 0)

    def to_dict(self):
        return {"centers": [list(c) for c in self.centers], "width": self.width, "dims": list(self.dims),
                "relative": None if self.relative is None else [list(r) for r in self.relative],
                "raw": self.raw}

    @classmethod
    def from_dict(cls, d):
        rel = d.get("relative")
        return cls(tuple(tuple(c) for c in d["centers"]), d["width"], tuple(d["dims"]),
                   None if rel is None else tuple(tuple(r) for r in rel), d.get("raw", True))

    @classmethod
    def grid(cls, half_width, n, width=None, **kw):
        ticks = np.linspace(-half_width, half_width, n)
        centers = tuple((float(x), float(y)) for x in ticks for y in ticks)
        return cls(centers, width or (ticks[1] - ticks[0]), **kw)


class LinearGaussianModel:
    """s' ~ N(s + W [s, a, 1], diag(var)) with linear reward and logistic cost heads.

    State clipping to ``bounds`` (if given) is applied after sampling.
    """

    def __init__(self, state_dim, action_dim, cost_value, reward_features: RbfFeatures,
                 cost_features: RbfFeatures, ridge=1e-3, bounds=None, action_clip=True):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.cost_value = float(cost_value)
        self.reward_features, self.cost_features = reward_features, cost_features
        self.ridge = float(ridge)
        self.bounds = bounds
        self.action_clip = action_clip
        self.weights = np.zeros((state_dim + action_dim + 1, state_dim))
        self.variance = np.ones(state_dim)
        self.reward_weights = np.zeros(reward_features.size)
        self.cost_weights = None
        self.cost_constant = 0.0

    def _inputs(self, s, a):
        a = np.asarray(a, float)
        if self.action_clip:
            a = np.clip(a, -1, 1)
        return np.concatenate([np.asarray(s, float), a, np.ones(np.shape(s)[:-1] + (1,))], axis=-1)

    def fit(self, rec: dict):
        from sklearn.linear_model import LogisticRegression

        s, a, s2 = rec["obs"], rec["actions"], rec["next_obs"]
        X = self._inputs(s, a)
        Y = np.asarray(s2, float) - np.asarray(s, float)
        reg = self.ridge * np.eye(X.shape[1])
        reg[-1, -1] = 0.0
        self.weights = np.linalg.solve(X.T @ X + reg, X.T @ Y)
        resid = Y - X @ self.weights
        self.variance = np.maximum(resid.var(axis=0), 1e-10)
        F = self.reward_features(s2)
        self.reward_weights = np.linalg.solve(F.T @ F + self.ridge * np.eye(F.shape[1]),
                                              F.T @ np.asarray(rec["rewards"], float))
        y = (np.asarray(rec["costs"]) > 0).astype(int)
        if y.min() == y.max():
            self.cost_weights, self.cost_constant = None, float(y[0])
        else:
            clf = LogisticRegression(C=10.0, max_iter=500)
            clf.fit(self.cost_features(s2), y)
            self.cost_weights = np.concatenate([clf.intercept_, clf.coef_[0]])
        return self

    partial_fit = fit

    @property
    def a_matrix(self):
        return np.eye(self.state_dim) + self.weights[: self.state_dim].T

    @property
    def b_matrix(self):
        return self.weights[self.state_dim: self.state_dim + self.action_dim].T

    def snapshot(self):
        return LinearGaussianSnapshot(self.weights.copy(), self.variance.copy(),
                                      self.reward_weights.copy(),
                                      None if self.cost_weights is None else self.cost_weights.copy(),
                                      self.cost_constant, self)

    def to_dict(self):
        return {
            "schema": MODEL_SCHEMA, "kind": "linear-gaussian",
            "state_dim": self.state_dim, "action_dim": self.action_dim,
            "cost_value": self.cost_value, "ridge": self.ridge,
            "bounds": self.bounds, "action_clip": self.action_clip,
            "reward_features": self.reward_features.to_dict(),
            "cost_features": self.cost_features.to_dict(),
            "weights": self.weights.tolist(), "variance": self.variance.tolist(),
            "reward_weights": self.reward_weights.tolist(),
            "cost_weights": None if self.cost_weights is None else self.cost_weights.tolist(),
            "cost_constant": self.cost_constant,
        }

    @classmethod
    def from_dict(cls, d):
        _check_schema(d, "linear-gaussian")
        m = cls(d["state_dim"], d["action_dim"], d["cost_value"],
                RbfFeatures.from_dict(d["reward_features"]), RbfFeatures.from_dict(d["cost_features"]),
                d["ridge"], d["bounds"], d["action_clip"])
        m.weights = np.array(d["weights"])
        m.variance = np.array(d["variance"])
        m.reward_weights = np.array(d["reward_weights"])
        m.cost_weights = None if d["cost_weights"] is None else np.array(d["cost_weights"])
        m.cost_constant = d["cost_constant"]
        return m


@dataclass(frozen=True)
class LinearGaussianSnapshot:
    weights: np.ndarray
    variance: np.ndarray
    reward_weights: np.ndarray
    cost_weights: np.ndarray | None
    cost_constant: float
    spec: LinearGaussianModel = field(repr=False, compare=False)

    discrete = False

    @property
    def cost_value(self):
        return self.spec.cost_value

    def sample_next(self, states, actions, rng):
        s = np.asarray(states, float)
        mean = s + self.spec._inputs(s, actions) @ self.weights
        nxt = mean + rng.standard_normal(mean.shape) * np.sqrt(self.variance)
        if self.spec.bounds is not None:
            lo, hi = self.spec.bounds
            nxt[..., :2] = np.clip(nxt[..., :2], lo, hi)
        return nxt

    def reward(self, states, actions, next_states=None):
        target = next_states if next_states is not None else states
        return self.spec.reward_features(target) @ self.reward_weights

    def violation_probability(self, states):
        if self.cost_weights is None:
            return np.full(np.shape(states)[:-1], self.cost_constant)
        z = self.spec.cost_features(states) @ self.cost_weights[1:] + self.cost_weights[0]
        return 1.0 / (1.0 + np.exp(-z))

    def violation(self, states):
        return self.violation_probability(states) > 0.5

    def cost(self, states):
        return np.where(self.violation(states), self.cost_value, 0.0)

    def continues(self, states):
        return np.ones(np.shape(states)[:-1])


def fit(model, buffer: ReplayBuffer):
    """Refit ``model`` from scratch on the buffer contents; returns a snapshot."""
    if len(buffer) == 0:
        raise PreconditionError("cannot fit a model on an empty buffer")
    if isinstance(model, TabularModel):
        model.reset()
        model.partial_fit(buffer.records())
    else:
        model.fit(buffer.records())
    return model.snapshot()


# --- imagination --------------------------------------------------------------

@dataclass(frozen=True)
class ImaginedBatch:
    states: np.ndarray
    actions: np.ndarray
    raw_actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    continues: np.ndarray
    violations: np.ndarray
    policy_name: str = ""

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def __len__(self):
        return self.rewards.shape[0]

    def trace(self, i: int) -> "ImaginedTrace":
        H = self.horizon
        rewards = (0.0,) + tuple(float(r) for r in self.rewards[i])
        labels = tuple(frozenset({"violation"}) if v else frozenset() for v in self.violations[i])
        states = tuple(self.states[i, t] if self.states.ndim == 2 else tuple(self.states[i, t])
                       for t in range(H + 1))
        tr = Trace(states, labels, rewards, tuple(self.costs[i]), tuple(self.continues[i]))
        return ImaginedTrace(tr, states[0], self.policy_name, tuple(self.actions[i].tolist()))


@dataclass(frozen=True)
class ImaginedTrace:
    trace: Trace
    start: object
    policy_name: str
    actions: tuple

    def __len__(self):
        return len(self.trace) - 1


def imagine(model, policy, starts, horizon: int, rng: np.random.Generator,
            first_action=None) -> ImaginedBatch:
    """Roll ``policy`` out in a model snapshot for ``horizon`` steps.

    Every trace is independent; ``first_action`` (if given) replaces the
    policy's choice at t = 0 for every trace.  Violations use the label
    ``violation`` in :meth:`ImaginedBatch.trace`.
    """
    if horizon < 1:
        raise PreconditionError("imagination horizon must be >= 1")
    s = np.asarray(starts)
    states, acts, raws, rewards, viols = [s], [], [], [], []
    conts = [model.continues(s)]
    viols.append(model.violation(s))
    discrete = model.discrete
    for t in range(horizon):
        a, raw = policy.sample(s, rng)
        if t == 0 and first_action is not None:
            a = np.broadcast_to(np.asarray(first_action), np.shape(a)).copy()
            raw = policy.raw_from_action(a) if hasattr(policy, "raw_from_action") else a
        nxt = model.sample_next(s, a, rng)
        rewards.append(model.reward(s, a) if discrete else model.reward(s, a, nxt))
        states.append(nxt)
        acts.append(a)
        raws.append(raw)
        conts.append(model.continues(nxt))
        viols.append(model.violation(nxt))
        s = nxt
    violations = np.stack(viols, axis=1).astype(bool)
    return ImaginedBatch(
        states=np.stack(states, axis=1),
        actions=np.stack(acts, axis=1),
        raw_actions=np.stack(raws, axis=1),
        rewards=np.stack(rewards, axis=1).astype(float),
        costs=np.where(violations, float(model.cost_value), 0.0),
        continues=np.stack(conts, axis=1).astype(float),
        violations=violations,
        policy_name=getattr(policy, "name", type(policy).__name__),
    )


def model_kl_diagnostic(model, true_mdp: LabelledMdp, policy):
    """Per-state KL(T(.|s) || T_hat(.|s)) of the policy-induced kernels.

    Returns ``(max, mean, per_state)``; states without absolute continuity
    report +inf.
    """
    transition = getattr(model, "transition", None)
    if transition is None:
        raise PreconditionError("KL diagnostic needs a finite model")
    if transition.shape != true_mdp.transition.shape:
        raise PreconditionError("model and MDP state spaces differ")
    pi = policy_matrix(policy, true_mdp.n_states, true_mdp.n_actions)
    T = np.einsum("sa,sat->st", pi, true_mdp.transition)
    T_hat = np.einsum("sa,sat->st", pi, transition)
    per_state = row_kl(T, T_hat)
    return float(per_state.max()), float(per_state.mean()), per_state


def _check_schema(d, kind):
    if d.get("schema") != MODEL_SCHEMA or d.get("kind") != kind:
        raise ConfigurationError(f"expected {MODEL_SCHEMA}/{kind}, got {d.get('schema')}/{d.get('kind')}")


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    kinds = {"tabular": TabularModel, "linear-gaussian": LinearGaussianModel}
    if d.get("kind") not in kinds:
        raise ConfigurationError(f"unknown model kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_dict(d)


def finite_or_nan(x: float) -> float:
    return x if math.isfinite(x) else float("nan")

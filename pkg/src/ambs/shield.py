"""Look-ahead shielding by sampling imagined futures.

For a proposed action the shield imagines ``m`` traces from the current
state (first action pinned to the proposal, later actions from the task
policy), counts those whose discounted cost stays below
``gamma^(T-1) * C`` and accepts iff the satisfying fraction lies in
``[1 - Delta + eps, 1]``.  Otherwise a single backup action is drawn.

Two routes compute the same verdict distribution:

``rollout``
    literal sampling of ``m`` traces in the model snapshot.
``binomial``
    for finite models whose costs are {0, C}, whose continuation flags are
    all 1, and whose look-ahead makes any visible violation decisive
    (``H <= T`` or ``gamma == 1``), the per-trace satisfaction probability
    ``p(s, a)`` is computed exactly by backward recursion and the count is
    drawn as ``Binomial(m, p)``.  The traces are i.i.d., so the count has
    exactly this law under the rollout route too.  When a precondition
    fails the shield falls back to rollouts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .logic import policy_matrix
from .measure import safety_values, sample_size_approx
from .world_model import imagine

log = logging.getLogger(__name__)

# 1 - 0.1 + 0.05 evaluates to 0.9500000000000001; counts are exact so a tiny slack is safe
_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class ShieldConfig:
    delta: float = 0.1
    epsilon: float = 0.09
    fail_prob: float = 0.01
    samples: int | None = None
    horizon: int = 15
    lookahead: int = 30
    cost_value: float = 10.0
    gamma: float = 0.997
    use_critics: bool = False
    allow_undersampling: bool = False

    def __post_init__(self):
        for name in ("delta", "epsilon", "fail_prob"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")
        if not self.epsilon < self.delta:
            raise ConfigurationError("epsilon must be below Delta, else nothing is ever accepted")
        if self.horizon < 1 or self.lookahead < 1:
            raise ConfigurationError("horizons must be >= 1")
        if not 0.0 < self.gamma <= 1.0 or not self.cost_value > 0:
            raise ConfigurationError("need gamma in (0, 1] and C > 0")
        bound = sample_size_approx(self.epsilon, self.fail_prob)
        if self.samples is None:
            object.__setattr__(self, "samples", bound)
        elif self.samples < bound:
            if not self.allow_undersampling:
                raise ConfigurationError(f"m={self.samples} is below the bound {bound}; "
                                         "set allow_undersampling to override")
            log.warning("shield uses m=%d below the sample bound %d", self.samples, bound)

    @property
    def threshold(self) -> float:
        return self.gamma ** (self.lookahead - 1) * self.cost_value

    @property
    def accept_level(self) -> float:
        return 1.0 - self.delta + self.epsilon

    def accepts(self, mu):
        """Closed-interval test μ̃ ∈ [1 - Delta + eps, 1], tolerant to rounding in the bound."""
        mu = np.asarray(mu)
        out = (mu >= self.accept_level - _BOUND_TOL) & (mu <= 1.0)
        return out if out.ndim else bool(out)

    def step_weights(self) -> np.ndarray:
        """gamma^(t-1) for imagined steps t = 1..H."""
        return self.gamma ** np.arange(self.horizon)


@dataclass(frozen=True)
class ShieldDecision:
    action: object
    overridden: bool
    mu_tilde: float
    satisfying: int
    samples: int
    mean_cost: float = float("nan")
    max_cost: float = float("nan")


def _critic_values(critics, states):
    if callable(critics) and not hasattr(critics, "value"):
        return np.asarray(critics(states), float)
    return np.asarray(critics.value(states), float)


def trace_costs(batch, cfg: ShieldConfig, critics=None) -> np.ndarray:
    """Discounted imagined cost of every trace in a batch.

    Step t (1..H) is weighted by gamma^(t-1) times the product of the
    continuation flags of s_0..s_{t-1}.  With critics the last step is
    replaced by min(v1, v2)(s_H).
    """
    H = batch.horizon
    if H != cfg.horizon:
        raise PreconditionError(f"trace horizon {H} differs from configured H={cfg.horizon}")
    if cfg.use_critics and critics is None:
        raise ConfigurationError("critic bootstrapping requested but no critics given")
    c = batch.costs[:, 1:]
    alive = np.cumprod(batch.continues[:, :-1], axis=1)
    w = cfg.step_weights() * alive
    if not cfg.use_critics:
        return (w * c).sum(axis=1)
    boot = _critic_values(critics, batch.states[:, H])
    return (w[:, :-1] * c[:, :-1]).sum(axis=1) + w[:, -1] * boot


def trace_cost(trace, cfg: ShieldConfig, critics=None) -> float:
    """Discounted cost of one :class:`ImaginedTrace`."""
    tr = trace.trace
    if len(tr) - 1 != cfg.horizon:
        raise PreconditionError(f"trace horizon {len(tr) - 1} differs from configured H={cfg.horizon}")
    if cfg.use_critics and critics is None:
        raise ConfigurationError("critic bootstrapping requested but no critics given")
    total, alive = 0.0, 1.0
    weights = cfg.step_weights()
    last = cfg.horizon if not cfg.use_critics else cfg.horizon - 1
    for t in range(1, last + 1):
        alive *= tr.continues[t - 1]
        total += weights[t - 1] * alive * tr.costs[t]
    if cfg.use_critics:
        alive *= tr.continues[cfg.horizon - 1]
        s_h = np.asarray(tr.states[cfg.horizon])
        total += weights[-1] * alive * float(_critic_values(critics, s_h[None])[0])
    return float(total)


def is_satisfying(cost, cfg: ShieldConfig):
    return np.asarray(cost) < cfg.threshold if np.ndim(cost) else bool(cost < cfg.threshold)


def _decide(count: int, cfg: ShieldConfig, proposal, safe_policy, state, rng, force_override=False,
            costs=None) -> ShieldDecision:
    m = cfg.samples
    mu = count / m
    accept = cfg.accepts(mu) and not force_override
    if accept:
        action = proposal
    else:
        a, _ = safe_policy.sample(np.asarray(state)[None], rng)
        action = a[0]
    stats = {} if costs is None else {"mean_cost": float(costs.mean()), "max_cost": float(costs.max())}
    return ShieldDecision(action, not accept, mu, int(count), m, **stats)


def shield_action(state, proposal, model, task_policy, safe_policy, critics, cfg: ShieldConfig,
                  rng: np.random.Generator, current_violation: bool = False) -> ShieldDecision:
    """Sample ``cfg.samples`` imagined traces and accept or override the proposal."""
    if model is None:
        raise ConfigurationError("shield needs a world-model snapshot")
    starts = np.repeat(np.asarray(state)[None], cfg.samples, axis=0)
    batch = imagine(model, task_policy, starts, cfg.horizon, rng, first_action=proposal)
    costs = trace_costs(batch, cfg, critics)
    count = int(np.count_nonzero(is_satisfying(costs, cfg)))
    return _decide(count, cfg, proposal, safe_policy, state, rng, current_violation, costs)


def satisfaction_table(model, task_policy, cfg: ShieldConfig, critic_values=None) -> np.ndarray:
    """Exact per-trace satisfaction probability p(s, a) for a finite model.

    Raises :class:`PreconditionError` when the {0, C}-cost decomposition
    behind the recursion does not apply.
    """
    P = getattr(model, "transition", None)
    if P is None:
        raise PreconditionError("satisfaction table needs a finite model")
    S, A = P.shape[:2]
    states = np.arange(S)
    if not np.all(model.continues(states) == 1.0):
        raise PreconditionError("continuation flags must all be 1")
    if cfg.horizon > cfg.lookahead and cfg.gamma < 1.0:
        raise PreconditionError("violations beyond the look-ahead may be invisible")
    safe = ~np.asarray(model.violation(states), bool)
    pi = policy_matrix(task_policy, S, A)
    kernel = np.einsum("sa,sat->st", pi, P)
    if cfg.use_critics:
        if critic_values is None:
            raise ConfigurationError("critic bootstrapping requested but no critic values given")
        v = np.asarray(critic_values, float)
        if np.any(v < 0):
            raise PreconditionError("critic values must be nonnegative")
        w_last = cfg.step_weights()[-1]
        last = (w_last * v < cfg.threshold).astype(float)
        q = last
        for _ in range(cfg.horizon - 1):
            q = safe * (kernel @ q)
    else:
        q = safety_values(kernel, safe, cfg.horizon - 1)
    return np.clip(P @ q, 0.0, 1.0)


class Shield:
    """Stateful shield bound to a model snapshot and policies.

    ``refresh`` must be called whenever the snapshot, the task policy or the
    critics change; the binomial table is rebuilt lazily.
    """

    def __init__(self, cfg: ShieldConfig, route: str = "binomial"):
        if route not in ("binomial", "rollout"):
            raise ConfigurationError(f"unknown shield route {route!r}")
        self.cfg = cfg
        self.route = route
        self.model = self.task_policy = self.critics = None
        self._table = None
        self._stale = True
        self.fallbacks = 0

    def refresh(self, model, task_policy, critics=None):
        self.model, self.task_policy, self.critics = model, task_policy, critics
        self._stale = True

    def _prepare(self):
        self._stale = False
        self._table = None
        if self.route != "binomial":
            return
        try:
            values = None
            if self.cfg.use_critics:
                values = _critic_values(self.critics, np.arange(self.model.transition.shape[0]))
            self._table = satisfaction_table(self.model, self.task_policy, self.cfg, values)
        except PreconditionError as exc:
            self.fallbacks += 1
            log.debug("binomial route unavailable (%s); sampling traces", exc)

    def probability(self, state, action) -> float | None:
        if self._stale:
            self._prepare()
        return None if self._table is None else float(self._table[state, action])

    def decide(self, state, proposal, safe_policy, rng, current_violation=False) -> ShieldDecision:
        if self.model is None:
            raise ConfigurationError("shield needs a world-model snapshot")
        p = self.probability(state, proposal) if self.route == "binomial" else None
        if p is None:
            return shield_action(state, proposal, self.model, self.task_policy, safe_policy,
                                 self.critics, self.cfg, rng, current_violation)
        count = int(rng.binomial(self.cfg.samples, p))
        return _decide(count, self.cfg, proposal, safe_policy, state, rng, current_violation)


@dataclass
class CalibrationReport:
    pairs: list
    exact: np.ndarray
    accept_rate: np.ndarray
    delta: float
    epsilon: float
    fail_prob: float
    high: np.ndarray = field(init=False)
    low: np.ndarray = field(init=False)

    def __post_init__(self):
        self.high = self.exact >= 1.0 - self.delta + 2 * self.epsilon
        self.low = self.exact <= 1.0 - self.delta

    @property
    def min_high_accept(self) -> float:
        return float(self.accept_rate[self.high].min()) if self.high.any() else float("nan")

    @property
    def max_low_accept(self) -> float:
        return float(self.accept_rate[self.low].max()) if self.low.any() else float("nan")

    @property
    def false_accept_rate(self) -> float:
        return float(self.accept_rate[self.low].mean()) if self.low.any() else 0.0

    @property
    def false_reject_rate(self) -> float:
        return float(1 - self.accept_rate[self.high].mean()) if self.high.any() else 0.0


def exact_pair_measure(mdp, policy, formula, horizon: int) -> np.ndarray:
    """True probability mu(s, a) that s_1..s_H all satisfy the formula when
    a is taken in s and the policy acts afterwards."""
    S, A = mdp.n_states, mdp.n_actions
    kernel = np.einsum("sa,sat->st", policy_matrix(policy, S, A), mdp.transition)
    safe = mdp.safe_mask(formula)
    return mdp.transition @ safety_values(kernel, safe, horizon - 1)


def shield_calibration_report(mdp, policy, model, cfg: ShieldConfig, trials: int,
                              rng: np.random.Generator, formula, pairs=None,
                              route: str = "rollout") -> CalibrationReport:
    """Empirical acceptance rate of the shield against the exact measure.

    ``pairs`` lists (state, action) tuples; by default every pair is used.
    The rollout route draws ``trials * m`` traces per pair in one batch.
    """
    exact_all = exact_pair_measure(mdp, policy, formula, cfg.horizon)
    if pairs is None:
        pairs = [(s, a) for s in range(mdp.n_states) for a in range(mdp.n_actions)]
    m = cfg.samples
    rates = []
    for s, a in pairs:
        if route == "rollout":
            starts = np.full(trials * m, s)
            batch = imagine(model, policy, starts, cfg.horizon, rng, first_action=a)
            ok = is_satisfying(trace_costs(batch, cfg), cfg).reshape(trials, m)
            counts = ok.sum(axis=1)
        else:
            p = satisfaction_table(model, policy, cfg)[s, a]
            counts = rng.binomial(m, p, size=trials)
        mu = counts / m
        rates.append(float(np.mean(cfg.accepts(mu))))
    exact = np.array([exact_all[s, a] for s, a in pairs])
    return CalibrationReport(list(pairs), exact, np.array(rates), cfg.delta, cfg.epsilon, cfg.fail_prob)

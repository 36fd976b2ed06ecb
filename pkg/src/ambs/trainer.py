"""The model-based training loop with optional shielding.

Each training iteration (every ``agent.train_every`` environment steps):

1. fold new replay transitions into the world model and take a snapshot;
2. imagine ``batch_size`` traces with the task policy from replayed states
   and apply the configured policy gradient;
3. regress the reward critic and the twin safety critics toward TD(lambda)
   targets of those traces;
4. imagine with the backup policy and update it to reduce expected cost;
5. refresh the shield on the new snapshot.

Between iterations the agent acts in the environment; shielded methods pass
every proposed action through the shield.  One metrics row is written per
finished episode.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agent as ag
from .config import CONFIG_SCHEMA, ExperimentConfig, derive_seeds, resolve
from .envs import GridHazardEnv, PointNavEnv, make_env
from .errors import ConfigurationError
from .shield import Shield, ShieldConfig
from .world_model import (LinearGaussianModel, RbfFeatures, ReplayBuffer, TabularModel,
                          imagine, model_kl_diagnostic)

log = logging.getLogger(__name__)

METRICS_SCHEMA = "metrics-v1"
METRICS_COLUMNS = ("frames", "episode_return", "cum_violations", "interventions", "mu_mean",
                   "mu_min", "model_kl_max", "lambda", "mu_k")
CHECKPOINT_SCHEMA = "checkpoint-v1"


class TrainingError(RuntimeError):
    """A failure inside one phase of the loop; ``phase`` names it."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"{phase}: {type(cause).__name__}: {cause}")
        self.phase = phase


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in METRICS_COLUMNS])
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def read_metrics(path) -> dict:
    """Read a metrics CSV into column arrays; rejects foreign headers."""
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRICS_COLUMNS:
            raise ConfigurationError(f"{path}: header does not match {METRICS_SCHEMA}")
        data = [[float(x) for x in row] for row in reader]
    arr = np.array(data, dtype=float).reshape(-1, len(METRICS_COLUMNS))
    return {c: arr[:, i] for i, c in enumerate(METRICS_COLUMNS)}


def _rng_state(rng):
    return rng.bit_generator.state


def _set_rng_state(rng, state):
    rng.bit_generator.state = state


class Trainer:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.resolved = resolve(cfg)
        seeds = self.resolved["seeds"]
        self.rngs = {k: np.random.default_rng(v) for k, v in seeds.items()}
        C = cfg.resolved_cost
        env_doc = dict(cfg.env)
        env_doc["cost_value"] = C
        self.env = make_env(env_doc)
        self.C = C
        a = cfg.agent
        self.discrete = isinstance(self.env, GridHazardEnv)
        init = self.rngs["init"]
        if self.discrete:
            S, A = self.env.n_states, self.env.n_actions
            self.model = TabularModel(S, A, C, cfg.model.smoothing)
            self.task = ag.TabularSoftmaxPolicy(S, A, name="task")
            self.safe = ag.TabularSoftmaxPolicy(S, A, name="safe")
            critic = lambda scale: ag.TabularCritic(  # noqa: E731
                S, a.critic_lr, a.target_fraction,
                a.cost_critic_init + scale * init.standard_normal(S))
            self.buffer = ReplayBuffer(cfg.model.capacity, discrete=True)
        else:
            env = self.env
            feats = RbfFeatures.grid(env.half_width, 5, relative=None)
            pol_feats = RbfFeatures.grid(env.half_width, 5, relative=None)
            self.features = feats
            self.model = LinearGaussianModel(4, 2, C, RbfFeatures(
                feats.centers, feats.width, relative=((0, 1), (2, 3)), raw=True), feats,
                ridge=cfg.model.ridge, bounds=(-env.half_width, env.half_width))
            self.task = ag.GaussianLinearPolicy(_PointFeatures(pol_feats), 2, name="task")
            self.safe = ag.GaussianLinearPolicy(_PointFeatures(pol_feats), 2, name="safe")
            critic = lambda scale: ag.LinearCritic(  # noqa: E731
                _PointFeatures(pol_feats), a.critic_lr, a.target_fraction,
                scale * init.standard_normal(_PointFeatures(pol_feats).size))
            self.buffer = ReplayBuffer(cfg.model.capacity, obs_shape=(4,), action_shape=(2,),
                                       discrete=False)
        self.value_critic = critic(0.0)
        # twin critics differ only through their random initialisation
        self.cost_critics = ag.TwinSafetyCritic(critic(0.01), critic(0.01))
        self.safe_critic = critic(0.0)
        s = cfg.shield
        self.shield_cfg = ShieldConfig(s.delta, s.epsilon, s.fail_prob, s.samples, s.horizon,
                                       s.lookahead, C, s.gamma, s.use_critics, s.allow_undersampling)
        route = s.route if self.discrete else "rollout"
        self.shield = Shield(self.shield_cfg, route)
        L = cfg.lagrangian
        self.lag = ag.LagrangianState(L.lam, L.mu, L.sigma, L.threshold, L.mu_rule, L.mu_cap)
        self.alpha = cfg.resolved_alpha
        self.true_mdp = self.env.finite_mdp() if self.discrete else None
        self.snapshot = None
        self.fitted_upto = 0
        self.frames = 0
        self.cum_violations = 0
        self.total_interventions = 0
        self.episodes = 0
        self.clamp_hits = 0
        self.grad_clips = 0
        self.updates = 0
        self.log = MetricsLog()
        self._obs = None
        self._violating = False

    # --- learning --------------------------------------------------------

    def _fit_model(self):
        if self.buffer.evicted or not self.discrete:
            if self.discrete:
                self.model.reset()
                self.model.partial_fit(self.buffer.records())
            else:
                self.model.fit(self.buffer.records())
        else:
            self.model.partial_fit(self.buffer.records(since=self.fitted_upto))
        self.fitted_upto = self.buffer.total_added
        self.snapshot = self.model.snapshot()

    def _returns(self, batch, values_target, values_online, rewards):
        a = self.cfg.agent
        targets = ag.td_lambda(rewards, values_target, a.gamma, a.lam)
        if a.return_mode == "monte-carlo":
            G = ag.discounted_returns(rewards, a.gamma)
        elif a.return_mode == "advantage":
            G = targets[:, :-1] - values_online[:, :-1]
        else:
            G = targets[:, :-1]
        if a.normalize:
            lo, hi = np.percentile(G, [5, 95])
            G = G / max(1.0, hi - lo)
        return G, targets

    def _critic_arrays(self, critic, states, twin=False):
        if twin:
            return critic.value(states, target=True), critic.value(states, target=False)
        return critic.value(states, target=True), critic.value(states)

    def _update_task(self, starts):
        cfg, a = self.cfg, self.cfg.agent
        rng = self.rngs["imagine"]
        batch = imagine(self.snapshot, self.task, starts, a.horizon, rng)
        st = batch.states
        v_t, v_o = self._critic_arrays(self.value_critic, st)
        G, R = self._returns(batch, v_t, v_o, batch.rewards)
        c_t = self.cost_critics.value(st, target=True)
        c_o = self.cost_critics.value(st, target=False)
        GC, CR = self._returns(batch, c_t, c_o, batch.costs[:, 1:])
        m = cfg.method
        if m in ("VANILLA", "AMBS"):
            rep = ag.grad_vanilla(batch, G, self.task)
        elif m == "AMBS+PENL":
            rep = ag.grad_penl(batch, G, GC, self.alpha, self.task)
        elif m == "AMBS+PLPG":
            safe_v = self.safe_critic.value(st, target=True)
            rep = ag.grad_plpg(batch, G, GC, self.alpha, safe_v, self.task, clamp_max=a.clamp_max)
            self.clamp_hits += rep.diagnostics["clamp_hits"]
        elif m == "AMBS+COPT":
            rep = ag.grad_copt(batch, G, GC, self.alpha, a.kappa, a.gamma, a.horizon, self.C, self.task)
        else:
            J_C = float(CR[:, 0].mean())
            slope = ag.lagrangian_penalty_slope(self.lag, J_C)
            rep = ag.grad_penl(batch, G, GC, slope, self.task)
            _, self.lag = ag.lagrangian_step(self.lag, J_C)
        grad = rep.grad + self.task.entropy_gradient(st[:, :-1], a.entropy / len(starts))
        grad, clipped = ag.clip_by_norm(grad, a.grad_clip)
        self.grad_clips += clipped
        self.task.set_params(self.task.params + a.policy_lr * grad)
        self.value_critic.update(st[:, :-1], R[:, :-1])
        self.cost_critics.update(st[:, :-1], CR[:, :-1])

    def _update_safe(self, starts):
        a = self.cfg.agent
        batch = imagine(self.snapshot, self.safe, starts, a.horizon, self.rngs["safe"])
        st = batch.states
        c_t, c_o = self._critic_arrays(self.safe_critic, st)
        GC, CR = self._returns(batch, c_t, c_o, batch.costs[:, 1:])
        rep = ag.grad_safe(batch, GC, self.safe)
        grad = rep.grad + self.safe.entropy_gradient(st[:, :-1], a.entropy / len(starts))
        grad, clipped = ag.clip_by_norm(grad, a.grad_clip)
        self.grad_clips += clipped
        self.safe.set_params(self.safe.params + a.safe_lr * grad)
        self.safe_critic.update(st[:, :-1], CR[:, :-1])

    def _needs_safe(self):
        return self.cfg.method in ("AMBS", "AMBS+PENL", "AMBS+PLPG", "AMBS+COPT")

    def train_step(self):
        phase = "model-fit"
        try:
            self._fit_model()
            phase = "task-update"
            starts = self.buffer.sample_obs(self.cfg.agent.batch_size, self.rngs["replay"])
            self._update_task(starts)
            if self._needs_safe():
                phase = "safe-update"
                self._update_safe(starts)
            phase = "shield-refresh"
            self.shield.refresh(self.snapshot, self.task, self.cost_critics)
        except TrainingError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise TrainingError(phase, exc) from exc
        self.updates += 1

    # --- interaction -------------------------------------------------------

    def _reset_env(self):
        res = self.env.reset(self.rngs["env"])
        self._obs = res.observation
        self._violating = res.cost > 0
        self._ep = {"ret": 0.0, "interventions": 0, "mu": []}

    def _act(self):
        obs = self._obs
        if self.frames < self.cfg.agent.prefill:
            # uniform exploration before the policy and shield take over
            rng = self.rngs["act"]
            return int(rng.integers(self.env.n_actions)) if self.discrete else rng.uniform(-1, 1, 2)
        a, _ = self.task.sample(np.asarray(obs)[None], self.rngs["act"])
        action = a[0]
        if self.cfg.shielded and self.snapshot is not None:
            d = self.shield.decide(obs, action, self.safe, self.rngs["shield"], self._violating)
            self._ep["mu"].append(d.mu_tilde)
            if d.overridden:
                self._ep["interventions"] += 1
                self.total_interventions += 1
            action = d.action
        return action

    def _finish_episode(self):
        kl_max = float("nan")
        every = self.cfg.model.kl_every
        if self.true_mdp is not None and self.snapshot is not None and every > 0 \
                and self.episodes % every == 0:
            kl_max = model_kl_diagnostic(self.snapshot, self.true_mdp, self.task)[0]
        mus = self._ep["mu"]
        lagging = self.cfg.method == "LAG"
        self.log.rows.append({
            "frames": self.frames,
            "episode_return": self._ep["ret"],
            "cum_violations": self.cum_violations,
            "interventions": self._ep["interventions"],
            "mu_mean": float(np.mean(mus)) if mus else float("nan"),
            "mu_min": float(np.min(mus)) if mus else float("nan"),
            "model_kl_max": kl_max,
            "lambda": self.lag.lam if lagging else float("nan"),
            "mu_k": self.lag.mu if lagging else float("nan"),
        })
        self.episodes += 1

    def env_step(self):
        try:
            action = self._act()
        except Exception as exc:  # noqa: BLE001
            raise TrainingError("shield", exc) from exc
        try:
            res = self.env.step(action, self.rngs["env"])
        except Exception as exc:  # noqa: BLE001
            raise TrainingError("environment", exc) from exc
        self.buffer.add(self._obs, action, res.reward, res.cost, 1.0, res.observation)
        self.frames += 1
        self._ep["ret"] += res.reward
        if res.cost > 0:
            self.cum_violations += 1
        self._obs = res.observation
        self._violating = res.cost > 0
        return res

    def run(self, until_frames=None, on_episode=None) -> MetricsLog:
        """Train until ``until_frames`` (default: the configured budget)."""
        budget = self.cfg.total_frames if until_frames is None else until_frames
        if self._obs is None:
            self._reset_env()
        every = self.cfg.agent.train_every
        while self.frames < budget:
            res = self.env_step()
            if self.frames % every == 0 and len(self.buffer) >= 1:
                self.train_step()
            if res.terminated:
                self._finish_episode()
                if on_episode is not None:
                    on_episode(self)
                self._reset_env()
        self.log.summary = self.summary()
        return self.log

    def summary(self) -> dict:
        return {
            "frames": self.frames, "episodes": self.episodes, "updates": self.updates,
            "cum_violations": self.cum_violations, "interventions": self.total_interventions,
            "clamp_hits": self.clamp_hits, "grad_clips": self.grad_clips,
            "shield_fallbacks": self.shield.fallbacks,
            "lambda": self.lag.lam, "mu_k": self.lag.mu,
        }

    # --- evaluation and checkpoints -----------------------------------------

    def evaluate(self, episodes=None, shielded=None, rng=None):
        shielded = self.cfg.shielded if shielded is None else shielded
        shield = self.shield if shielded and self.snapshot is not None else None
        return evaluate(self.task, make_env({**self.cfg.env, "cost_value": self.C}),
                        episodes or self.cfg.eval_episodes, shield=shield, safe_policy=self.safe,
                        rng=rng or self.rngs["eval"])

    def checkpoint(self) -> dict:
        env = self.env
        env_state = {"t": env._t}
        if self.discrete:
            env_state.update(cell=list(env._cell), goal=env._goal)
        else:
            env_state.update(pos=env._pos.tolist(), goal=env._goal.tolist())
        return {
            "schema": CHECKPOINT_SCHEMA,
            "config": self.resolved,
            "model": self.model.to_dict(),
            "task": self.task.to_dict(), "safe": self.safe.to_dict(),
            "value_critic": self.value_critic.to_dict(),
            "cost_critics": self.cost_critics.to_dict(),
            "safe_critic": self.safe_critic.to_dict(),
            "lagrangian": vars(self.lag) if not hasattr(self.lag, "__dataclass_fields__")
            else {k: getattr(self.lag, k) for k in self.lag.__dataclass_fields__},
            "rng": {k: _rng_state(r) for k, r in self.rngs.items()},
            "counters": {"frames": self.frames, "cum_violations": self.cum_violations,
                         "interventions": self.total_interventions, "episodes": self.episodes,
                         "clamp_hits": self.clamp_hits, "grad_clips": self.grad_clips,
                         "updates": self.updates,
                         "fitted_upto": self.fitted_upto},
            "env_state": env_state,
            "obs": np.asarray(self._obs).tolist(), "violating": bool(self._violating),
            "episode": {"ret": self._ep["ret"], "interventions": self._ep["interventions"],
                        "mu": list(self._ep["mu"])},
            "rows": self.log.rows,
        }

    def save_checkpoint(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "checkpoint.json").write_text(json.dumps(self.checkpoint()))
        n = len(self.buffer)
        np.savez(d / "replay.npz", **self.buffer.records(),
                 capacity=self.buffer.capacity, total_added=self.buffer.total_added, size=n)

    @classmethod
    def restore(cls, directory, cfg: ExperimentConfig | None = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; ``cfg`` may change run-time toggles."""
        from .config import from_dict

        d = Path(directory)
        ck = json.loads((d / "checkpoint.json").read_text())
        if ck.get("schema") != CHECKPOINT_SCHEMA:
            raise ConfigurationError("not a checkpoint-v1 document")
        base = from_dict(ck["config"])
        tr = cls(cfg or base)
        kinds = {"tabular": TabularModel, "linear-gaussian": LinearGaussianModel}
        tr.model = kinds[ck["model"]["kind"]].from_dict(ck["model"])
        feats = None if tr.discrete else tr.task.features
        tr.task = ag.policy_from_dict(ck["task"], feats)
        tr.safe = ag.policy_from_dict(ck["safe"], feats)
        tr.value_critic = ag.critic_from_dict(ck["value_critic"], feats)
        tr.cost_critics = ag.TwinSafetyCritic(ag.critic_from_dict(ck["cost_critics"]["first"], feats),
                                              ag.critic_from_dict(ck["cost_critics"]["second"], feats))
        tr.safe_critic = ag.critic_from_dict(ck["safe_critic"], feats)
        tr.lag = ag.LagrangianState(**ck["lagrangian"])
        for k, st in ck["rng"].items():
            _set_rng_state(tr.rngs[k], st)
        c = ck["counters"]
        tr.frames, tr.cum_violations = c["frames"], c["cum_violations"]
        tr.total_interventions, tr.episodes = c["interventions"], c["episodes"]
        tr.clamp_hits, tr.updates, tr.fitted_upto = c["clamp_hits"], c["updates"], c["fitted_upto"]
        tr.grad_clips = c["grad_clips"]
        rep = np.load(d / "replay.npz")
        buf = tr.buffer
        n = int(rep["size"])
        for i in range(n):
            buf.add(rep["obs"][i], rep["actions"][i], rep["rewards"][i], rep["costs"][i],
                    rep["continues"][i], rep["next_obs"][i])
        buf.total_added = int(rep["total_added"])
        es = ck["env_state"]
        tr.env._t = es["t"]
        if tr.discrete:
            tr.env._cell, tr.env._goal = tuple(es["cell"]), es["goal"]
            tr._obs = int(ck["obs"])
        else:
            tr.env._pos, tr.env._goal = np.array(es["pos"]), np.array(es["goal"])
            tr._obs = np.array(ck["obs"])
        tr._violating = ck["violating"]
        tr._ep = dict(ck["episode"])
        tr.log.rows = [dict(r) for r in ck["rows"]]
        if tr.updates > 0:
            tr.snapshot = tr.model.snapshot()
            tr.shield.refresh(tr.snapshot, tr.task, tr.cost_critics)
        return tr


class _PointFeatures:
    """Policy/critic features for point navigation: position bumps and goal offset."""

    def __init__(self, rbf: RbfFeatures):
        self.rbf = rbf

    @property
    def size(self):
        return self.rbf.size + 2

    def __call__(self, states):
        s = np.asarray(states, float)
        return np.concatenate([self.rbf(s), s[..., 2:4] - s[..., 0:2]], axis=-1)

    def to_dict(self):
        return self.rbf.to_dict()


def evaluate(policy, env, episodes: int, shield=None, safe_policy=None, rng=None) -> dict:
    """Frozen-policy rollouts; returns mean return and violations per episode."""
    rng = rng or np.random.default_rng(0)
    returns, violations, interventions = [], [], 0
    for _ in range(episodes):
        res = env.reset(rng)
        obs, violating = res.observation, res.cost > 0
        ret, viol = 0.0, 0
        while True:
            a, _ = policy.sample(np.asarray(obs)[None], rng)
            action = a[0]
            if shield is not None:
                d = shield.decide(obs, action, safe_policy, rng, violating)
                interventions += int(d.overridden)
                action = d.action
            res = env.step(action, rng)
            ret += res.reward
            viol += int(res.cost > 0)
            obs, violating = res.observation, res.cost > 0
            if res.terminated:
                break
        returns.append(ret)
        violations.append(viol)
    return {"episodes": episodes, "mean_return": float(np.mean(returns)),
            "std_return": float(np.std(returns)),
            "violations_per_episode": float(np.mean(violations)),
            "interventions": interventions}


def run(cfg: ExperimentConfig) -> MetricsLog:
    trainer = Trainer(cfg)
    log_ = trainer.run()
    log_.summary["evaluation"] = trainer.evaluate()
    return log_


def write_outputs(trainer: Trainer, out_dir, evaluation=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(trainer.resolved, indent=2, sort_keys=True))
    trainer.log.write(out / "metrics.csv")
    summary = dict(trainer.summary())
    if evaluation is not None:
        summary["evaluation"] = evaluation
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    trainer.save_checkpoint(out / "checkpoint")


__all__ = ["Trainer", "MetricsLog", "METRICS_COLUMNS", "TrainingError", "evaluate", "run",
           "read_metrics", "write_outputs", "derive_seeds", "ExperimentConfig", "PointNavEnv"]

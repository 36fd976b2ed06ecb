"""Experiment configuration (``config-v1`` JSON documents).

Every section is a dataclass; loading rejects unknown keys at every level
and fills the rest from defaults.  :func:`resolve` returns the fully
populated document that is written next to every run's outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

CONFIG_SCHEMA = "config-v1"
METHODS = ("VANILLA", "AMBS", "AMBS+PENL", "AMBS+PLPG", "AMBS+COPT", "LAG")
SHIELDED = frozenset({"AMBS", "AMBS+PENL", "AMBS+PLPG", "AMBS+COPT"})


@dataclass
class ShieldSection:
    enabled: bool = True
    route: str = "binomial"
    delta: float = 0.1
    epsilon: float = 0.09
    fail_prob: float = 0.01
    samples: int | None = None
    horizon: int = 15
    lookahead: int = 30
    gamma: float = 0.997
    use_critics: bool = False
    allow_undersampling: bool = False


@dataclass
class AgentSection:
    gamma: float = 0.997
    lam: float = 0.95
    horizon: int = 15
    batch_size: int = 16
    train_every: int = 16
    policy_lr: float = 0.5
    safe_lr: float = 0.5
    critic_lr: float = 0.2
    target_fraction: float = 0.02
    entropy: float = 0.01
    return_mode: str = "td-lambda"
    normalize: bool = False
    alpha: float | None = None
    kappa: float = 10.0
    clamp_max: float = 10.0
    grad_clip: float | None = 100.0
    cost_critic_init: float = 0.0
    prefill: int = 0


@dataclass
class ModelSection:
    smoothing: float = 0.5
    capacity: int = 1_000_000
    ridge: float = 1e-3
    kl_every: int = 1


@dataclass
class LagrangianSection:
    lam: float = 0.01
    mu: float = 5e-9
    sigma: float = 1e-6
    threshold: float = 1.0
    mu_rule: str = "monotone"
    mu_cap: float = 1e6


@dataclass
class ExperimentConfig:
    method: str = "AMBS+PENL"
    seed: int = 0
    total_frames: int = 200_000
    cost_value: float | None = None
    eval_episodes: int = 10
    checkpoint_every: int = 0
    env: dict = field(default_factory=lambda: {"kind": "grid"})
    shield: ShieldSection = field(default_factory=ShieldSection)
    agent: AgentSection = field(default_factory=AgentSection)
    model: ModelSection = field(default_factory=ModelSection)
    lagrangian: LagrangianSection = field(default_factory=LagrangianSection)
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.total_frames <= 0:
            raise ConfigurationError("total_frames must be positive")
        if self.agent.return_mode not in ("td-lambda", "advantage", "monte-carlo"):
            raise ConfigurationError(f"unknown return mode {self.agent.return_mode!r}")
        if self.shield.route not in ("binomial", "rollout"):
            raise ConfigurationError(f"unknown shield route {self.shield.route!r}")
        if self.lagrangian.mu_rule not in ("monotone", "literal"):
            raise ConfigurationError(f"unknown mu rule {self.lagrangian.mu_rule!r}")
        if self.agent.batch_size <= 0 or self.agent.train_every <= 0 or self.agent.horizon < 1:
            raise ConfigurationError("batch size, train_every and horizon must be positive")

    @property
    def shielded(self) -> bool:
        return self.method in SHIELDED and self.shield.enabled

    @property
    def resolved_cost(self) -> float:
        if self.cost_value is not None:
            return float(self.cost_value)
        return 1.0 if self.method == "LAG" else 10.0

    @property
    def resolved_alpha(self) -> float:
        if self.agent.alpha is not None:
            return float(self.agent.alpha)
        return {"AMBS+PENL": 1.0, "AMBS+PLPG": 0.8, "AMBS+COPT": 1.0}.get(self.method, 0.0)


_SECTIONS = {"shield": ShieldSection, "agent": AgentSection, "model": ModelSection,
             "lagrangian": LagrangianSection}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return doc


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("configuration must be a JSON object")
    doc = dict(doc)
    schema = doc.pop("schema", None)
    if schema != CONFIG_SCHEMA:
        raise ConfigurationError(f"expected schema {CONFIG_SCHEMA!r}, got {schema!r}")
    _build(ExperimentConfig, doc, "config")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _SECTIONS[key](**_build(_SECTIONS[key], value, key))
        else:
            kwargs[key] = value
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    if not isinstance(cfg.env, dict):
        raise ConfigurationError("env must be an object")
    return cfg


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    return from_dict(doc)


SEED_STREAMS = ("init", "env", "act", "shield", "imagine", "safe", "replay", "eval")


def derive_seeds(master: int) -> dict:
    """Counter-based split of the master seed into named sub-stream seeds."""
    children = np.random.SeedSequence(int(master)).spawn(len(SEED_STREAMS))
    return {name: int(child.generate_state(1, dtype=np.uint64)[0])
            for name, child in zip(SEED_STREAMS, children)}


def resolve(cfg: ExperimentConfig) -> dict:
    """Fully populated document, including derived seeds and method defaults."""
    doc = {"schema": CONFIG_SCHEMA, **dataclasses.asdict(cfg)}
    doc["cost_value"] = cfg.resolved_cost
    doc["agent"]["alpha"] = cfg.resolved_alpha
    doc["seeds"] = dict(cfg.seeds) if cfg.seeds else derive_seeds(cfg.seed)
    if doc["shield"]["samples"] is None:
        from .measure import sample_size_approx

        doc["shield"]["samples"] = sample_size_approx(cfg.shield.epsilon, cfg.shield.fail_prob)
    return doc


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)

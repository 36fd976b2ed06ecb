"""Desk-scale labelled navigation environments.

``GridHazardEnv``
    Agent on a W x H grid.  Active goal is one cell of ``goals``; entering
    it pays +1 and a different goal cell becomes active.  Moves may slip
    sideways.  The observation is the integer state index
    ``goal_index * W * H + y * W + x``.
``PointNavEnv``
    Point mass in ``[-w, w]^2`` with velocity actions in ``[-1, 1]^2``.
    Observation is ``[x, y, gx, gy]`` (optionally with Gaussian noise on
    positions).
``ChainWorld``
    Thin wrapper that lets any finite :class:`LabelledMdp` be stepped.

All environments report labels each step and end episodes only at the step
limit.  Layouts can be loaded from ``env-v1`` JSON documents with
:func:`load_layout`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._sampling import RowSampler
from .errors import ConfigurationError
from .logic import Formula, LabelledMdp, eval_formula_masks, parse_formula, step_cost

ENV_SCHEMA = "env-v1"

# north, east, south, west
MOVES = np.array([[0, 1], [1, 0], [0, -1], [-1, 0]])


@dataclass(frozen=True)
class StepResult:
    observation: object
    reward: float
    labels: frozenset
    cost: float
    terminated: bool


@dataclass
class GridHazardEnv:
    width: int = 8
    height: int = 8
    hazards: tuple = ((3, 2), (3, 3), (3, 4), (3, 5), (4, 3), (4, 4))
    goals: tuple = ((1, 3), (6, 3))
    starts: tuple = ((0, 0),)
    start_probs: tuple | None = None
    vases: tuple = ()
    slip: float = 0.05
    episode_limit: int = 200
    cost_value: float = 10.0
    formula_text: str | None = None
    _cell: tuple = field(default=(0, 0), init=False, repr=False)
    _goal: int = field(default=0, init=False, repr=False)
    _t: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        self.hazards = tuple(tuple(int(v) for v in c) for c in self.hazards)
        self.goals = tuple(tuple(int(v) for v in c) for c in self.goals)
        self.starts = tuple(tuple(int(v) for v in c) for c in self.starts)
        self.vases = tuple(tuple(int(v) for v in c) for c in self.vases)
        cells = self.hazards + self.goals + self.starts + self.vases
        for x, y in cells:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ConfigurationError(f"cell {(x, y)} lies outside the grid")
        if not self.goals:
            raise ConfigurationError("grid needs at least one goal cell")
        if set(self.goals) & set(self.hazards):
            raise ConfigurationError("goal cells must not be hazards")
        if set(self.starts) & set(self.hazards):
            raise ConfigurationError("start cells must not be hazards")
        if not 0.0 <= self.slip < 1.0:
            raise ConfigurationError("slip must lie in [0, 1)")
        if self.start_probs is None:
            self.start_probs = tuple([1.0 / len(self.starts)] * len(self.starts))
        if len(self.start_probs) != len(self.starts) or not np.isclose(sum(self.start_probs), 1.0):
            raise ConfigurationError("start_probs must match starts and sum to 1")
        self.formula = parse_formula(self.formula_text or self.default_formula(), self.atoms)
        self._hazard = np.zeros((self.width, self.height), dtype=bool)
        for x, y in self.hazards:
            self._hazard[x, y] = True
        self._vase = np.zeros((self.width, self.height), dtype=bool)
        for x, y in self.vases:
            self._vase[x, y] = True
        self._goal_cell = {c: i for i, c in enumerate(self.goals)}

    @property
    def atoms(self) -> tuple:
        return ("hazard", "goal", "collision") if self.vases else ("hazard", "goal")

    def default_formula(self) -> str:
        return "!hazard & !collision" if self.vases else "!hazard"

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def n_states(self) -> int:
        return self.n_cells * len(self.goals)

    n_actions = 4
    discrete = True

    def encode(self, cell, goal: int) -> int:
        return goal * self.n_cells + cell[1] * self.width + cell[0]

    def decode(self, state: int):
        goal, rest = divmod(int(state), self.n_cells)
        y, x = divmod(rest, self.width)
        return (x, y), goal

    def cell_labels(self, cell) -> frozenset:
        x, y = cell
        labels = set()
        if self._hazard[x, y]:
            labels.add("hazard")
        if self._vase[x, y]:
            labels.add("collision")
        if (x, y) in self._goal_cell:
            labels.add("goal")
        return frozenset(labels)

    def state_labels(self, state: int) -> frozenset:
        return self.cell_labels(self.decode(state)[0])

    def _result(self, reward: float) -> StepResult:
        labels = self.cell_labels(self._cell)
        return StepResult(
            observation=self.encode(self._cell, self._goal),
            reward=reward,
            labels=labels,
            cost=step_cost(labels, self.formula, self.cost_value),
            terminated=self._t >= self.episode_limit,
        )

    def reset(self, rng: np.random.Generator) -> StepResult:
        idx = rng.choice(len(self.starts), p=self.start_probs) if len(self.starts) > 1 else 0
        self._cell = self.starts[idx]
        candidates = [i for i, g in enumerate(self.goals) if g != self._cell] or [0]
        self._goal = candidates[0]
        self._t = 0
        return self._result(0.0)

    def _outcomes(self, cell, action: int):
        """(probability, next cell) pairs for one move."""
        out = [(1.0 - self.slip, self._move(cell, action))]
        if self.slip > 0:
            for lateral in ((action + 1) % 4, (action + 3) % 4):
                out.append((self.slip / 2, self._move(cell, lateral)))
        return out

    def _move(self, cell, action: int):
        x = min(max(cell[0] + MOVES[action][0], 0), self.width - 1)
        y = min(max(cell[1] + MOVES[action][1], 0), self.height - 1)
        return (int(x), int(y))

    def _next_goal(self, goal: int, rng: np.random.Generator | None):
        others = [i for i in range(len(self.goals)) if i != goal] or [goal]
        if rng is None:
            return [(1.0 / len(others), i) for i in others]
        return others[rng.integers(len(others))] if len(others) > 1 else others[0]

    def step(self, action, rng: np.random.Generator) -> StepResult:
        action = int(action)
        if action not in range(4):
            raise ConfigurationError(f"grid action must be in 0..3, got {action}")
        u = rng.random()
        if u < 1.0 - self.slip:
            direction = action
        else:
            direction = (action + 1) % 4 if u < 1.0 - self.slip / 2 else (action + 3) % 4
        self._cell = self._move(self._cell, direction)
        self._t += 1
        reward = 0.0
        if self._cell == self.goals[self._goal]:
            reward = 1.0
            self._goal = self._next_goal(self._goal, rng)
        return self._result(reward)

    def finite_mdp(self) -> LabelledMdp:
        """The exact (S, A, S) model of the grid including goal switching."""
        S = self.n_states
        P = np.zeros((S, 4, S))
        R = np.zeros((S, 4))
        for s in range(S):
            cell, goal = self.decode(s)
            for a in range(4):
                for prob, nxt in self._outcomes(cell, a):
                    if nxt == self.goals[goal]:
                        R[s, a] += prob
                        for q, g in self._next_goal(goal, None):
                            P[s, a, self.encode(nxt, g)] += prob * q
                    else:
                        P[s, a, self.encode(nxt, goal)] += prob
        init = np.zeros(S)
        for cell, p in zip(self.starts, self.start_probs):
            candidates = [i for i, g in enumerate(self.goals) if g != cell] or [0]
            init[self.encode(cell, candidates[0])] += p
        labels = [self.state_labels(s) for s in range(S)]
        return LabelledMdp(P, init, R, labels, self.atoms)

    def layout(self) -> dict:
        return {
            "schema": ENV_SCHEMA,
            "kind": "grid",
            "width": self.width,
            "height": self.height,
            "hazards": [list(c) for c in self.hazards],
            "goals": [list(c) for c in self.goals],
            "starts": [list(c) for c in self.starts],
            "start_probs": list(self.start_probs),
            "vases": [list(c) for c in self.vases],
            "slip": self.slip,
            "episode_limit": self.episode_limit,
            "cost_value": self.cost_value,
            "formula": self.formula_text,
        }


@dataclass
class PointNavEnv:
    half_width: float = 2.0
    hazards: tuple = ((-0.8, 0.6, 0.3), (0.8, -0.6, 0.3), (0.0, 0.0, 0.3), (-0.6, -1.0, 0.3))
    goal_radius: float = 0.3
    vases: tuple = ()
    max_speed: float = 0.1
    episode_limit: int = 200
    observation: str = "full-state"
    noise_std: float = 0.05
    cost_value: float = 10.0
    start: tuple = (-1.5, -1.5)
    formula_text: str | None = None
    _pos: np.ndarray = field(default=None, init=False, repr=False)
    _goal: np.ndarray = field(default=None, init=False, repr=False)
    _t: int = field(default=0, init=False, repr=False)

    obs_dim = 4
    action_dim = 2
    discrete = False

    def __post_init__(self):
        self.hazards = tuple(tuple(float(v) for v in h) for h in self.hazards)
        self.vases = tuple(tuple(float(v) for v in h) for h in self.vases)
        for circle in self.hazards + self.vases:
            if len(circle) != 3 or circle[2] <= 0:
                raise ConfigurationError(f"circle {circle} needs (cx, cy, r>0)")
        if self.goal_radius <= 0 or self.half_width <= 0 or self.max_speed <= 0:
            raise ConfigurationError("goal radius, arena size and speed must be positive")
        if self.observation not in ("full-state", "noisy"):
            raise ConfigurationError(f"unknown observation mode {self.observation!r}")
        self.formula = parse_formula(self.formula_text or self.default_formula(), self.atoms)
        self._hz = np.array(self.hazards).reshape(-1, 3)
        self._vz = np.array(self.vases).reshape(-1, 3)
        if self.inside(self._hz, np.asarray(self.start))[()]:
            raise ConfigurationError("start position lies in a hazard")

    @property
    def atoms(self) -> tuple:
        return ("hazard", "goal", "collision") if self.vases else ("hazard", "goal")

    def default_formula(self) -> str:
        return "!hazard & !collision" if self.vases else "!hazard"

    @staticmethod
    def inside(circles: np.ndarray, pos: np.ndarray) -> np.ndarray:
        """Whether each position (..., 2) lies in any circle."""
        if len(circles) == 0:
            return np.zeros(np.shape(pos)[:-1], dtype=bool)
        d = np.asarray(pos)[..., None, :] - circles[:, :2]
        return ((d ** 2).sum(-1) <= circles[:, 2] ** 2).any(-1)

    def labels_of(self, state) -> frozenset:
        state = np.asarray(state, dtype=float)
        pos, goal = state[:2], state[2:4]
        labels = set()
        if self.inside(self._hz, pos):
            labels.add("hazard")
        if self.inside(self._vz, pos):
            labels.add("collision")
        if np.sum((pos - goal) ** 2) <= self.goal_radius ** 2:
            labels.add("goal")
        return frozenset(labels)

    def hazard_mask(self, states) -> np.ndarray:
        """Vectorised Psi-violation indicator for state arrays (..., 4)."""
        pos = np.asarray(states)[..., :2]
        return self.inside(self._hz, pos) | self.inside(self._vz, pos)

    def satisfies(self, states, formula) -> np.ndarray:
        """Vectorised formula satisfaction over state arrays (..., 4)."""
        s = np.asarray(states, dtype=float)
        pos, goal = s[..., :2], s[..., 2:4]
        masks = {
            "hazard": self.inside(self._hz, pos),
            "collision": self.inside(self._vz, pos),
            "goal": ((pos - goal) ** 2).sum(-1) <= self.goal_radius ** 2,
        }
        return eval_formula_masks(formula, masks)

    def dynamics(self, states, actions) -> np.ndarray:
        """Deterministic successor of state arrays (goal held fixed)."""
        s = np.array(states, dtype=float)
        a = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        s[..., :2] = np.clip(s[..., :2] + a * self.max_speed, -self.half_width, self.half_width)
        return s

    def transition_sampler(self, policy):
        """Successor sampler of the policy-induced chain; ``policy.sample`` draws actions."""
        def sampler(states, rng):
            actions, _ = policy.sample(states, rng)
            return self.dynamics(states, actions)
        return sampler

    def _sample_goal(self, rng):
        blocked = np.concatenate([self._hz, self._vz]) if len(self._vz) else self._hz
        for _ in range(1000):
            g = rng.uniform(-self.half_width + self.goal_radius, self.half_width - self.goal_radius, 2)
            grown = blocked.copy()
            grown[:, 2] += self.goal_radius
            if not self.inside(grown, g) and np.sum((g - self._pos) ** 2) > (3 * self.goal_radius) ** 2:
                return g
        raise ConfigurationError("could not place a goal; layout too crowded")

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self._pos, self._goal])

    def _observe(self, rng):
        obs = self.state.copy()
        if self.observation == "noisy":
            obs += rng.normal(0.0, self.noise_std, 4)
        return obs

    def _result(self, reward, rng) -> StepResult:
        labels = self.labels_of(self.state)
        return StepResult(
            observation=self._observe(rng),
            reward=reward,
            labels=labels,
            cost=step_cost(labels, self.formula, self.cost_value),
            terminated=self._t >= self.episode_limit,
        )

    def reset(self, rng: np.random.Generator) -> StepResult:
        self._pos = np.array(self.start, dtype=float)
        self._goal = self._sample_goal(rng)
        self._t = 0
        return self._result(0.0, rng)

    def step(self, action, rng: np.random.Generator) -> StepResult:
        action = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
        self._pos = np.clip(self._pos + action * self.max_speed, -self.half_width, self.half_width)
        self._t += 1
        reward = 0.0
        if np.sum((self._pos - self._goal) ** 2) <= self.goal_radius ** 2:
            reward = 1.0
            self._goal = self._sample_goal(rng)
        return self._result(reward, rng)

    def layout(self) -> dict:
        return {
            "schema": ENV_SCHEMA,
            "kind": "point",
            "half_width": self.half_width,
            "hazards": [list(h) for h in self.hazards],
            "goal_radius": self.goal_radius,
            "vases": [list(v) for v in self.vases],
            "max_speed": self.max_speed,
            "episode_limit": self.episode_limit,
            "observation": self.observation,
            "noise_std": self.noise_std,
            "cost_value": self.cost_value,
            "start": list(self.start),
            "formula": self.formula_text,
        }


@dataclass
class ChainWorld:
    """Step through an explicit finite labelled MDP (at most 16 states)."""

    mdp: LabelledMdp
    formula: Formula
    episode_limit: int = 50
    cost_value: float = 10.0
    _state: int = field(default=0, init=False, repr=False)
    _t: int = field(default=0, init=False, repr=False)

    discrete = True

    def __post_init__(self):
        if self.mdp.n_states > 16:
            raise ConfigurationError("ChainWorld holds at most 16 states")
        self._rows = RowSampler(self.mdp.transition)

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    def state_labels(self, s):
        return self.mdp.labels[int(s)]

    def _result(self, reward):
        labels = self.mdp.labels[self._state]
        return StepResult(self._state, reward, labels,
                          step_cost(labels, self.formula, self.cost_value),
                          self._t >= self.episode_limit)

    def reset(self, rng):
        self._state = int(rng.choice(self.mdp.n_states, p=self.mdp.initial))
        self._t = 0
        return self._result(0.0)

    def step(self, action, rng):
        action = int(action)
        if action not in range(self.mdp.n_actions):
            raise ConfigurationError(f"action {action} outside 0..{self.mdp.n_actions - 1}")
        reward = float(self.mdp.reward[self._state, action])
        self._state = int(self._rows.sample(self._rows.flat_row(self._state, action), rng))
        self._t += 1
        return self._result(reward)

    def finite_mdp(self):
        return self.mdp


def two_atom_variant(env, vases=None):
    """Copy of ``env`` with vase obstacles emitting ``collision``.

    Psi becomes ``!hazard & !collision``.  Default vases are placed next to
    (and, for the grid, overlapping one of) the hazards.
    """
    if isinstance(env, GridHazardEnv):
        if vases is None:
            free = [(x, y) for x in range(env.width) for y in range(env.height)
                    if (x, y) not in env.goals and (x, y) not in env.starts
                    and (x, y) not in env.hazards]
            vases = (env.hazards[0],) + tuple(free[len(free) // 2: len(free) // 2 + 2])
        return replace(env, vases=tuple(vases), formula_text=None)
    if isinstance(env, PointNavEnv):
        if vases is None:
            cx, cy, r = env.hazards[0]
            vases = ((cx + r, cy, 0.15), (1.2, 1.2, 0.15))
        return replace(env, vases=tuple(vases), formula_text=None)
    raise ConfigurationError(f"no two-atom variant for {type(env).__name__}")


def _random_cells(rng, width, height, count, exclude):
    cells = [(x, y) for x in range(width) for y in range(height) if (x, y) not in exclude]
    pick = rng.choice(len(cells), size=count, replace=False)
    return tuple(cells[i] for i in sorted(pick))


_GRID_KEYS = {"schema", "kind", "width", "height", "hazards", "goals", "starts", "start_probs",
              "vases", "slip", "episode_limit", "cost_value", "formula", "n_hazards", "seed"}
_POINT_KEYS = {"schema", "kind", "half_width", "hazards", "goal_radius", "vases", "max_speed",
               "episode_limit", "observation", "noise_std", "cost_value", "start", "formula",
               "n_hazards", "hazard_radius", "seed"}


def make_env(doc: dict):
    """Build an environment from an ``env-v1`` layout dictionary.

    Hazards may be listed explicitly or generated from ``n_hazards`` and
    ``seed``.  Unknown keys are rejected.
    """
    if doc.get("schema", ENV_SCHEMA) != ENV_SCHEMA:
        raise ConfigurationError(f"unsupported layout schema {doc.get('schema')!r}")
    kind = doc.get("kind", "grid")
    allowed = {"grid": _GRID_KEYS, "point": _POINT_KEYS}.get(kind)
    if allowed is None:
        raise ConfigurationError(f"unknown environment kind {kind!r}")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(f"unknown layout keys {sorted(unknown)}")
    args = {k: v for k, v in doc.items() if k not in {"schema", "kind", "n_hazards", "seed",
                                                   "hazard_radius", "formula"}}
    if doc.get("formula") is not None:
        args["formula_text"] = doc["formula"]
    rng = np.random.default_rng(doc.get("seed", 0))
    if kind == "grid":
        if "hazards" not in doc and "n_hazards" in doc:
            w, h = doc.get("width", 8), doc.get("height", 8)
            goals = tuple(map(tuple, doc.get("goals", GridHazardEnv.goals)))
            starts = tuple(map(tuple, doc.get("starts", GridHazardEnv.starts)))
            args["hazards"] = _random_cells(rng, w, h, doc["n_hazards"], set(goals) | set(starts))
        for key in ("hazards", "goals", "starts", "vases"):
            if key in args:
                args[key] = tuple(tuple(c) for c in args[key])
        if args.get("start_probs") is not None:
            args["start_probs"] = tuple(args["start_probs"])
        return GridHazardEnv(**args)
    if "hazards" not in doc and "n_hazards" in doc:
        hw = doc.get("half_width", 2.0)
        r = doc.get("hazard_radius", 0.3)
        centers = rng.uniform(-hw + r, hw - r, size=(doc["n_hazards"], 2))
        args["hazards"] = tuple((float(x), float(y), r) for x, y in centers)
    for key in ("hazards", "vases"):
        if key in args:
            args[key] = tuple(tuple(c) for c in args[key])
    if "start" in args:
        args["start"] = tuple(args["start"])
    return PointNavEnv(**args)


def load_layout(path) -> object:
    with open(Path(path)) as fh:
        return make_env(json.load(fh))

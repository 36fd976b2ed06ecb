"""Labelled decision processes, propositional safety formulas and traces.

Formulas are small immutable trees over three node kinds (atom, negation,
conjunction).  Implication exists only in the text syntax and in
:func:`implies`; both rewrite ``a -> b`` to ``!(a & !b)``.

Text syntax::

    !a          negation
    a & b       conjunction
    a -> b      implication (right associative, lowest precedence)
    ( ... )     grouping
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from ._sampling import RowSampler
from .errors import ConfigurationError, PreconditionError


@dataclass(frozen=True)
class Atom:
    name: str

    def __post_init__(self):
        if not self.name:
            raise ConfigurationError("atom name must be nonempty")

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Not:
    operand: "Formula"

    def __str__(self):
        return f"!{_wrap(self.operand)}"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"

    def __str__(self):
        return f"{_wrap(self.left)} & {_wrap(self.right)}"


Formula = Union[Atom, Not, And]


def _wrap(f: Formula) -> str:
    return str(f) if isinstance(f, (Atom, Not)) else f"({f})"


def implies(a: Formula, b: Formula) -> Formula:
    return Not(And(a, Not(b)))


def atoms_of(f: Formula) -> frozenset[str]:
    if isinstance(f, Atom):
        return frozenset([f.name])
    if isinstance(f, Not):
        return atoms_of(f.operand)
    return atoms_of(f.left) | atoms_of(f.right)


_TOKEN = re.compile(r"\s*(->|[!&()]|[A-Za-z_][A-Za-z0-9_]*)")


def _tokenize(text: str) -> list[str]:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            raise ConfigurationError(f"unexpected character at {pos} in {text!r}")
        tokens.append(match.group(1))
        pos = match.end()
    return tokens


def parse_formula(text: str, atoms: Iterable[str] | None = None) -> Formula:
    """Parse the text syntax into a formula tree.

    If ``atoms`` is given, every atom in the formula must belong to it.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take(expected=None):
        nonlocal pos
        tok = peek()
        if tok is None or (expected is not None and tok != expected):
            raise ConfigurationError(f"expected {expected or 'token'} in {text!r}")
        pos += 1
        return tok

    def implication():
        left = conjunction()
        if peek() == "->":
            take("->")
            return implies(left, implication())
        return left

    def conjunction():
        node = unary()
        while peek() == "&":
            take("&")
            node = And(node, unary())
        return node

    def unary():
        tok = peek()
        if tok == "!":
            take("!")
            return Not(unary())
        if tok == "(":
            take("(")
            node = implication()
            take(")")
            return node
        if tok is None or tok in {"->", "&", ")"}:
            raise ConfigurationError(f"missing operand in {text!r}")
        return Atom(take())

    if not tokens:
        raise ConfigurationError("empty formula")
    formula = implication()
    if pos != len(tokens):
        raise ConfigurationError(f"trailing input {tokens[pos:]} in {text!r}")
    if atoms is not None:
        check_atoms(formula, atoms)
    return formula


def check_atoms(f: Formula, atoms: Iterable[str]) -> None:
    unknown = atoms_of(f) - frozenset(atoms)
    if unknown:
        raise ConfigurationError(f"unknown atoms {sorted(unknown)}")


def eval_formula(f: Formula, labels: Iterable[str], atoms: Iterable[str] | None = None) -> bool:
    """Propositional satisfaction: an atom holds iff it is in ``labels``."""
    labels = frozenset(labels)
    if atoms is not None:
        check_atoms(f, atoms)
    return _eval(f, labels)


def _eval(f: Formula, labels: frozenset) -> bool:
    if isinstance(f, Atom):
        return f.name in labels
    if isinstance(f, Not):
        return not _eval(f.operand, labels)
    return _eval(f.left, labels) and _eval(f.right, labels)


def eval_formula_masks(f: Formula, masks: dict) -> np.ndarray:
    """Vectorised satisfaction given one boolean array per atom."""
    if isinstance(f, Atom):
        if f.name not in masks:
            raise ConfigurationError(f"unknown atom {f.name!r}")
        return np.asarray(masks[f.name], dtype=bool)
    if isinstance(f, Not):
        return ~eval_formula_masks(f.operand, masks)
    return eval_formula_masks(f.left, masks) & eval_formula_masks(f.right, masks)


def step_cost(labels: Iterable[str], f: Formula, cost_value: float) -> float:
    """0 if the labels satisfy ``f``, otherwise ``cost_value``."""
    if not cost_value > 0:
        raise ConfigurationError(f"cost value must be positive, got {cost_value}")
    return 0.0 if _eval(f, frozenset(labels)) else float(cost_value)


@dataclass(frozen=True)
class Trace:
    """A finite path ``s_0 .. s_n`` with per-state annotations.

    ``rewards[i]`` is the reward received on arriving in ``states[i]`` and
    ``costs[i]`` the cost of ``states[i]``; index 0 carries the anchor.
    """

    states: tuple
    labels: tuple
    rewards: tuple
    costs: tuple
    continues: tuple

    def __post_init__(self):
        n = len(self.states)
        for name in ("labels", "rewards", "costs", "continues"):
            if len(getattr(self, name)) != n:
                raise PreconditionError(f"trace field {name} has length != {n}")

    def __len__(self):
        return len(self.states)


def trace_satisfies(trace: Trace, f: Formula, n: int) -> bool:
    """Bounded safety: positions ``0..n`` all satisfy ``f``."""
    if len(trace) < n + 1:
        raise PreconditionError(f"trace of length {len(trace)} is shorter than n+1={n + 1}")
    return all(_eval(f, frozenset(trace.labels[i])) for i in range(n + 1))


@dataclass(frozen=True)
class LabelledMdp:
    """Finite labelled MDP.

    ``transition[s, a, s']`` is p(s'|s,a); ``labels[s]`` is L(s).
    """

    transition: np.ndarray
    initial: np.ndarray
    reward: np.ndarray
    labels: tuple
    atoms: tuple
    discount: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float))
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=float))
        object.__setattr__(self, "labels", tuple(frozenset(x) for x in self.labels))
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ConfigurationError(f"transition must have shape (S, A, S), got {p.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(axis=2), 1.0, atol=1e-12):
            raise ConfigurationError("transition rows must be distributions")
        if not np.isclose(self.initial.sum(), 1.0, atol=1e-12) or np.any(self.initial < 0):
            raise ConfigurationError("initial distribution must sum to 1")
        if self.reward.shape != p.shape[:2]:
            raise ConfigurationError("reward must have shape (S, A)")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigurationError("discount must lie in (0, 1]")
        if len(self.labels) != p.shape[0]:
            raise ConfigurationError("need one label set per state")
        stray = frozenset().union(*self.labels) - frozenset(self.atoms)
        if stray:
            raise ConfigurationError(f"labels use atoms outside the universe: {sorted(stray)}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def safe_mask(self, f: Formula) -> np.ndarray:
        check_atoms(f, self.atoms)
        return np.array([_eval(f, lab) for lab in self.labels])


@dataclass(frozen=True)
class TransitionSystem:
    """Markov kernel over states, finite (``kernel``) or sampled (``sampler``).

    ``sampler(states, rng)`` must return one successor per entry.  Finite
    systems carry one label set per state in ``labels``; sampled systems
    carry a callable ``labels(states, formula) -> bool array`` of per-state
    satisfaction instead.
    """

    kernel: np.ndarray | None = None
    sampler: Callable | None = None
    labels: tuple | None = None
    origin: str = "exact"
    _rows: RowSampler | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if (self.kernel is None) == (self.sampler is None):
            raise ConfigurationError("give exactly one of kernel or sampler")
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=float)
            if k.ndim != 2 or k.shape[0] != k.shape[1]:
                raise ConfigurationError("kernel must be square")
            if np.any(k < 0) or not np.allclose(k.sum(axis=1), 1.0, atol=1e-12):
                raise ConfigurationError("kernel rows must be distributions")
            object.__setattr__(self, "kernel", k)
            object.__setattr__(self, "_rows", RowSampler(k))

    @property
    def finite(self) -> bool:
        return self.kernel is not None

    @property
    def n_states(self) -> int:
        if self.kernel is None:
            raise PreconditionError("sampled transition systems have no finite state count")
        return self.kernel.shape[0]

    def step(self, states, rng: np.random.Generator) -> np.ndarray:
        if self.kernel is not None:
            return self._rows.sample(states, rng)
        return self.sampler(states, rng)

    def sample_paths(self, anchor, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
        """``m`` independent paths ``s_0..s_n`` from ``anchor``, shape (m, n+1)."""
        anchor = np.asarray(anchor)
        paths = [np.broadcast_to(anchor, (m,) + anchor.shape).copy()]
        for _ in range(n):
            paths.append(np.asarray(self.step(paths[-1], rng)))
        return np.stack(paths, axis=1)


def policy_matrix(policy, n_states: int, n_actions: int) -> np.ndarray:
    """Action probabilities as an (S, A) matrix from an array or policy object."""
    probs = policy.probs() if hasattr(policy, "probs") else policy
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs = np.eye(n_actions)[probs.astype(int)]
    if probs.shape != (n_states, n_actions):
        raise ConfigurationError(
            f"policy of shape {probs.shape} does not match MDP ({n_states}, {n_actions})"
        )
    return probs


def induce_transition_system(mdp: LabelledMdp, policy) -> TransitionSystem:
    """T(s'|s) = sum_a pi(a|s) p(s'|s,a).

    ``policy`` is an (S, A) probability matrix, an (S,) array of deterministic
    actions, or an object with ``probs()``.  For a continuous environment pass
    an object exposing ``transition_sampler(policy)`` instead of an MDP.
    """
    if not isinstance(mdp, LabelledMdp):
        if hasattr(mdp, "transition_sampler"):
            return TransitionSystem(sampler=mdp.transition_sampler(policy),
                                    labels=mdp.satisfies, origin="exact")
        raise ConfigurationError(f"cannot induce a transition system from {type(mdp).__name__}")
    pi = policy_matrix(policy, mdp.n_states, mdp.n_actions)
    kernel = np.einsum("sa,sat->st", pi, mdp.transition)
    # renormalise away accumulated rounding so rows sum to 1 within 1e-12
    kernel /= kernel.sum(axis=1, keepdims=True)
    return TransitionSystem(kernel=kernel, labels=mdp.labels, origin="exact")


def formula_mask(labels: Sequence, f: Formula) -> np.ndarray:
    """Boolean array: does ``labels[s]`` satisfy ``f``."""
    return np.array([_eval(f, frozenset(lab)) for lab in labels], dtype=bool)

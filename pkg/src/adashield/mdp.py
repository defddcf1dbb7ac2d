"""Sparse MDP and Markov-chain core.

States are hashable composite keys (tuples of queue values plus a command
index by convention, but any hashable works). Transition maps are sparse
dictionaries. The module also provides an exact long-run-average-cost
oracle for unichain Markov chains, used throughout the test suite to
cross-check the mean-payoff solver.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping

import numpy as np

State = Hashable
Action = Hashable
Policy = Mapping[State, Action]

#: Above this many states the stationary solve switches from a direct
#: linear solve to damped power iteration.
DIRECT_SOLVE_LIMIT = 2000

_SUM_TOL = 1e-9


class MdpError(Exception):
    """Base class for errors raised by this module."""


class ActionNotEnabledError(MdpError):
    """An action was used in a state where it is not enabled."""


class PolicyUndefinedError(MdpError):
    """A policy has no choice for a state reachable under it."""


class NotUnichainError(MdpError):
    """The stationary distribution is not unique (multiple recurrent classes)."""


class NoConvergenceError(MdpError):
    """An iterative solve did not reach the requested residual."""


@dataclass(frozen=True)
class SparseMdp:
    """Finite-support MDP: initial state, per-(state, action) distributions.

    ``transitions`` maps ``(s, a)`` to a dict ``{s': p}``; ``action_sets``
    maps states to the ordered tuple of enabled actions. Action order is
    significant: the solver's tie-breaking refers to it.
    """

    initial: State
    transitions: Mapping[tuple[State, Action], Mapping[State, float]]
    action_sets: Mapping[State, tuple[Action, ...]]

    def actions(self, s: State) -> tuple[Action, ...]:
        return self.action_sets.get(s, ())

    def distribution(self, s: State, a: Action) -> Mapping[State, float]:
        if a not in self.actions(s):
            raise ActionNotEnabledError(f"action {a!r} not enabled in state {s!r}")
        return self.transitions[(s, a)]

    def states(self) -> list[State]:
        """All states mentioned in action sets or as successors."""
        seen: dict[State, None] = {self.initial: None}
        for s in self.action_sets:
            seen.setdefault(s, None)
        for dist in self.transitions.values():
            for t in dist:
                seen.setdefault(t, None)
        return list(seen)


@dataclass(frozen=True)
class CostModel:
    """Two cost functions and their weight.

    ``c1`` is the performance cost, ``c2`` the interference cost; the
    solved objective is the long-run average of
    ``gamma * c1 + (1 - gamma) * c2``.
    """

    c1: Callable[[State, Action], float]
    c2: Callable[[State, Action], float]
    gamma: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")


def weighted_cost(cm: CostModel, s: State, a: Action, mdp: SparseMdp | None = None) -> float:
    """Weighted per-step cost ``gamma*c1(s,a) + (1-gamma)*c2(s,a)``.

    When ``mdp`` is given, ``a`` must be enabled in ``s``. Non-finite
    component costs are rejected.
    """
    if mdp is not None and a not in mdp.actions(s):
        raise ActionNotEnabledError(f"action {a!r} not enabled in state {s!r}")
    x1 = float(cm.c1(s, a))
    x2 = float(cm.c2(s, a))
    if not (math.isfinite(x1) and math.isfinite(x2)):
        raise ValueError(f"non-finite cost at ({s!r}, {a!r}): c1={x1}, c2={x2}")
    if x1 < 0.0 or x2 < 0.0:
        raise ValueError(f"negative cost at ({s!r}, {a!r}): c1={x1}, c2={x2}")
    return cm.gamma * x1 + (1.0 - cm.gamma) * x2


def validate_mdp(mdp: SparseMdp, cost_model: CostModel | None = None) -> list[str]:
    """Collect invariant violations; empty list means the MDP is well formed.

    Checks distribution sums, probability ranges, non-empty supports,
    non-empty action sets, and consistency between ``transitions`` and
    ``action_sets``. With a cost model, also checks costs are finite and
    non-negative on every enabled pair.
    """
    problems: list[str] = []
    states_with_entries: set[State] = set()
    for (s, a), dist in mdp.transitions.items():
        states_with_entries.add(s)
        if a not in mdp.actions(s):
            problems.append(f"({s!r}, {a!r}): transition entry for action not in action set")
        if not dist:
            problems.append(f"({s!r}, {a!r}): empty successor support")
            continue
        total = 0.0
        for t, p in dist.items():
            if not math.isfinite(p) or p < 0.0 or p > 1.0:
                problems.append(f"({s!r}, {a!r}) -> {t!r}: probability {p} outside [0, 1]")
            total += p
        if abs(total - 1.0) > _SUM_TOL:
            problems.append(f"({s!r}, {a!r}): distribution sums to {total:.12g}")
    for s, acts in mdp.action_sets.items():
        if len(acts) < 1:
            problems.append(f"{s!r}: |A(s)| >= 1 violated")
        for a in acts:
            if (s, a) not in mdp.transitions:
                problems.append(f"({s!r}, {a!r}): enabled action has no distribution")
    if states_with_entries and mdp.initial not in mdp.action_sets:
        problems.append(f"initial state {mdp.initial!r} has no action set")
    if cost_model is not None:
        for (s, a) in mdp.transitions:
            try:
                weighted_cost(cost_model, s, a)
            except ValueError as exc:
                problems.append(str(exc))
    return problems


@dataclass(frozen=True)
class MarkovChain:
    """Markov chain with a per-state step cost (an MDP with choices resolved)."""

    initial: State
    transitions: Mapping[State, Mapping[State, float]]
    step_cost: Mapping[State, float] = field(default_factory=dict)


def induce_chain(mdp: SparseMdp, pi: Policy, cm: CostModel) -> MarkovChain:
    """Apply a memoryless deterministic policy to an MDP.

    Only states reachable from the initial state under ``pi`` are kept.
    Raises :class:`PolicyUndefinedError` if a reachable state has no
    policy choice.
    """
    transitions: dict[State, Mapping[State, float]] = {}
    costs: dict[State, float] = {}
    frontier = deque([mdp.initial])
    while frontier:
        s = frontier.popleft()
        if s in transitions:
            continue
        if s not in pi:
            raise PolicyUndefinedError(f"policy undefined at reachable state {s!r}")
        a = pi[s]
        dist = mdp.distribution(s, a)
        transitions[s] = dict(dist)
        costs[s] = weighted_cost(cm, s, a)
        for t in dist:
            if t not in transitions:
                frontier.append(t)
    return MarkovChain(initial=mdp.initial, transitions=transitions, step_cost=costs)


def _ordered_states(chain: MarkovChain) -> list[State]:
    """States reachable from the initial state, in BFS order."""
    order: dict[State, None] = {}
    frontier = deque([chain.initial])
    while frontier:
        s = frontier.popleft()
        if s in order:
            continue
        order[s] = None
        for t in chain.transitions.get(s, {}):
            if t not in order:
                frontier.append(t)
    return list(order)


def stationary_distribution(
    chain: MarkovChain,
    *,
    tol: float = 1e-12,
    max_iter: int = 1_000_000,
) -> dict[State, float]:
    """Unique stationary distribution of a unichain Markov chain.

    Direct solve of ``mu P = mu, sum(mu) = 1`` up to
    :data:`DIRECT_SOLVE_LIMIT` states; damped power iteration (which has
    the same fixed point and also converges on periodic chains) above
    that. Raises :class:`NotUnichainError` when the solution is singular
    or ambiguous.
    """
    states = _ordered_states(chain)
    n = len(states)
    index = {s: i for i, s in enumerate(states)}
    for s in states:
        dist = chain.transitions.get(s)
        if not dist:
            raise NotUnichainError(f"state {s!r} has no outgoing distribution")
        total = sum(dist.values())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"distribution of {s!r} sums to {total:.12g}")

    if n <= DIRECT_SOLVE_LIMIT:
        P = np.zeros((n, n))
        for s, dist in chain.transitions.items():
            if s not in index:
                continue
            i = index[s]
            for t, p in dist.items():
                P[i, index[t]] += p
        A = P.T - np.eye(n)
        A[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        try:
            mu = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise NotUnichainError(f"stationary solve singular: {exc}") from exc
        residual = float(np.abs(mu @ P - mu).max())
        if residual > 1e-8 or mu.min() < -1e-8:
            raise NotUnichainError(
                f"stationary solve ambiguous (residual {residual:.3g}, min {mu.min():.3g})"
            )
        mu = np.clip(mu, 0.0, None)
        mu /= mu.sum()
        return {s: float(mu[index[s]]) for s in states}

    # Sparse path: damped iteration mu <- mu (I + P) / 2.
    from scipy import sparse

    rows, cols, vals = [], [], []
    for s, dist in chain.transitions.items():
        if s not in index:
            continue
        i = index[s]
        for t, p in dist.items():
            rows.append(i)
            cols.append(index[t])
            vals.append(p)
    P_sp = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mu = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = 0.5 * mu + 0.5 * (P_sp.T @ mu)
        if float(np.abs(P_sp.T @ nxt - nxt).sum()) < tol:
            nxt /= nxt.sum()
            return {s: float(nxt[index[s]]) for s in states}
        mu = nxt
    raise NoConvergenceError(f"power iteration did not reach residual {tol} in {max_iter} steps")


def long_run_average_cost(chain: MarkovChain, *, tol: float = 1e-12) -> float:
    """Exact long-run average cost ``sum_s mu(s) * step_cost(s)``.

    The chain must be unichain; this is the oracle the solver tests are
    checked against.
    """
    mu = stationary_distribution(chain, tol=tol)
    total = 0.0
    for s, w in mu.items():
        c = float(chain.step_cost.get(s, 0.0))
        if not math.isfinite(c):
            raise ValueError(f"non-finite step cost at {s!r}")
        total += w * c
    return total

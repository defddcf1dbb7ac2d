"""Finite domain-constrained abstraction of the infinite queue-state MDP.

Unbounded state variables are clamped at per-variable cut-off values;
states whose variables exceed a cut-off are lumped into the boundary
state, and the concrete transition probabilities into a lumped state are
summed. The command variable is never cut off. Refinement raises cut-offs
to the componentwise maximum of recently observed states, so the
abstraction grows exactly where traffic actually went.

The built abstraction is stored in flat arrays (rows grouped by state)
so the solver can sweep it without per-transition Python overhead; a
dictionary-backed :class:`~adashield.mdp.SparseMdp` view is available for
cross-checks at small scale.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import Action, SparseMdp, State

DEFAULT_TRANSITION_BUDGET = 5_000_000


class AbstractionError(Exception):
    pass


class StateSpaceBudgetError(AbstractionError):
    """Reachable abstraction exceeds the transition budget (cut-offs too large)."""


class EstimatorStructureError(AbstractionError):
    """Probability source and successor template disagree on candidate counts."""


def validate_cutoff(cutoff: Sequence[int]) -> tuple[int, ...]:
    k = tuple(int(v) for v in cutoff)
    if not k or any(v < 1 for v in k):
        raise ValueError(f"cut-off entries must be >= 1, got {k}")
    return k


def abstract_state(state: State, cutoff: Sequence[int]) -> State:
    """Clamp abstractable variables at their cut-offs; the command rides along.

    Idempotent, and the identity on states already below every cut-off.
    """
    vs = state
    n = len(cutoff)
    return tuple(v if v <= k else k for v, k in zip(vs, cutoff)) + tuple(vs[n:])


class ObservationWindow:
    """Multiset of the states observed in the last ``window_length`` steps."""

    def __init__(self, window_length: int):
        if window_length < 1:
            raise ValueError("window_length must be >= 1")
        self.window_length = window_length
        self._states: deque[State] = deque(maxlen=window_length)

    def add(self, state: State) -> None:
        self._states.append(state)

    def __len__(self) -> int:
        return len(self._states)

    def states(self) -> list[State]:
        return list(self._states)

    def variable_maxima(self, n_vars: int) -> tuple[int, ...] | None:
        """Componentwise maximum of the first ``n_vars`` variables, or None if empty."""
        if not self._states:
            return None
        maxima = [0] * n_vars
        for s in self._states:
            for j in range(n_vars):
                if s[j] > maxima[j]:
                    maxima[j] = s[j]
        return tuple(maxima)


def refine_cutoff(
    cutoff: Sequence[int], window: ObservationWindow
) -> tuple[tuple[int, ...], bool]:
    """Raise each cut-off to the maximum value observed in the window.

    Returns the (possibly identical) new cut-off and whether anything
    grew. An empty window leaves the cut-off unchanged. Refinement never
    lowers a cut-off, so over a run the function is componentwise
    non-decreasing.
    """
    k = validate_cutoff(cutoff)
    maxima = window.variable_maxima(len(k))
    if maxima is None:
        return k, False
    new_k = tuple(max(kj, mj) for kj, mj in zip(k, maxima))
    return new_k, new_k != k


@dataclass
class AbstractMdp:
    """Clamped finite MDP in row-grouped sparse-array form.

    ``states`` lists abstract states in discovery order; rows are
    (state, action) pairs grouped contiguously per state in action order.
    ``state_row_ptr`` delimits each state's rows, ``col_ptr`` each row's
    successor entries.
    """

    states: list[State]
    index: dict[State, int]
    actions: tuple[Action, ...]
    row_state: np.ndarray
    row_action: np.ndarray
    state_row_ptr: np.ndarray
    col_ptr: np.ndarray
    col_idx: np.ndarray
    probs: np.ndarray
    cutoff: tuple[int, ...]
    build_step: int = 0
    source_label: str = ""
    initial_index: int = 0
    states_array: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_rows(self) -> int:
        return len(self.row_state)

    @property
    def n_transitions(self) -> int:
        return len(self.col_idx)

    @property
    def initial(self) -> State:
        return self.states[self.initial_index]

    def state_vars(self) -> np.ndarray:
        """States as an (n_states, width) int array (cached)."""
        if self.states_array is None:
            self.states_array = np.asarray(self.states, dtype=np.int64)
        return self.states_array

    def distribution(self, s: State, a: Action) -> dict[State, float]:
        i = self.index[s]
        ai = self.actions.index(a)
        for r in range(self.state_row_ptr[i], self.state_row_ptr[i + 1]):
            if self.row_action[r] == ai:
                lo, hi = self.col_ptr[r], self.col_ptr[r + 1]
                return {
                    self.states[c]: float(p)
                    for c, p in zip(self.col_idx[lo:hi], self.probs[lo:hi])
                }
        raise KeyError((s, a))

    def validate(self) -> list[str]:
        """Distribution sums, probability ranges, non-empty supports."""
        problems: list[str] = []
        sums = np.add.reduceat(self.probs, self.col_ptr[:-1])
        widths = np.diff(self.col_ptr)
        if np.any(widths == 0):
            for r in np.flatnonzero(widths == 0):
                problems.append(f"row {r}: empty successor support")
            sums = sums[widths > 0]
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
        for r in bad[:20]:
            problems.append(f"row {r}: distribution sums to {sums[r]:.12g}")
        if self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0 + 1e-12):
            problems.append("probability outside [0, 1]")
        return problems

    def to_sparse_mdp(self) -> SparseMdp:
        """Dictionary-backed view for the exact-oracle and validation paths."""
        transitions: dict[tuple[State, Action], dict[State, float]] = {}
        action_sets: dict[State, tuple[Action, ...]] = {}
        for i, s in enumerate(self.states):
            acts = []
            for r in range(self.state_row_ptr[i], self.state_row_ptr[i + 1]):
                a = self.actions[self.row_action[r]]
                acts.append(a)
                lo, hi = self.col_ptr[r], self.col_ptr[r + 1]
                transitions[(s, a)] = {
                    self.states[c]: float(p)
                    for c, p in zip(self.col_idx[lo:hi], self.probs[lo:hi])
                }
            action_sets[s] = tuple(acts)
        return SparseMdp(initial=self.initial, transitions=transitions, action_sets=action_sets)

    def export_explicit(self, costs: Callable[[State, Action], tuple[float, float]] | None = None) -> str:
        """Explicit-transitions text dump for cross-checking with external tools.

        One line per transition: ``src action dst prob c1 c2`` (ids refer
        to the state table emitted as leading comments).
        """
        lines = [f"# states {self.n_states} actions {len(self.actions)} cutoff {self.cutoff}"]
        for i, s in enumerate(self.states):
            lines.append(f"# state {i} {s}")
        for i, s in enumerate(self.states):
            for r in range(self.state_row_ptr[i], self.state_row_ptr[i + 1]):
                ai = int(self.row_action[r])
                a = self.actions[ai]
                c1 = c2 = 0.0
                if costs is not None:
                    c1, c2 = costs(s, a)
                lo, hi = self.col_ptr[r], self.col_ptr[r + 1]
                for c, p in zip(self.col_idx[lo:hi], self.probs[lo:hi]):
                    lines.append(f"{i} {ai} {int(c)} {p!r} {c1!r} {c2!r}")
        return "\n".join(lines) + "\n"


def _candidate_array(template, s: State, a: Action, cands: tuple[State, ...]) -> np.ndarray:
    arr_fn = getattr(template, "candidates_array", None)
    if arr_fn is not None:
        return arr_fn(s, a)
    return np.asarray(cands, dtype=np.int64)


def build_abstraction(
    source,
    template,
    cutoff: Sequence[int],
    initial: State,
    actions: tuple[Action, ...] = (0, 1),
    *,
    budget: int = DEFAULT_TRANSITION_BUDGET,
    build_step: int = 0,
    source_label: str = "",
) -> AbstractMdp:
    """Build the clamped abstraction reachable from the clamped initial state.

    For every reachable abstract state and every action, the template is
    evaluated at the abstract state, each candidate successor is clamped,
    and the probabilities of candidates that clamp to the same abstract
    successor are summed. ``source`` must provide ``estimate(s, a)``
    aligned with ``template.candidates(s, a)``. Every action in
    ``actions`` is enabled in every state.

    Raises :class:`StateSpaceBudgetError` once more than ``budget``
    transition entries have been generated and
    :class:`EstimatorStructureError` on candidate-count mismatches.
    """
    k = validate_cutoff(cutoff)
    n_vars = len(k)
    kvec = np.asarray(k, dtype=np.int64)
    actions = tuple(actions)

    s0 = abstract_state(initial, k)
    index: dict[State, int] = {s0: 0}
    states: list[State] = [s0]
    row_state: list[int] = []
    row_action: list[int] = []
    col_counts: list[int] = []
    col_idx_parts: list[np.ndarray] = []
    prob_parts: list[list[float]] = []
    total_entries = 0

    frontier = deque([0])
    while frontier:
        i = frontier.popleft()
        s = states[i]
        for ai, a in enumerate(actions):
            cands = template.candidates(s, a)
            probs = np.asarray(source.estimate(s, a), dtype=np.float64)
            if probs.shape != (len(cands),):
                raise EstimatorStructureError(
                    f"estimate length {probs.shape} != {len(cands)} candidates at ({s!r}, {a!r})"
                )
            arr = _candidate_array(template, s, a, cands)
            clamped = arr.copy()
            np.minimum(clamped[:, :n_vars], kvec, out=clamped[:, :n_vars])
            agg: dict[State, float] = {}
            for row, p in zip(map(tuple, clamped.tolist()), probs.tolist()):
                if p <= 0.0:
                    continue
                agg[row] = agg.get(row, 0.0) + p
            ids = []
            for t in agg:
                j = index.get(t)
                if j is None:
                    j = len(states)
                    index[t] = j
                    states.append(t)
                    frontier.append(j)
                ids.append(j)
            row_state.append(i)
            row_action.append(ai)
            col_counts.append(len(ids))
            col_idx_parts.append(np.asarray(ids, dtype=np.int32))
            prob_parts.append(list(agg.values()))
            total_entries += len(ids)
            if total_entries > budget:
                raise StateSpaceBudgetError(
                    f"abstraction exceeds {budget} transition entries at cutoff {k}"
                )

    state_row_ptr = np.arange(len(states) + 1, dtype=np.int64) * len(actions)
    col_ptr = np.zeros(len(row_state) + 1, dtype=np.int64)
    np.cumsum(col_counts, out=col_ptr[1:])
    flat_probs = np.asarray([p for part in prob_parts for p in part], dtype=np.float64)
    col_idx = np.concatenate(col_idx_parts) if col_idx_parts else np.zeros(0, dtype=np.int32)

    return AbstractMdp(
        states=states,
        index=index,
        actions=actions,
        row_state=np.asarray(row_state, dtype=np.int32),
        row_action=np.asarray(row_action, dtype=np.int32),
        state_row_ptr=state_row_ptr,
        col_ptr=col_ptr,
        col_idx=col_idx,
        probs=flat_probs,
        cutoff=k,
        build_step=build_step,
        source_label=source_label,
    )

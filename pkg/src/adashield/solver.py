"""Optimal memoryless policies for the weighted mean-payoff objective.

Relative value iteration on a damped (aperiodicity-transformed) Bellman
operator: each step mixes a ``tau`` self-loop into every transition,
which leaves the long-run average cost of every policy unchanged for
unichain models but guarantees span convergence on periodic chains.
Iteration stops when the span seminorm of successive value differences
drops below ``eps * (1 - tau) / tau``; the midpoint of the final
difference vector brackets the optimal value.

Ties are broken toward the non-interfering action when a keep resolver
is supplied, otherwise toward the lowest action index, so solves are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse

from .abstraction import AbstractMdp
from .mdp import (
    Action,
    CostModel,
    NoConvergenceError,
    SparseMdp,
    State,
    validate_mdp,
    weighted_cost,
)

try:
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

DEFAULT_EPS = 1e-6
DEFAULT_TAU = 0.5
DEFAULT_MAX_SWEEPS = 1_000_000


class InvalidMdpError(Exception):
    pass


@dataclass
class MeanPayoffSolution:
    """Optimal policy, its value, and solve diagnostics."""

    policy: dict[State, Action]
    value: float
    iterations: int
    residual: float
    states: list[State] = field(default_factory=list, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Shield:
    """Memoryless override policy over abstract states.

    Total via keep-fallback: a state outside the solved space maps to the
    action that matches the controller command embedded in the state, so
    an out-of-model query never interferes.
    """

    table: dict[State, Action]
    cutoff: tuple[int, ...]
    build_step: int
    keep_of: Callable[[State], Action]

    def action(self, abstract: State) -> Action:
        a = self.table.get(abstract)
        if a is None:
            return self.keep_of(abstract)
        return a

    def __len__(self) -> int:
        return len(self.table)


def _rows_from_sparse(mdp: SparseMdp):
    problems = validate_mdp(mdp)
    if problems:
        raise InvalidMdpError("; ".join(problems[:5]))
    states = [s for s in mdp.states() if mdp.actions(s)]
    missing = [s for s in mdp.states() if not mdp.actions(s)]
    if missing:
        raise InvalidMdpError(f"states without actions cannot be iterated: {missing[:3]!r}")
    index = {s: i for i, s in enumerate(states)}
    state_row_ptr = [0]
    row_labels: list[Action] = []
    col_ptr = [0]
    col_idx: list[int] = []
    probs: list[float] = []
    for s in states:
        for a in mdp.actions(s):
            row_labels.append(a)
            for t, p in mdp.transitions[(s, a)].items():
                col_idx.append(index[t])
                probs.append(p)
            col_ptr.append(len(col_idx))
        state_row_ptr.append(len(row_labels))
    return (
        states,
        np.asarray(state_row_ptr, dtype=np.int64),
        row_labels,
        np.asarray(col_ptr, dtype=np.int64),
        np.asarray(col_idx, dtype=np.int32),
        np.asarray(probs, dtype=np.float64),
    )


if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _sweep_batch(state_row_ptr, col_ptr, col_idx, probs, row_cost, v, tau, thresh, max_sweeps):
        """Run damped RVI sweeps in place; returns (sweeps, lo, hi, converged)."""
        n = v.size
        Tv = np.empty(n)
        one_minus_tau = 1.0 - tau
        lo = 0.0
        hi = 0.0
        for sweep in range(max_sweeps):
            for i in prange(n):
                best = np.inf
                for r in range(state_row_ptr[i], state_row_ptr[i + 1]):
                    acc = 0.0
                    for e in range(col_ptr[r], col_ptr[r + 1]):
                        acc += probs[e] * v[col_idx[e]]
                    acc = row_cost[r] + one_minus_tau * acc
                    if acc < best:
                        best = acc
                Tv[i] = tau * v[i] + best
            lo = np.inf
            hi = -np.inf
            for i in range(n):
                d = Tv[i] - v[i]
                if d < lo:
                    lo = d
                if d > hi:
                    hi = d
            off = Tv[0]
            for i in prange(n):
                v[i] = Tv[i] - off
            if hi - lo < thresh:
                return sweep + 1, lo, hi, True
        return max_sweeps, lo, hi, False


def solve_mean_payoff(
    mdp: AbstractMdp | SparseMdp,
    cost_model: CostModel | None = None,
    eps: float = DEFAULT_EPS,
    *,
    row_weights: np.ndarray | None = None,
    tau: float = DEFAULT_TAU,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    keep_action: Callable[[State], Action] | None = None,
    initial_values: Callable[[State], float] | None = None,
    use_numba: bool | None = None,
) -> MeanPayoffSolution:
    """Minimize the long-run average weighted cost over memoryless policies.

    Either ``cost_model`` or a precomputed per-row weight vector must be
    given (rows in the MDP's row order). Optimality within ``eps`` is
    guaranteed for unichain inputs; multichain inputs are not rejected
    but may fail to converge. ``initial_values`` warm-starts the value
    vector (e.g. from the previous rebuild's solution); the fixed point
    is unaffected.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")

    if isinstance(mdp, AbstractMdp):
        states = mdp.states
        state_row_ptr = mdp.state_row_ptr
        row_labels = [mdp.actions[ai] for ai in mdp.row_action.tolist()]
        col_ptr, col_idx, probs = mdp.col_ptr, mdp.col_idx, mdp.probs
        problems = mdp.validate()
        if problems:
            raise InvalidMdpError("; ".join(problems[:5]))
    else:
        states, state_row_ptr, row_labels, col_ptr, col_idx, probs = _rows_from_sparse(mdp)

    n = len(states)
    n_rows = len(row_labels)
    if row_weights is not None:
        w = np.asarray(row_weights, dtype=np.float64)
        if w.shape != (n_rows,):
            raise ValueError(f"row_weights has shape {w.shape}, expected ({n_rows},)")
    elif cost_model is not None:
        w = np.empty(n_rows)
        r = 0
        for i, s in enumerate(states):
            for _ in range(state_row_ptr[i + 1] - state_row_ptr[i]):
                w[r] = weighted_cost(cost_model, s, row_labels[r])
                r += 1
    else:
        raise ValueError("either cost_model or row_weights is required")

    if initial_values is not None:
        v = np.asarray([float(initial_values(s)) for s in states], dtype=np.float64)
        v -= v[0]
    else:
        v = np.zeros(n)

    thresh = eps * (1.0 - tau) / tau
    P = sparse.csr_matrix(
        (probs, col_idx, col_ptr), shape=(n_rows, n), dtype=np.float64, copy=False
    )
    heads = state_row_ptr[:-1]

    if use_numba is None:
        use_numba = _HAVE_NUMBA and n_rows * max(1, len(col_idx) // max(1, n_rows)) > 50_000
    sweeps = 0
    if use_numba and _HAVE_NUMBA:
        done, lo, hi, converged = _sweep_batch(
            state_row_ptr,
            col_ptr,
            col_idx,
            probs,
            w,
            v,
            tau,
            thresh,
            max_sweeps,
        )
        sweeps = int(done)
        if not converged:
            raise NoConvergenceError(
                f"span {hi - lo:.3g} above {thresh:.3g} after {sweeps} sweeps"
            )
    else:
        converged = False
        while sweeps < max_sweeps:
            q = w + (1.0 - tau) * (P @ v)
            Tv = tau * v + np.minimum.reduceat(q, heads)
            d = Tv - v
            sweeps += 1
            lo, hi = float(d.min()), float(d.max())
            v = Tv - Tv[0]
            if hi - lo < thresh:
                converged = True
                break
        if not converged:
            raise NoConvergenceError(
                f"span {hi - lo:.3g} above {thresh:.3g} after {sweeps} sweeps"
            )

    # One extra application on the converged vector yields the greedy
    # policy and the value bracket (the span only shrinks under T).
    q = w + (1.0 - tau) * (P @ v)
    best = np.minimum.reduceat(q, heads)
    d = (tau * v + best) - v
    lo, hi = float(d.min()), float(d.max())
    gain = 0.5 * (lo + hi)

    row_of_state = np.repeat(np.arange(n), np.diff(state_row_ptr))
    slack = q - best[row_of_state]
    eligible = slack <= eps
    row_ids = np.arange(n_rows)
    big = n_rows
    first_eligible = np.minimum.reduceat(np.where(eligible, row_ids, big), heads)
    if keep_action is not None:
        keep_rows = np.full(n_rows, False)
        r = 0
        for i, s in enumerate(states):
            ka = keep_action(s)
            for _ in range(state_row_ptr[i + 1] - state_row_ptr[i]):
                if row_labels[r] == ka:
                    keep_rows[r] = True
                r += 1
        keep_eligible = np.minimum.reduceat(
            np.where(eligible & keep_rows, row_ids, big), heads
        )
        chosen = np.where(keep_eligible < big, keep_eligible, first_eligible)
    else:
        chosen = first_eligible

    policy = {s: row_labels[int(chosen[i])] for i, s in enumerate(states)}
    return MeanPayoffSolution(
        policy=policy,
        value=float(gain),
        iterations=sweeps,
        residual=float(hi - lo),
        states=list(states),
        values=v.copy(),
    )


def extract_shield(
    solution: MeanPayoffSolution,
    mdp: AbstractMdp,
    keep_of: Callable[[State], Action] | None = None,
) -> Shield:
    """Package a solution as a deployable shield over the solved abstraction."""
    if keep_of is None:
        def keep_of(s: State) -> Action:
            return mdp.actions[s[-1]]

    return Shield(
        table=dict(solution.policy),
        cutoff=mdp.cutoff,
        build_step=mdp.build_step,
        keep_of=keep_of,
    )

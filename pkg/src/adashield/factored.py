"""Separable fast path for clamped traffic abstractions.

With symmetric Dirichlet priors, every (state, action) pair the estimator
has never visited contributes a uniform distribution over the queue
template's candidate product. Under clamping, that row's expected-value
operator factorizes into independent per-lane banded averages plus a
mean over next commands, so the Bellman operator of the whole
abstraction is four 1-D stencil passes, one command average, and a small
sparse correction for the visited pairs. Nothing per-transition is ever
materialized for prior rows, which keeps rebuilds fast even when
refinement has pushed the cut-offs high.

The operator is exact (not an approximation): it computes the same
clamped sums as the explicit Eq.-style builder, which the tests verify
by cross-solving small instances both ways.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .abstraction import validate_cutoff
from .estimator import DirichletTable
from .mdp import NoConvergenceError, State
from .traffic import QueueTemplate, SERVED_LANES, TrafficProbabilityModel


def lane_weight_table(d: int, k: int, delta: int) -> np.ndarray:
    """Per-queue-value stencil weights for a uniform template lane.

    Row ``q`` holds the probability of moving to ``q + o`` for offsets
    ``o in [-delta, +delta]`` when the successor value is drawn uniformly
    from the deduplicated template list of ``q``, with values above the
    cut-off folded into the cut-off. Rows sum to one.
    """
    W = np.zeros((d, 2 * delta + 1))
    for q in range(d):
        values = sorted(set(max(0, q + o) for o in range(-delta, delta + 1)))
        p = 1.0 / len(values)
        for v in values:
            W[q, min(v, k) - q + delta] += p
    return W


def analytic_lane_tables(k: int, p: float, discharge: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Stencil weights for the analytic arrival model (served, unserved)."""
    d = k + 1
    served = np.zeros((d, 3))
    unserved = np.zeros((d, 3))
    for q in range(d):
        for table, is_served in ((served, True), (unserved, False)):
            base = max(0, q - discharge) if is_served else q
            outcomes = {base: 1.0 - p, base + 1: p} if 0.0 < p < 1.0 else {base + int(p >= 1.0): 1.0}
            for value, pr in outcomes.items():
                table[q, min(value, k) - q + 1] += pr
    return served, unserved


def _apply_axis(flat: np.ndarray, dims: tuple[int, ...], axis: int, W: np.ndarray) -> np.ndarray:
    """Apply a banded per-value stencil along one axis of a flattened tensor."""
    d = dims[axis]
    pre = int(np.prod(dims[:axis], dtype=np.int64)) if axis else 1
    post = int(np.prod(dims[axis + 1 :], dtype=np.int64)) if axis + 1 < len(dims) else 1
    v = flat.reshape(pre, d, post)
    out = np.zeros_like(v)
    radius = (W.shape[1] - 1) // 2
    for o in range(-radius, radius + 1):
        w = W[:, o + radius]
        q0, q1 = max(0, -o), d - max(0, o)
        if q1 <= q0 or not w[q0:q1].any():
            continue
        out[:, q0:q1, :] += v[:, q0 + o : q1 + o, :] * w[None, q0:q1, None]
    return out.reshape(-1)


@dataclass
class FactoredAbstraction:
    """Implicit clamped abstraction: lane stencils plus visited-row CSR.

    ``lane_tables[a][i]`` is the stencil of lane ``i`` under action ``a``;
    for symmetric priors both actions share one table set. Visited
    (state, action) pairs carry explicit clamped distributions that
    override the prior rows.
    """

    cutoff: tuple[int, ...]
    n_commands: int
    lane_tables: list[list[np.ndarray]]
    action_dependent: bool
    vis_rows: np.ndarray  # (m,) state ids
    vis_actions: np.ndarray  # (m,)
    vis_col_ptr: np.ndarray
    vis_col_idx: np.ndarray
    vis_probs: np.ndarray
    template_delta: int = 1
    build_step: int = 0
    source_label: str = ""
    initial_index: int = 0

    def __post_init__(self):
        self.dims = tuple(v + 1 for v in self.cutoff) + (self.n_commands,)
        self.n_states = int(np.prod(self.dims))
        strides = np.ones(len(self.dims), dtype=np.int64)
        for i in range(len(self.dims) - 2, -1, -1):
            strides[i] = strides[i + 1] * self.dims[i + 1]
        self.strides = strides

    @property
    def n_actions(self) -> int:
        return 2

    @property
    def actions(self) -> tuple[int, ...]:
        return (0, 1)

    def state_ids(self, states_arr: np.ndarray) -> np.ndarray:
        return states_arr @ self.strides

    def implicit_transitions(self) -> int:
        """Transition entries an explicit build of the same MDP would hold."""
        counts: np.ndarray | None = None
        for k in self.cutoff:
            lens = np.array(
                [
                    len(set(max(0, q + o) for o in range(-self.template_delta, self.template_delta + 1)))
                    for q in range(k + 1)
                ],
                dtype=np.float64,
            )
            counts = lens if counts is None else np.multiply.outer(counts, lens).reshape(-1)
        per_pair = counts * self.n_commands  # successor commands
        # times current-command copies of each queue combination, times actions
        return int(per_pair.sum() * self.n_commands * self.n_actions)

    def expected_values(self, v: np.ndarray) -> tuple[np.ndarray, ...]:
        """Prior-row expected successor values, one vector per action.

        The command dimension collapses first (next command is uniform
        and independent), then each lane stencil is applied on the
        reduced queue grid; the result broadcasts back over commands.
        """
        queue_dims = self.dims[:-1]
        vbar = v.reshape(-1, self.n_commands).mean(axis=1)
        outs = []
        n_tables = len(self.lane_tables)
        for a in range(n_tables):
            ev = vbar
            for axis, W in enumerate(self.lane_tables[a]):
                ev = _apply_axis(ev, queue_dims, axis, W)
            outs.append(np.repeat(ev, self.n_commands))
        if not self.action_dependent:
            outs = [outs[0], outs[0]]
        return tuple(outs)


def build_factored(
    table: DirichletTable,
    cutoff,
    *,
    anchor: State = (0, 0, 0, 0, 0),
    build_step: int = 0,
) -> FactoredAbstraction:
    """Factored abstraction from a symmetric-prior Dirichlet table.

    Visited keys whose state lies inside the clamped space become
    explicit clamped rows; everything else stays implicit. Requires a
    :class:`~adashield.traffic.QueueTemplate` and no warm-start prior
    (the prior must be the uniform one for the implicit rows to be
    exact).
    """
    template = table.template
    if not isinstance(template, QueueTemplate):
        raise TypeError("factored build requires a QueueTemplate")
    if table.prior_fn is not None:
        raise ValueError("factored build requires symmetric priors")
    k = validate_cutoff(cutoff)
    n_lanes = template.n_lanes
    n_cmd = template.n_commands
    delta = template.delta
    dims = tuple(v + 1 for v in k) + (n_cmd,)
    strides = np.ones(len(dims), dtype=np.int64)
    for i in range(len(dims) - 2, -1, -1):
        strides[i] = strides[i + 1] * dims[i + 1]
    kvec = np.asarray(k, dtype=np.int64)

    lane_tables = [[lane_weight_table(k[i] + 1, k[i], delta) for i in range(n_lanes)]]

    vis_rows: list[int] = []
    vis_actions: list[int] = []
    col_parts: list[np.ndarray] = []
    prob_parts: list[np.ndarray] = []
    col_counts: list[int] = []
    for (s, a), alpha in table.alphas.items():
        inside = all(s[i] <= k[i] for i in range(n_lanes))
        if not inside:
            continue
        arr = template.candidates_array(s, a)
        probs = alpha / alpha.sum()
        clamped = np.minimum(arr[:, :n_lanes], kvec)
        ids = clamped @ strides[:n_lanes] + arr[:, n_lanes] * strides[n_lanes]
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        probs = probs[order]
        boundaries = np.flatnonzero(np.diff(ids)) + 1
        starts = np.concatenate(([0], boundaries))
        uniq = ids[starts]
        sums = np.add.reduceat(probs, starts)
        vis_rows.append(int(np.dot(s[:n_lanes], strides[:n_lanes]) + s[n_lanes] * strides[n_lanes]))
        vis_actions.append(int(a))
        col_parts.append(uniq.astype(np.int64))
        prob_parts.append(sums)
        col_counts.append(len(uniq))

    col_ptr = np.zeros(len(vis_rows) + 1, dtype=np.int64)
    np.cumsum(col_counts, out=col_ptr[1:])
    fab = FactoredAbstraction(
        cutoff=k,
        n_commands=n_cmd,
        lane_tables=lane_tables,
        action_dependent=False,
        vis_rows=np.asarray(vis_rows, dtype=np.int64),
        vis_actions=np.asarray(vis_actions, dtype=np.int64),
        vis_col_ptr=col_ptr,
        vis_col_idx=np.concatenate(col_parts) if col_parts else np.zeros(0, dtype=np.int64),
        vis_probs=np.concatenate(prob_parts) if prob_parts else np.zeros(0),
        template_delta=delta,
        build_step=build_step,
        source_label="dirichlet-table/factored",
    )
    anchor_clamped = tuple(min(anchor[i], k[i]) for i in range(n_lanes)) + (anchor[n_lanes],)
    fab.initial_index = int(np.dot(anchor_clamped, fab.strides))
    return fab


def build_factored_analytic(
    model: TrafficProbabilityModel,
    cutoff,
    *,
    build_step: int = 0,
) -> FactoredAbstraction:
    """Factored abstraction of the analytic arrival model (no visited rows)."""
    k = validate_cutoff(cutoff)
    n_lanes = model.template.n_lanes
    tables = []
    for a in (0, 1):
        lanes = []
        for i in range(n_lanes):
            served_tab, unserved_tab = analytic_lane_tables(k[i], model.rates[i], model.discharge)
            lanes.append(served_tab if i in SERVED_LANES[a] else unserved_tab)
        tables.append(lanes)
    return FactoredAbstraction(
        cutoff=k,
        n_commands=model.template.n_commands,
        lane_tables=tables,
        action_dependent=True,
        vis_rows=np.zeros(0, dtype=np.int64),
        vis_actions=np.zeros(0, dtype=np.int64),
        vis_col_ptr=np.zeros(1, dtype=np.int64),
        vis_col_idx=np.zeros(0, dtype=np.int64),
        vis_probs=np.zeros(0),
        template_delta=model.template.delta,
        build_step=build_step,
        source_label="analytic-traffic-model/factored",
    )


def traffic_weight_matrix(fab: FactoredAbstraction, c2: float, gamma: float) -> np.ndarray:
    """Vectorized (n_states, 2) weighted-cost matrix for the scenario costs."""
    dims = fab.dims
    grids = np.indices(dims).reshape(len(dims), -1)
    c1 = np.abs(np.maximum(grids[0], grids[1]) - np.maximum(grids[2], grids[3])).astype(np.float64)
    cmd = grids[-1]
    w = np.empty((fab.n_states, 2))
    for a in (0, 1):
        w[:, a] = gamma * c1 + (1.0 - gamma) * c2 * (cmd != a)
    return w


@dataclass
class FactoredSolution:
    """Array-backed solve result over the implicit product state space."""

    fab: FactoredAbstraction
    policy: np.ndarray  # (n_states,) action indices
    values: np.ndarray  # (n_states,) relative values
    value: float
    iterations: int
    residual: float


def solve_factored(
    fab: FactoredAbstraction,
    weights: np.ndarray,
    *,
    eps: float = 1e-6,
    tau: float = 0.5,
    max_sweeps: int = 1_000_000,
    warm_values: np.ndarray | None = None,
    forced_accel_period: int = 100,
) -> FactoredSolution:
    """Damped relative value iteration on the factored operator.

    Same stopping rule and tie-breaking as the explicit solver: stop when
    the span of successive differences drops below
    ``eps * (1 - tau) / tau``; prefer the non-interfering action among
    eps-close choices, lowest index otherwise.

    Convergence is accelerated by Aitken extrapolation along the dominant
    error mode: once successive difference vectors are nearly collinear
    (the dominant mode has isolated itself), the remaining geometric tail
    is summed in one jump. The stopping test always runs on a genuine
    operator application, so extrapolation can never certify a wrong
    answer, only waste a few sweeps when it misfires.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    n = fab.n_states
    if weights.shape != (n, 2):
        raise ValueError(f"weights must be (n_states, 2), got {weights.shape}")
    thresh = eps * (1.0 - tau) / tau

    v = np.zeros(n) if warm_values is None else warm_values - warm_values[0]
    one_minus_tau = 1.0 - tau
    keep_idx = (np.arange(n, dtype=np.int64) % fab.n_commands).astype(np.int64)
    rows = np.arange(n)

    m = len(fab.vis_rows)
    have_visited = m > 0

    def visited_ev(vec: np.ndarray) -> np.ndarray:
        gathered = vec[fab.vis_col_idx] * fab.vis_probs
        return np.add.reduceat(gathered, fab.vis_col_ptr[:-1]) if m else np.zeros(0)

    def q_matrix(vec: np.ndarray) -> np.ndarray:
        ev0, ev1 = fab.expected_values(vec)
        Q = weights.copy()
        Q[:, 0] += one_minus_tau * ev0
        Q[:, 1] += one_minus_tau * ev1
        if have_visited:
            Q[fab.vis_rows, fab.vis_actions] = (
                weights[fab.vis_rows, fab.vis_actions] + one_minus_tau * visited_ev(vec)
            )
        return Q

    prev_delta: np.ndarray | None = None
    sweeps = 0
    since_attempt = 0
    interval = 3
    pending: tuple[np.ndarray, float] | None = None
    converged = False
    lo = hi = 0.0
    while sweeps < max_sweeps:
        Q = q_matrix(v)
        Tv = tau * v + np.minimum(Q[:, 0], Q[:, 1])
        d = Tv - v
        sweeps += 1
        lo, hi = float(d.min()), float(d.max())
        new_v = Tv - Tv[0]
        if hi - lo < thresh:
            v = new_v
            converged = True
            break
        if pending is not None:
            backup, span_before = pending
            pending = None
            if hi - lo >= span_before:
                # The jump made things worse: resume from the unjumped
                # iterate and try again later.
                v = backup
                prev_delta = None
                since_attempt = 0
                interval = min(interval * 2, 256)
                continue
            interval = 3
        delta = new_v - v
        since_attempt += 1
        if prev_delta is not None and since_attempt >= interval:
            num = float(delta @ prev_delta)
            den = float(prev_delta @ prev_delta)
            if den > 0.0 and num > 0.0:
                rho = num / den
                if rho < 0.99999:
                    jumped = new_v + delta * min(rho / (1.0 - rho), 1e5)
                    pending = (new_v, hi - lo)
                    v = jumped - jumped[0]
                    prev_delta = None
                    since_attempt = 0
                    continue
        prev_delta = delta
        v = new_v
    if not converged:
        raise NoConvergenceError(f"span {hi - lo:.3g} above {thresh:.3g} after {sweeps} sweeps")

    Q = q_matrix(v)
    best = np.minimum(Q[:, 0], Q[:, 1])
    d = (tau * v + best) - v
    lo, hi = float(d.min()), float(d.max())
    gain = 0.5 * (lo + hi)

    keep_q = Q[rows, keep_idx]
    policy = np.where(keep_q <= best + eps, keep_idx, np.where(Q[:, 0] <= best + eps, 0, 1))
    return FactoredSolution(
        fab=fab,
        policy=policy.astype(np.int8),
        values=v,
        value=float(gain),
        iterations=sweeps,
        residual=float(hi - lo),
    )


@dataclass
class ArrayShield:
    """Shield backed by a policy array over the clamped product space.

    Same interface as :class:`adashield.solver.Shield`; total via the
    keep-fallback for states outside the solved dimensions (cannot occur
    after clamping with this shield's own cut-off, but kept for safety).
    """

    policy: np.ndarray
    strides: np.ndarray
    dims: tuple[int, ...]
    cutoff: tuple[int, ...]
    build_step: int
    keep_of: Callable[[State], int]

    def action(self, abstract: State) -> int:
        idx = 0
        for value, stride, dim in zip(abstract, self.strides, self.dims):
            if not 0 <= value < dim:
                return self.keep_of(abstract)
            idx += value * stride
        return int(self.policy[idx])

    def __len__(self) -> int:
        return len(self.policy)


def extract_array_shield(
    solution: FactoredSolution, keep_of: Callable[[State], int] | None = None
) -> ArrayShield:
    if keep_of is None:
        keep_of = lambda s: s[-1]
    fab = solution.fab
    return ArrayShield(
        policy=solution.policy,
        strides=fab.strides,
        dims=fab.dims,
        cutoff=fab.cutoff,
        build_step=fab.build_step,
        keep_of=keep_of,
    )


def map_values(
    old: FactoredSolution, new_fab: FactoredAbstraction
) -> np.ndarray:
    """Warm-start vector for a new abstraction from an old solution.

    New states clamp into the old cut-offs lane by lane; their old values
    seed the new solve. The fixed point does not depend on the seed.
    """
    old_fab = old.fab
    grids = np.indices(new_fab.dims).reshape(len(new_fab.dims), -1)
    ids = np.zeros(new_fab.n_states, dtype=np.int64)
    for axis in range(len(new_fab.dims)):
        coord = np.minimum(grids[axis], old_fab.dims[axis] - 1)
        ids += coord * old_fab.strides[axis]
    return old.values[ids]

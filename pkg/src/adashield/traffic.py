"""Discrete-time four-way intersection simulator and its transition structure.

The model follows the single-crossing setup used throughout the
experiments: four queues (N, S, E, W) of waiting vehicles, a traffic
light serving one axis per step, Bernoulli arrivals per lane, and a
fixed-phase controller. Queue sizes change by at most one per step, so
every (state, action) pair has a small known set of candidate successors
(162 for interior states: 3^4 queue combinations times 2 next commands).

States are tuples ``(n, s, e, w, cmd)`` where ``cmd`` indexes
:data:`COMMANDS`; actions use the same direction indices (the shield's
action is the light setting it actually issues).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .abstraction import AbstractMdp, abstract_state, validate_cutoff
from .mdp import Action, CostModel, State

COMMANDS = ("NS", "EW")
LANES = ("N", "S", "E", "W")
NS, EW = 0, 1
#: lanes discharged by each command
SERVED_LANES = {NS: (0, 1), EW: (2, 3)}

DEFAULT_ARRIVAL_RATE = 1.5  # vehicles per step across all lanes


class QueueTemplate:
    """Candidate successors: each queue moves by at most ``delta``, any next command.

    Candidates depend only on the queue part of the state (not on the
    action or the embedded command), are clipped at zero, duplicate-free,
    and enumerated in a fixed lexicographic order.
    """

    def __init__(self, n_lanes: int = 4, delta: int = 1, n_commands: int = 2):
        if delta < 1:
            raise ValueError("delta must be >= 1")
        self.n_lanes = n_lanes
        self.delta = delta
        self.n_commands = n_commands
        self._arrays: dict[tuple[int, ...], np.ndarray] = {}

    def widened(self) -> "QueueTemplate":
        """Same structure with the per-step bound increased by one."""
        return QueueTemplate(self.n_lanes, self.delta + 1, self.n_commands)

    def _lane_values(self, q: int) -> list[int]:
        return sorted(set(max(0, q + d) for d in range(-self.delta, self.delta + 1)))

    def candidates_array(self, state: State, action: Action | None = None) -> np.ndarray:
        key = tuple(state[: self.n_lanes])
        arr = self._arrays.get(key)
        if arr is None:
            lanes = [self._lane_values(q) for q in key]
            rows = [
                vals + (cmd,)
                for vals in itertools.product(*lanes)
                for cmd in range(self.n_commands)
            ]
            arr = np.asarray(rows, dtype=np.int64)
            if len(self._arrays) > 8192:
                self._arrays.clear()
            self._arrays[key] = arr
        return arr

    def candidates(self, state: State, action: Action | None = None) -> tuple[State, ...]:
        arr = self.candidates_array(state, action)
        return tuple(map(tuple, arr.tolist()))


@dataclass(frozen=True)
class ArrivalModel:
    """Per-lane Bernoulli (or capped Poisson) arrivals with scheduled changes.

    ``schedule`` holds ``(step, per-lane rates)`` change points with
    strictly increasing steps; the rates at or after a change point
    replace the initial ones. In Bernoulli mode rates are per-step
    probabilities of a single arrival, matching the one-car-per-step
    template bound.
    """

    rates: tuple[float, ...]
    schedule: tuple[tuple[int, tuple[float, ...]], ...] = ()
    kind: str = "bernoulli"
    poisson_cap: int = 3
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("bernoulli", "poisson"):
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        steps = [s for s, _ in self.schedule]
        if steps != sorted(set(steps)):
            raise ValueError("schedule steps must be strictly increasing")
        for rates in [self.rates, *(r for _, r in self.schedule)]:
            if self.kind == "bernoulli" and not all(0.0 <= p <= 1.0 for p in rates):
                raise ValueError(f"bernoulli rates must be in [0, 1], got {rates}")

    def rates_at(self, step: int) -> tuple[float, ...]:
        rates = self.rates
        for at, r in self.schedule:
            if step >= at:
                rates = r
            else:
                break
        return rates

    def sample(self, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        rates = self.rates_at(step)
        if self.kind == "bernoulli":
            draws = rng.random(len(rates))
            return tuple(int(d < p) for d, p in zip(draws, rates))
        draws = rng.poisson(rates)
        return tuple(int(min(d, self.poisson_cap)) for d in draws)


def uniform_rates(total_rate: float = DEFAULT_ARRIVAL_RATE, n_lanes: int = 4) -> tuple[float, ...]:
    return (total_rate / n_lanes,) * n_lanes


def directional_rates(total_rate: float, ew_share: float) -> tuple[float, ...]:
    """Split a total arrival rate with ``ew_share`` going to the E/W lanes."""
    ns = total_rate * (1.0 - ew_share) / 2.0
    ew = total_rate * ew_share / 2.0
    return (ns, ns, ew, ew)


@dataclass(frozen=True)
class FixedPhaseController:
    """Alternates NS and EW green phases of a fixed duration."""

    phase_length: int = 20

    def __post_init__(self):
        if self.phase_length < 1:
            raise ValueError("phase_length must be >= 1")

    def command(self, clock: int) -> int:
        return NS if clock % (2 * self.phase_length) < self.phase_length else EW


@dataclass(frozen=True)
class IntersectionState:
    """Queue sizes, step counter, and the cumulative vehicle-step ledger."""

    queues: tuple[int, ...] = (0, 0, 0, 0)
    clock: int = 0
    waited: int = 0


def sim_step(
    state: IntersectionState,
    command: int,
    arrivals: tuple[int, ...],
    discharge: int = 1,
) -> IntersectionState:
    """Advance one step: served lanes discharge, all lanes receive arrivals.

    Each lane of the served direction releases up to ``discharge``
    vehicles; queues never go negative. The waiting ledger grows by the
    end-of-step queue total (one unit per vehicle per step waited).
    """
    served = SERVED_LANES[command]
    queues = tuple(
        max(0, q - discharge) + a if i in served else q + a
        for i, (q, a) in enumerate(zip(state.queues, arrivals))
    )
    return IntersectionState(
        queues=queues,
        clock=state.clock + 1,
        waited=state.waited + sum(queues),
    )


def waiting_metric(per_step_totals: Sequence[int], step: int, window: int = 100) -> int:
    """Total queued vehicle-steps accumulated over the last ``window`` steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    lo = max(0, step + 1 - window)
    return int(sum(per_step_totals[lo : step + 1]))


class TrafficProbabilityModel:
    """Exact one-step transition probabilities implied by an arrival model.

    Encodes the same knowledge a designer has before deployment: assumed
    per-lane arrival rates plus the controller's stage split (each next
    command equally likely). Provides ``estimate`` aligned with a
    :class:`QueueTemplate`, so it can stand in for a learned table when
    building abstractions or act as a warm-start prior.
    """

    def __init__(
        self,
        template: QueueTemplate,
        rates: tuple[float, ...],
        discharge: int = 1,
    ):
        if template.delta != 1 or discharge != 1:
            raise ValueError("the analytic model covers delta=1, discharge=1 dynamics")
        self.template = template
        self.rates = tuple(rates)
        self.discharge = discharge

    def _lane_outcomes(self, q: int, served: bool, p: float) -> dict[int, float]:
        base = max(0, q - self.discharge) if served else q
        if p <= 0.0:
            return {base: 1.0}
        if p >= 1.0:
            return {base + 1: 1.0}
        return {base: 1.0 - p, base + 1: p}

    def estimate(self, s: State, a: Action) -> np.ndarray:
        arr = self.template.candidates_array(s, a)
        served = SERVED_LANES[a]
        probs = np.full(len(arr), 1.0 / self.template.n_commands)
        for i in range(self.template.n_lanes):
            outcomes = self._lane_outcomes(s[i], i in served, self.rates[i])
            lane_p = np.zeros(len(arr))
            for value, p in outcomes.items():
                lane_p[arr[:, i] == value] += p
            probs *= lane_p
        return probs

    def prior_fn(self, pseudo_count: float | None = None):
        """Warm-start prior: analytic probabilities as pseudo-counts.

        Total mass defaults to one pseudo-observation per candidate, the
        same total weight as the symmetric prior; zero-probability
        candidates get a tiny floor so hyperparameters stay positive.
        """
        def fn(s: State, a: Action, cands: tuple[State, ...]) -> np.ndarray:
            total = pseudo_count if pseudo_count is not None else float(len(cands))
            alpha = self.estimate(s, a) * total
            return np.maximum(alpha, 1e-9)

        return fn


def traffic_cost_model(c2_value: float, gamma: float) -> CostModel:
    """Scenario cost model: balance queue maxima, charge overrides a constant.

    ``c1(s, a) = |max(n, s) - max(e, w)|`` and ``c2(s, a) = c2_value``
    exactly when the action differs from the command embedded in the
    state.
    """

    def c1(s: State, a: Action) -> float:
        return float(abs(max(s[0], s[1]) - max(s[2], s[3])))

    def c2(s: State, a: Action) -> float:
        return float(c2_value) if a != s[-1] else 0.0

    return CostModel(c1=c1, c2=c2, gamma=gamma)


def traffic_row_weights(mdp: AbstractMdp, c2_value: float, gamma: float) -> np.ndarray:
    """Vectorized weighted cost per row for the scenario cost model."""
    sv = mdp.state_vars()
    c1 = np.abs(np.maximum(sv[:, 0], sv[:, 1]) - np.maximum(sv[:, 2], sv[:, 3])).astype(np.float64)
    cmd = sv[:, -1]
    row_c1 = c1[mdp.row_state]
    interferes = mdp.row_action != cmd[mdp.row_state]
    return gamma * row_c1 + (1.0 - gamma) * c2_value * interferes


def build_traffic_abstraction(
    model: TrafficProbabilityModel,
    cutoff: Sequence[int],
    initial: State = (0, 0, 0, 0, NS),
    *,
    build_step: int = 0,
) -> AbstractMdp:
    """Clamped product-space abstraction of the analytic traffic model.

    Equivalent to running :func:`~adashield.abstraction.build_abstraction`
    with the analytic model as probability source (the whole clamped
    product is reachable under these dynamics), but enumerates the
    product space directly with vectorized per-lane outcome tables, which
    keeps large-cutoff benchmark builds tractable.
    """
    k = validate_cutoff(cutoff)
    n_lanes = model.template.n_lanes
    n_cmd = model.template.n_commands
    dims = tuple(v + 1 for v in k) + (n_cmd,)
    n_states = int(np.prod(dims))
    strides = np.ones(len(dims), dtype=np.int64)
    for i in range(len(dims) - 2, -1, -1):
        strides[i] = strides[i + 1] * dims[i + 1]

    grids = np.indices(dims).reshape(len(dims), -1)
    qs = [grids[i] for i in range(n_lanes)]

    # Per-lane outcome tables: value and probability of each of the two
    # possible next queue sizes, already merged under clamping at k.
    val = [np.zeros((dims[i], 2, 2), dtype=np.int64) for i in range(n_lanes)]
    prb = [np.zeros((dims[i], 2, 2)) for i in range(n_lanes)]
    for i in range(n_lanes):
        p = model.rates[i]
        for q in range(dims[i]):
            for served in (0, 1):
                outcomes: dict[int, float] = {}
                for value, pr in model._lane_outcomes(q, bool(served), p).items():
                    value = min(value, k[i])
                    outcomes[value] = outcomes.get(value, 0.0) + pr
                for slot, (value, pr) in enumerate(sorted(outcomes.items())):
                    val[i][q, served, slot] = value
                    prb[i][q, served, slot] = pr

    n_rows = n_states * 2
    counts = np.zeros(n_rows, dtype=np.int64)
    combos = list(itertools.product(range(2), range(2), range(2), range(2), range(n_cmd)))
    per_combo: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for a in (NS, EW):
        served_mask = [1 if i in SERVED_LANES[a] else 0 for i in range(n_lanes)]
        rows_base = (np.arange(n_states, dtype=np.int64) * 2 + a).astype(np.int32)
        for slots in combos:
            prob = np.full(n_states, 1.0 / n_cmd)
            succ = np.full(n_states, slots[-1], dtype=np.int64) * strides[-1]
            for i in range(n_lanes):
                prob *= prb[i][qs[i], served_mask[i], slots[i]]
                succ += val[i][qs[i], served_mask[i], slots[i]] * strides[i]
            mask = prob > 0.0
            rows = rows_base[mask]
            per_combo.append((rows, succ[mask].astype(np.int32), prob[mask]))
            np.add.at(counts, rows, 1)

    col_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=col_ptr[1:])
    nnz = int(col_ptr[-1])
    col_idx = np.empty(nnz, dtype=np.int32)
    probs = np.empty(nnz)
    fill = col_ptr[:-1].copy()
    for rows, succ, prob in per_combo:
        pos = fill[rows]
        col_idx[pos] = succ
        probs[pos] = prob
        fill[rows] += 1

    states = [tuple(row) for row in grids.T.tolist()]
    index = {s: i for i, s in enumerate(states)}
    s0 = abstract_state(initial, k)
    return AbstractMdp(
        states=states,
        index=index,
        actions=(NS, EW),
        row_state=np.repeat(np.arange(n_states, dtype=np.int32), 2),
        row_action=np.tile(np.array([NS, EW], dtype=np.int32), n_states),
        state_row_ptr=np.arange(n_states + 1, dtype=np.int64) * 2,
        col_ptr=col_ptr,
        col_idx=col_idx,
        probs=probs,
        cutoff=k,
        build_step=build_step,
        source_label="analytic-traffic-model",
        initial_index=index[s0],
        states_array=grids.T.copy(),
    )

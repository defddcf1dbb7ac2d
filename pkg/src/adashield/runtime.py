"""Run-time shielding loop: act, observe, learn, periodically resynthesize.

The shield sits between the controller and the environment. Every step it
reads the controller's command together with the current queue state,
looks the clamped state up in its policy table, and either keeps or
overrides the command. Every observed transition feeds the Dirichlet
estimator; every ``period_t`` steps (after a warm-up phase) the cut-offs
are refined to cover recently observed states, a fresh abstraction is
built from the current estimates, and a newly solved shield atomically
replaces the old one. A per-lane CUSUM detector can gate rebuilds so a
quiescent environment does not pay for synthesis.
"""

from __future__ import annotations

import time as _time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .abstraction import (
    ObservationWindow,
    abstract_state,
    build_abstraction,
    refine_cutoff,
    validate_cutoff,
)
from .estimator import DirichletTable, TemplateMismatchError, lambda_schedule, remap_table
from .factored import (
    FactoredSolution,
    build_factored,
    extract_array_shield,
    map_values,
    solve_factored,
)
from .mdp import Action, CostModel, NoConvergenceError, State
from .solver import MeanPayoffSolution, Shield, extract_shield, solve_mean_payoff
from .traffic import (
    ArrivalModel,
    FixedPhaseController,
    IntersectionState,
    QueueTemplate,
    sim_step,
)

METRIC_WINDOW = 100  # rolling window for waiting time and interference ratio


@dataclass
class UpdateScheduler:
    """Rebuild cadence: first at ``warmup``, then every ``period_t`` steps."""

    period_t: int = 500
    warmup: int = 1000
    next_update: int = field(init=False)

    def __post_init__(self):
        if self.period_t < 1:
            raise ValueError("period_t must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        self.next_update = max(self.warmup, self.period_t)

    def due(self, now: int) -> bool:
        return now >= self.next_update

    def advance(self) -> None:
        self.next_update += self.period_t


class CusumDetector:
    """Two-sided CUSUM on per-lane queue lengths.

    Means are estimated from the first ``init_window`` samples; after
    that, per-variable upper and lower cumulative sums accumulate
    deviations beyond the ``drift`` allowance and an alarm fires once any
    sum exceeds ``threshold``. An alarm resets the detector, which then
    re-estimates means from the next ``init_window`` samples.
    """

    def __init__(
        self,
        n_vars: int,
        drift: float = 0.5,
        threshold: float = 10.0,
        init_window: int = 500,
    ):
        if init_window < 1:
            raise ValueError("init_window must be >= 1")
        self.n_vars = n_vars
        self.drift = float(drift)
        self.threshold = float(threshold)
        self.init_window = int(init_window)
        self.means: np.ndarray | None = None
        self.s_pos = np.zeros(n_vars)
        self.s_neg = np.zeros(n_vars)
        self._init_sum = np.zeros(n_vars)
        self._init_count = 0
        self.alarms = 0

    @property
    def active(self) -> bool:
        return self.means is not None

    def reset(self) -> None:
        self.means = None
        self.s_pos[:] = 0.0
        self.s_neg[:] = 0.0
        self._init_sum[:] = 0.0
        self._init_count = 0

    def update(self, values) -> bool:
        """Consume one observation vector; True when a change fires."""
        x = np.asarray(values, dtype=np.float64)
        if x.shape != (self.n_vars,):
            raise ValueError(f"expected {self.n_vars} values, got {x.shape}")
        if self.means is None:
            self._init_sum += x
            self._init_count += 1
            if self._init_count >= self.init_window:
                self.means = self._init_sum / self._init_count
            return False
        dev = x - self.means
        self.s_pos = np.maximum(0.0, self.s_pos + dev - self.drift)
        self.s_neg = np.maximum(0.0, self.s_neg - dev - self.drift)
        if float(self.s_pos.max()) > self.threshold or float(self.s_neg.max()) > self.threshold:
            self.alarms += 1
            self.reset()
            return True
        return False


class InterferenceLog:
    """Per-step interference records plus a rolling ratio."""

    def __init__(self, window: int = METRIC_WINDOW):
        self.window = window
        self.records: list[tuple[int, Action, Action, bool]] = []
        self._recent: deque[bool] = deque(maxlen=window)
        self.total = 0

    def record(self, step: int, command: Action, action: Action) -> bool:
        interfered = action != command
        self.records.append((step, command, action, interfered))
        self._recent.append(interfered)
        self.total += int(interfered)
        return interfered

    def rolling_ratio(self) -> float:
        if not self._recent:
            return 0.0
        return sum(self._recent) / len(self._recent)


@dataclass
class RebuildEvent:
    """One scheduler-boundary decision: a rebuild, a gated skip, or a failure."""

    time: int
    cutoff: tuple[int, ...]
    skipped: bool = False
    refined: bool = False
    n_states: int = 0
    n_transitions: int = 0
    build_seconds: float = 0.0
    solve_seconds: float = 0.0
    solver_iterations: int = 0
    solver_failed: bool = False


@dataclass
class TraceRow:
    step: int
    queues: tuple[int, ...]
    command: Action
    action: Action
    interfered: bool
    waiting: int
    interference_ratio: float
    cutoff: tuple[int, ...]
    rebuild: int  # 0 none, 1 rebuilt, 2 skipped by gate
    build_step: int


@dataclass
class RunTrace:
    rows: list[TraceRow] = field(default_factory=list)
    rebuilds: list[RebuildEvent] = field(default_factory=list)
    cutoff_history: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    anomalies: list[str] = field(default_factory=list)
    solver_failures: int = 0
    observations: int = 0

    @property
    def interference_events(self) -> int:
        return sum(r.interfered for r in self.rows)

    def total_synthesis_seconds(self) -> float:
        return sum(e.build_seconds + e.solve_seconds for e in self.rebuilds)


class ShieldAgent:
    """Everything one shielded junction owns: estimator, cut-offs, shield.

    The agent is environment-agnostic: callers feed it concrete states
    and observed transitions and ask for actions; the run loops below
    drive it against the built-in simulator, the HTTP session API drives
    it from an external client.
    """

    def __init__(
        self,
        template,
        table: DirichletTable,
        cutoff,
        cost_model: CostModel,
        scheduler: UpdateScheduler,
        *,
        actions: tuple[Action, ...] = (0, 1),
        anchor_state: State = (0, 0, 0, 0, 0),
        eps: float = 1e-6,
        tau: float = 0.5,
        transition_budget: int = 5_000_000,
        change_gate: bool = False,
        cusum: CusumDetector | None = None,
        lam_schedule: tuple[float, float] | None = None,
        factored_weights: Callable | None = None,
    ):
        self.template = template
        self.table = table
        self.cutoff = validate_cutoff(cutoff)
        self.cost_model = cost_model
        self.scheduler = scheduler
        self.actions = tuple(actions)
        self.anchor_state = anchor_state
        self.eps = eps
        self.tau = tau
        self.transition_budget = transition_budget
        self.change_gate = change_gate
        self.cusum = cusum
        self.lam_schedule = lam_schedule
        #: builds the (n_states, n_actions) weighted-cost matrix for a
        #: FactoredAbstraction; enables the separable fast path
        self.factored_weights = factored_weights
        self.window = ObservationWindow(scheduler.period_t)
        self.log = InterferenceLog()
        self.shield = None
        self.anomalies: list[str] = []
        self.observations = 0
        self._alarmed = False
        self._prev_solution: MeanPayoffSolution | None = None
        self._prev_cutoff: tuple[int, ...] | None = None
        self._prev_factored: FactoredSolution | None = None

    def _keep_action(self, s: State) -> Action:
        return self.actions[s[-1]]

    def initialize(self) -> RebuildEvent:
        """Synthesize and deploy the initial shield (build step 0)."""
        return self._rebuild(0, refined=False)

    def act(self, concrete: State, step: int) -> tuple[Action, bool]:
        """Shield decision for a concrete state carrying the controller command.

        Returns the emitted action and whether it interferes. States
        outside the solved space fall back to keeping the command.
        """
        if self.shield is None:
            raise RuntimeError("agent not initialized; call initialize() first")
        action = self.shield.action(abstract_state(concrete, self.shield.cutoff))
        interfered = self.log.record(step, self._keep_action(concrete), action)
        return action, interfered

    def observe(self, s: State, a: Action, succ: State, step: int) -> None:
        """Feed one observed transition; widens the template on a mismatch."""
        if self.lam_schedule is not None:
            base, horizon = self.lam_schedule
            self.table.lam = lambda_schedule(step, base, horizon)
        try:
            self.table.observe(s, a, succ)
        except TemplateMismatchError:
            self.template = self.template.widened()
            self.table = remap_table(self.table, self.template)
            self.anomalies.append(
                f"step {step}: successor outside template; widened per-step bound to "
                f"{self.template.delta}"
            )
            self.table.observe(s, a, succ)
        self.observations += 1
        self.window.add(succ)
        if self.cusum is not None and self.cusum.update(succ[: len(self.cutoff)]):
            self._alarmed = True

    def maybe_rebuild(self, now: int) -> RebuildEvent | None:
        """Run the boundary decision if one is due; otherwise no-op."""
        if not self.scheduler.due(now):
            return None
        new_cutoff, changed = refine_cutoff(self.cutoff, self.window)
        if self.change_gate and not changed and not self._alarmed and self.shield is not None:
            self.scheduler.advance()
            return RebuildEvent(time=now, cutoff=self.cutoff, skipped=True)
        self.cutoff = new_cutoff
        event = self._rebuild(now, refined=changed)
        self.scheduler.advance()
        return event

    def _use_factored(self) -> bool:
        return (
            self.factored_weights is not None
            and isinstance(self.template, QueueTemplate)
            and self.table.prior_fn is None
        )

    def _rebuild_factored(self, now: int, refined: bool) -> RebuildEvent:
        from .abstraction import StateSpaceBudgetError

        t0 = _time.perf_counter()
        fab = build_factored(self.table, self.cutoff, anchor=self.anchor_state, build_step=now)
        n_transitions = fab.implicit_transitions()
        if n_transitions > self.transition_budget:
            raise StateSpaceBudgetError(
                f"abstraction would hold {n_transitions} transitions at cutoff {self.cutoff}"
            )
        weights = self.factored_weights(fab)
        t1 = _time.perf_counter()
        warm = None
        if self._prev_factored is not None:
            warm = map_values(self._prev_factored, fab)
        event = RebuildEvent(time=now, cutoff=self.cutoff, refined=refined)
        try:
            solution = solve_factored(
                fab, weights, eps=self.eps, tau=self.tau, warm_values=warm
            )
        except NoConvergenceError:
            event.solver_failed = True
            event.build_seconds = t1 - t0
            self._alarmed = False
            return event
        t2 = _time.perf_counter()
        self.shield = extract_array_shield(solution, keep_of=self._keep_action)
        self._prev_factored = solution
        self._alarmed = False
        event.n_states = fab.n_states
        event.n_transitions = n_transitions
        event.build_seconds = t1 - t0
        event.solve_seconds = t2 - t1
        event.solver_iterations = solution.iterations
        return event

    def _rebuild(self, now: int, refined: bool) -> RebuildEvent:
        if self._use_factored():
            return self._rebuild_factored(now, refined)
        t0 = _time.perf_counter()
        mdp = build_abstraction(
            self.table,
            self.template,
            self.cutoff,
            self.anchor_state,
            actions=self.actions,
            budget=self.transition_budget,
            build_step=now,
            source_label="dirichlet-table",
        )
        t1 = _time.perf_counter()
        warm = None
        if self._prev_solution is not None and self._prev_cutoff is not None:
            prev_values = dict(zip(self._prev_solution.states, self._prev_solution.values))
            prev_cutoff = self._prev_cutoff

            def warm(s: State) -> float:
                return prev_values.get(abstract_state(s, prev_cutoff), 0.0)

        event = RebuildEvent(time=now, cutoff=self.cutoff, refined=refined)
        try:
            solution = solve_mean_payoff(
                mdp,
                self.cost_model,
                eps=self.eps,
                tau=self.tau,
                keep_action=self._keep_action,
                initial_values=warm,
            )
        except NoConvergenceError:
            event.solver_failed = True
            event.build_seconds = t1 - t0
            self._alarmed = False
            return event
        t2 = _time.perf_counter()
        self.shield = extract_shield(solution, mdp, keep_of=self._keep_action)
        self._prev_solution = solution
        self._prev_cutoff = self.cutoff
        self._alarmed = False
        event.n_states = mdp.n_states
        event.n_transitions = mdp.n_transitions
        event.build_seconds = t1 - t0
        event.solve_seconds = t2 - t1
        event.solver_iterations = solution.iterations
        return event


def run_loop(
    arrivals: ArrivalModel,
    controller: FixedPhaseController,
    agent: ShieldAgent | None,
    steps: int,
    rng: np.random.Generator,
    *,
    discharge: int = 1,
    shield_enabled: bool = True,
    initial: IntersectionState | None = None,
    on_row: Callable[[TraceRow], None] | None = None,
) -> RunTrace:
    """Drive one intersection for ``steps`` steps and collect the trace.

    With the shield disabled (or no agent) the loop is an identity proxy:
    actions equal controller commands and nothing is learned. Rebuild
    boundaries are evaluated between steps, so a shield swap is atomic
    with respect to decisions.
    """
    trace = RunTrace()
    shielded = shield_enabled and agent is not None
    state = initial if initial is not None else IntersectionState()
    if shielded:
        event = agent.initialize()
        trace.rebuilds.append(event)
        if event.solver_failed:
            trace.solver_failures += 1
            raise NoConvergenceError("initial shield synthesis failed")
        trace.cutoff_history.append((0, agent.cutoff))

    totals: deque[int] = deque(maxlen=METRIC_WINDOW)
    waiting_running = 0
    for step in range(steps):
        command = controller.command(step)
        concrete = state.queues + (command,)
        if shielded:
            action, interfered = agent.act(concrete, step)
        else:
            action, interfered = command, False

        state = sim_step(state, action, arrivals.sample(step, rng), discharge)
        succ = state.queues + (controller.command(step + 1),)
        if shielded:
            agent.observe(concrete, action, succ, step)

        if len(totals) == METRIC_WINDOW:
            waiting_running -= totals[0]
        totals.append(sum(state.queues))
        waiting_running += totals[-1]

        rebuild_marker = 0
        now = step + 1
        if shielded and now < steps:
            event = agent.maybe_rebuild(now)
            if event is not None:
                trace.rebuilds.append(event)
                if event.skipped:
                    rebuild_marker = 2
                else:
                    rebuild_marker = 1
                    trace.cutoff_history.append((now, agent.cutoff))
                    if event.solver_failed:
                        trace.solver_failures += 1

        row = TraceRow(
            step=step,
            queues=concrete[:-1],
            command=command,
            action=action,
            interfered=interfered,
            waiting=waiting_running,
            interference_ratio=(agent.log.rolling_ratio() if shielded else 0.0),
            cutoff=(agent.shield.cutoff if shielded else ()),
            rebuild=rebuild_marker,
            build_step=(agent.shield.build_step if shielded else -1),
        )
        trace.rows.append(row)
        if on_row is not None:
            on_row(row)

    if shielded:
        trace.cutoff_history.append((steps, agent.cutoff))
        trace.anomalies = list(agent.anomalies)
        trace.observations = agent.observations
    return trace


@dataclass
class GridTraceRow:
    step: int
    intersection: int
    queues: tuple[int, ...]
    command: Action
    action: Action
    interfered: bool
    waiting: int  # network-wide rolling metric, repeated per intersection
    interference_ratio: float
    cutoff: tuple[int, ...]
    rebuild: int
    build_step: int


def run_grid_loop(
    network,
    controller: FixedPhaseController,
    agents: list[ShieldAgent] | None,
    steps: int,
    rng: np.random.Generator,
    *,
    shield_enabled: bool = True,
    on_row: Callable[[GridTraceRow], None] | None = None,
) -> tuple[RunTrace, list[GridTraceRow]]:
    """Drive a grid network with one local shield per intersection.

    Each shield is synthesized and updated independently from its own
    observations; the trace is long-format with one row per
    (step, intersection).
    """
    trace = RunTrace()
    shielded = shield_enabled and agents is not None
    if shielded:
        if len(agents) != network.n_intersections:
            raise ValueError("one agent per intersection required")
        for agent in agents:
            event = agent.initialize()
            trace.rebuilds.append(event)
            if event.solver_failed:
                trace.solver_failures += 1
                raise NoConvergenceError("initial shield synthesis failed")

    rows: list[GridTraceRow] = []
    totals: deque[int] = deque(maxlen=METRIC_WINDOW)
    waiting_running = 0
    for step in range(steps):
        command = controller.command(step)
        concretes = [q + (command,) for q in network.queues()]
        actions = []
        flags = []
        for idx in range(network.n_intersections):
            if shielded:
                action, interfered = agents[idx].act(concretes[idx], step)
            else:
                action, interfered = command, False
            actions.append(action)
            flags.append(interfered)

        network.step(actions, step, rng)
        next_command = controller.command(step + 1)
        if len(totals) == METRIC_WINDOW:
            waiting_running -= totals[0]
        totals.append(network.total_queued())
        waiting_running += totals[-1]

        now = step + 1
        markers = [0] * network.n_intersections
        for idx in range(network.n_intersections):
            if shielded:
                succ = network.states[idx].queues + (next_command,)
                agents[idx].observe(concretes[idx], actions[idx], succ, step)
                if now < steps:
                    event = agents[idx].maybe_rebuild(now)
                    if event is not None:
                        trace.rebuilds.append(event)
                        markers[idx] = 2 if event.skipped else 1
                        if event.solver_failed:
                            trace.solver_failures += 1

        for idx in range(network.n_intersections):
            row = GridTraceRow(
                step=step,
                intersection=idx,
                queues=concretes[idx][:-1],
                command=command,
                action=actions[idx],
                interfered=flags[idx],
                waiting=waiting_running,
                interference_ratio=(agents[idx].log.rolling_ratio() if shielded else 0.0),
                cutoff=(agents[idx].shield.cutoff if shielded else ()),
                rebuild=markers[idx],
                build_step=(agents[idx].shield.build_step if shielded else -1),
            )
            rows.append(row)
            if on_row is not None:
                on_row(row)

    if shielded:
        trace.anomalies = [a for agent in agents for a in agent.anomalies]
        trace.observations = sum(agent.observations for agent in agents)
    return trace, rows

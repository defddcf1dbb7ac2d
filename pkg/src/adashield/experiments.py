"""Experiment harness: compose simulator, agent, and run loops into reports.

A run writes a per-step CSV (streamed, so a crash leaves the rows
produced so far on disk) plus a JSON report with summary statistics and
the cut-off evolution table. Reports are pure functions of
(config, seed): identical inputs give byte-identical CSVs. Wall-clock
synthesis times live only in the report, never in the CSV, so timing
noise cannot break trace determinism.
"""

from __future__ import annotations

import csv
import json
import os
import time as _time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .abstraction import build_abstraction
from .estimator import DirichletTable
from .mdp import induce_chain, stationary_distribution
from .runtime import (
    METRIC_WINDOW,
    CusumDetector,
    ShieldAgent,
    UpdateScheduler,
    run_grid_loop,
    run_loop,
)
from .scenarios import ConfigError, ScenarioConfig, resolve_scenario
from .solver import solve_mean_payoff
from .traffic import (
    COMMANDS,
    FixedPhaseController,
    IntersectionState,
    QueueTemplate,
    TrafficProbabilityModel,
    sim_step,
    traffic_cost_model,
    traffic_row_weights,
)
from .grid import GridNetwork
from .traffic import build_traffic_abstraction, uniform_rates

OUTPUT_DIR_ENV = "ADASHIELD_OUT"

CSV_COLUMNS = [
    "step",
    "q_n",
    "q_s",
    "q_e",
    "q_w",
    "command",
    "action",
    "interfered",
    "waiting_100",
    "interference_ratio_100",
    "cutoff",
    "rebuild",
]
CSV_COLUMNS_GRID = CSV_COLUMNS[:1] + ["intersection"] + CSV_COLUMNS[1:]


@dataclass
class ExperimentConfig:
    """Harness-level knobs: which scenario, which overrides, where to write."""

    scenario: str = "scenario1"
    shield: bool = True
    seed: int | None = None
    c2: float | None = None
    gamma: float | None = None
    lam: float | None = None
    steps: int | None = None
    period_t: int | None = None
    warmup: int | None = None
    eps: float = 1e-6
    tau: float = 0.5
    out_dir: str | None = None
    label: str | None = None
    save_estimator: str | None = None
    load_estimator: str | None = None

    def resolved_scenario(self) -> ScenarioConfig:
        overrides = {
            "c2": self.c2,
            "gamma": self.gamma,
            "lam": self.lam,
            "steps": self.steps,
            "period_t": self.period_t,
            "warmup": self.warmup,
        }
        return resolve_scenario(self.scenario, **overrides)

    def output_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        env = os.environ.get(OUTPUT_DIR_ENV)
        if env:
            return Path(env)
        return Path("runs")


@dataclass
class RunReport:
    csv_path: str
    summary: dict
    cutoff_table: list[list] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def build_agent(
    scenario: ScenarioConfig,
    *,
    eps: float = 1e-6,
    tau: float = 0.5,
    arrivals=None,
    estimator_bytes: bytes | None = None,
) -> ShieldAgent:
    """Assemble a shield agent for one intersection of a scenario."""
    template = QueueTemplate(n_lanes=4, delta=scenario.template_delta, n_commands=len(COMMANDS))
    rates = (arrivals or scenario.arrivals).rates
    prior_fn = None
    if scenario.warm_start and scenario.template_delta == 1 and scenario.discharge == 1:
        prior_fn = TrafficProbabilityModel(template, rates).prior_fn()
    if estimator_bytes is not None:
        table = DirichletTable.load(estimator_bytes, template, prior_fn=prior_fn)
        table.lam = scenario.lam
    else:
        table = DirichletTable(template, lam=scenario.lam, prior_fn=prior_fn)
    scheduler = UpdateScheduler(period_t=scenario.period_t, warmup=scenario.warmup)
    cusum = CusumDetector(
        n_vars=4,
        drift=scenario.cusum_drift,
        threshold=scenario.cusum_threshold,
        init_window=scenario.period_t,
    )
    from .factored import traffic_weight_matrix

    def factored_weights(fab):
        return traffic_weight_matrix(fab, scenario.c2, scenario.gamma)

    return ShieldAgent(
        template=template,
        table=table,
        cutoff=scenario.initial_cutoff,
        cost_model=traffic_cost_model(scenario.c2, scenario.gamma),
        scheduler=scheduler,
        anchor_state=(0, 0, 0, 0, 0),
        eps=eps,
        tau=tau,
        transition_budget=scenario.transition_budget,
        change_gate=scenario.change_gate,
        cusum=cusum,
        lam_schedule=scenario.lam_schedule,
        factored_weights=factored_weights,
    )


def _fmt_cutoff(cutoff: tuple[int, ...]) -> str:
    return "|".join(str(v) for v in cutoff)


def _csv_row(row, grid: bool) -> list:
    base = [
        row.step,
        *row.queues,
        COMMANDS[row.command],
        COMMANDS[row.action],
        int(row.interfered),
        row.waiting,
        f"{row.interference_ratio:.6f}",
        _fmt_cutoff(row.cutoff),
        row.rebuild,
    ]
    if grid:
        base.insert(1, row.intersection)
    return base


def _summarize(trace, rows, scenario: ScenarioConfig, cfg: ExperimentConfig, seed: int, grid: bool) -> dict:
    steps = scenario.steps
    bucket = scenario.period_t
    n_buckets = (steps + bucket - 1) // bucket
    sums = [0] * n_buckets
    counts = [0] * n_buckets
    interfered = 0
    rebuilds = 0
    skips = 0
    for row in rows:
        b = row.step // bucket
        if not grid or row.intersection == 0:
            sums[b] += row.waiting
            counts[b] += 1
        interfered += int(row.interfered)
        if row.rebuild == 1:
            rebuilds += 1
        elif row.rebuild == 2:
            skips += 1
    decision_rows = len(rows)
    return {
        "scenario": scenario.name,
        "kind": scenario.kind,
        "shield": cfg.shield,
        "seed": seed,
        "steps": steps,
        "c2": scenario.c2,
        "gamma": scenario.gamma,
        "lambda": scenario.lam,
        "mean_waiting_by_bucket": [
            [b * bucket, (sums[b] / counts[b]) if counts[b] else 0.0] for b in range(n_buckets)
        ],
        "interference_events": interfered,
        "interference_ratio": interfered / decision_rows if decision_rows else 0.0,
        "rebuild_count": rebuilds,
        "rebuild_skips": skips,
        "total_synthesis_seconds": trace.total_synthesis_seconds(),
        "solver_failures": trace.solver_failures,
        "anomalies": len(trace.anomalies),
        "final_cutoff": list(trace.cutoff_history[-1][1]) if trace.cutoff_history else None,
        "observations": trace.observations,
    }


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Execute one run end to end and write CSV + report.

    The CSV is flushed row by row; on a mid-run failure the partial file
    survives and the exception propagates to the caller (the CLI maps it
    to exit code 1).
    """
    scenario = cfg.resolved_scenario()
    seed = cfg.seed if cfg.seed is not None else int.from_bytes(os.urandom(4), "little")
    rng = np.random.default_rng(seed)

    out_dir = cfg.output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = cfg.label or f"{scenario.name}_{'shielded' if cfg.shield else 'unshielded'}_seed{seed}"
    csv_path = out_dir / f"{stem}.csv"
    report_path = out_dir / f"{stem}.report.json"

    grid = scenario.kind == "grid"
    estimator_bytes = None
    if cfg.load_estimator:
        estimator_bytes = Path(cfg.load_estimator).read_bytes()

    controller = FixedPhaseController(phase_length=scenario.phase_length)
    agents = None
    agent = None
    if cfg.shield:
        if grid:
            agents = [
                build_agent(scenario, eps=cfg.eps, tau=cfg.tau, arrivals=arr)
                for arr in scenario.grid.arrivals
            ]
        else:
            agent = build_agent(
                scenario, eps=cfg.eps, tau=cfg.tau, estimator_bytes=estimator_bytes
            )

    columns = CSV_COLUMNS_GRID if grid else CSV_COLUMNS
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)

        def on_row(row):
            writer.writerow(_csv_row(row, grid))
            fh.flush()

        if grid:
            network = GridNetwork(
                arrivals=list(scenario.grid.arrivals),
                routing=scenario.grid.routing,
                routing_schedule=scenario.grid.routing_schedule,
                discharge=scenario.discharge,
            )
            trace, rows = run_grid_loop(
                network,
                controller,
                agents,
                scenario.steps,
                rng,
                shield_enabled=cfg.shield,
                on_row=on_row,
            )
        else:
            trace = run_loop(
                scenario.arrivals,
                controller,
                agent,
                scenario.steps,
                rng,
                discharge=scenario.discharge,
                shield_enabled=cfg.shield,
                on_row=on_row,
            )
            rows = trace.rows

    if cfg.save_estimator:
        if grid:
            raise ConfigError("estimator snapshots are per-intersection; not supported for grid runs")
        if agent is None:
            raise ConfigError("cannot save an estimator from an unshielded run")
        Path(cfg.save_estimator).write_bytes(agent.table.snapshot())

    summary = _summarize(trace, rows, scenario, cfg, seed, grid)
    cutoff_table = [[t, list(k)] for t, k in trace.cutoff_history]
    report = RunReport(csv_path=str(csv_path), summary=summary, cutoff_table=cutoff_table)
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


def sweep_runs(cfg: ExperimentConfig, param: str, values: Iterable[float]) -> list[RunReport]:
    """Full runs varying one parameter, sharing the simulation seed.

    ``param`` is one of ``c2``, ``lambda``, ``gamma``; the shared seed
    makes differences attributable to the parameter alone.
    """
    field_name = {"c2": "c2", "lambda": "lam", "gamma": "gamma"}.get(param)
    if field_name is None:
        raise ConfigError(f"sweep parameter must be c2, lambda, or gamma, got {param!r}")
    if cfg.seed is None:
        cfg = _with(cfg, seed=int.from_bytes(os.urandom(4), "little"))
    reports = []
    for value in values:
        label = f"{cfg.label or cfg.scenario}_{param}{value:g}_seed{cfg.seed}"
        sub = _with(cfg, label=label, **{field_name: float(value)})
        reports.append(run_experiment(sub))
    return reports


def _with(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    import dataclasses

    return dataclasses.replace(cfg, **kw)


def collect_observations(
    scenario: ScenarioConfig, steps: int, rng: np.random.Generator
) -> DirichletTable:
    """Run the simulator under the bare controller and learn from the trace.

    Used to warm estimator snapshots and to produce the fixed abstraction
    the gamma sweep solves on. Only (state, kept-command) pairs are
    visited; unvisited pairs fall back to the prior when the abstraction
    is built.
    """
    agent_scenario = scenario
    template = QueueTemplate(n_lanes=4, delta=scenario.template_delta, n_commands=len(COMMANDS))
    prior_fn = None
    if scenario.warm_start and scenario.template_delta == 1 and scenario.discharge == 1:
        prior_fn = TrafficProbabilityModel(template, scenario.arrivals.rates).prior_fn()
    table = DirichletTable(template, lam=agent_scenario.lam, prior_fn=prior_fn)
    controller = FixedPhaseController(phase_length=scenario.phase_length)
    state = IntersectionState()
    for step in range(steps):
        command = controller.command(step)
        concrete = state.queues + (command,)
        state = sim_step(state, command, scenario.arrivals.sample(step, rng), scenario.discharge)
        succ = state.queues + (controller.command(step + 1),)
        table.observe(concrete, command, succ)
    return table


def sweep_gamma(
    cfg: ExperimentConfig,
    gammas: Iterable[float],
    *,
    snapshot_steps: int | None = None,
) -> list[dict]:
    """Approximate Pareto points: solve one fixed abstraction per gamma.

    The abstraction snapshot comes from a controller-only simulation of
    the scenario (``snapshot_steps`` defaults to the warm-up length) at
    the initial cut-offs. For each gamma the solved policy's long-run
    performance and interference components are evaluated exactly via the
    stationary distribution of the induced chain.
    """
    scenario = cfg.resolved_scenario()
    seed = cfg.seed if cfg.seed is not None else 0
    rng = np.random.default_rng(seed)
    table = collect_observations(scenario, snapshot_steps or scenario.warmup, rng)
    template = table.template
    mdp = build_abstraction(
        table,
        template,
        scenario.initial_cutoff,
        (0, 0, 0, 0, 0),
        actions=(0, 1),
        budget=scenario.transition_budget,
        source_label="gamma-sweep-snapshot",
    )
    sparse_view = mdp.to_sparse_mdp()
    points = []
    for gamma in gammas:
        cm = traffic_cost_model(scenario.c2, float(gamma))
        sol = solve_mean_payoff(
            mdp, cm, eps=cfg.eps, tau=cfg.tau, keep_action=lambda s: s[-1]
        )
        chain = induce_chain(sparse_view, sol.policy, cm)
        mu = stationary_distribution(chain)
        perf = sum(w * cm.c1(s, sol.policy[s]) for s, w in mu.items())
        inter = sum(w * cm.c2(s, sol.policy[s]) for s, w in mu.items())
        points.append(
            {
                "gamma": float(gamma),
                "performance_cost": perf,
                "interference_cost": inter,
                "value": sol.value,
                "states": mdp.n_states,
            }
        )
    return points


def bench_synthesis(
    k_values: Iterable[int],
    *,
    total_rate: float = 1.5,
    c2: float = 5.0,
    gamma: float = 0.5,
    eps: float = 1e-6,
    tau: float = 0.5,
) -> list[dict]:
    """Synthesis-time scaling: build and solve one abstraction per cut-off.

    Uses uniform arrivals and a uniform cut-off for all lanes, with
    transition probabilities from the analytic arrival model (the
    designer-knowledge initial estimate), so state counts follow the
    closed-form clamped product exactly.
    """
    rows = []
    for k in k_values:
        if k < 1:
            raise ValueError("cut-off values must be >= 1")
        template = QueueTemplate()
        model = TrafficProbabilityModel(template, uniform_rates(total_rate))
        t0 = _time.perf_counter()
        mdp = build_traffic_abstraction(model, (k,) * 4)
        t1 = _time.perf_counter()
        weights = traffic_row_weights(mdp, c2, gamma)
        sol = solve_mean_payoff(
            mdp, row_weights=weights, eps=eps, tau=tau, keep_action=lambda s: s[-1]
        )
        t2 = _time.perf_counter()
        rows.append(
            {
                "k": int(k),
                "states": mdp.n_states,
                "transitions": mdp.n_transitions,
                "build_seconds": t1 - t0,
                "solve_seconds": t2 - t1,
                "iterations": sol.iterations,
                "value": sol.value,
            }
        )
        del mdp, weights, sol
    return rows


def snapshot_info(data: bytes) -> dict:
    """Header metadata of an estimator snapshot without needing a template."""
    import struct

    from .estimator import SNAPSHOT_MAGIC, SnapshotError

    if data[:4] != SNAPSHOT_MAGIC:
        raise SnapshotError("bad magic")
    version, lam, prior_strength, n_keys = struct.unpack_from("<Hdd I", data, 4)
    return {
        "version": version,
        "lambda": lam,
        "prior_strength": prior_strength,
        "keys": n_keys,
        "bytes": len(data),
    }

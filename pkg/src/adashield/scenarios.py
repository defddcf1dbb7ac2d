"""Scenario definitions and the on-disk config format.

A scenario bundles everything the harness needs to reproduce a run:
arrival process (with scheduled density changes), controller phase
length, initial cut-offs, cost parameters, learning rate, and the
rebuild schedule. Configs are YAML with nested sections; unknown keys
are rejected so typos fail loudly instead of silently running defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .abstraction import DEFAULT_TRANSITION_BUDGET
from .grid import Routing
from .traffic import (
    DEFAULT_ARRIVAL_RATE,
    ArrivalModel,
    directional_rates,
    uniform_rates,
)


class ConfigError(Exception):
    """Malformed or inconsistent scenario/experiment configuration."""


@dataclass(frozen=True)
class GridSpec:
    """Per-intersection arrivals plus (possibly scheduled) routing."""

    arrivals: tuple[ArrivalModel, ...]
    routing: Routing
    routing_schedule: tuple[tuple[int, Routing], ...] = ()


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    arrivals: ArrivalModel
    kind: str = "single"
    steps: int = 6000
    phase_length: int = 20
    discharge: int = 1
    initial_cutoff: tuple[int, ...] = (3, 3, 3, 3)
    gamma: float = 0.5
    c2: float = 5.0
    lam: float = 0.3
    lam_schedule: tuple[float, float] | None = None  # (base, horizon); None = constant lam
    period_t: int = 500
    warmup: int = 1000
    template_delta: int = 1
    warm_start: bool = False
    change_gate: bool = False
    cusum_drift: float = 0.5
    cusum_threshold: float = 10.0
    # Scenario runs keep abstractions implicit (factored), so the guard
    # against runaway cut-offs sits far above the explicit-build default.
    transition_budget: int = 100 * DEFAULT_TRANSITION_BUDGET
    grid: GridSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("single", "grid"):
            raise ConfigError(f"kind must be single or grid, got {self.kind!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError("lambda must be in (0, 1]")
        if self.period_t < 1:
            raise ConfigError("period_t must be >= 1")
        if self.warmup < self.period_t:
            raise ConfigError("warmup must be >= period_t")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.kind == "grid" and self.grid is None:
            raise ConfigError("grid scenarios need a grid section")


def scenario_1(
    c2: float = 5.0,
    gamma: float = 0.5,
    lam: float = 0.3,
    steps: int = 6000,
    total_rate: float = DEFAULT_ARRIVAL_RATE,
    shift_step: int = 500,
    shifted_ew_share: float = 0.65,
    warm_start: bool = False,
) -> ScenarioConfig:
    """Single crossing with a density shift toward the east-west road.

    Arrivals start uniform across lanes at ``total_rate`` vehicles per
    step; from ``shift_step`` on, the east-west road receives
    ``shifted_ew_share`` of all arriving cars. Fixed 20-step stages,
    initial cut-offs of 3 everywhere, rebuilds every 500 steps after a
    1000-step setup.
    """
    arrivals = ArrivalModel(
        rates=uniform_rates(total_rate),
        schedule=((shift_step, directional_rates(total_rate, shifted_ew_share)),),
    )
    return ScenarioConfig(
        name="scenario1",
        arrivals=arrivals,
        steps=steps,
        gamma=gamma,
        c2=c2,
        lam=lam,
        warm_start=warm_start,
    )


def scenario_1_slow(**overrides) -> ScenarioConfig:
    """Alternative reading of the arrival figure: one car every 1.5 steps."""
    cfg = scenario_1(total_rate=1.0 / 1.5, **overrides)
    return _replace(cfg, name="scenario1-slow")


def grid_6(
    c2: float = 5.0,
    gamma: float = 0.5,
    lam: float = 0.3,
    steps: int = 6000,
    block_from: int = 1000,
    block_until: int = 6000,
) -> ScenarioConfig:
    """2x3 grid with a west-east main road blocked for a scripted window.

    Intersections 0..2 form the main road (row-major layout; 3..5 are the
    parallel side road). While the segment between 1 and 2 is blocked,
    main-road traffic detours through the side road, shifting density on
    the southern intersections.
    """
    main = ArrivalModel(rates=(0.10, 0.10, 0.05, 0.45))
    side = ArrivalModel(rates=(0.05, 0.05, 0.05, 0.10))
    arrivals = (main, side, side, side, side, side)

    open_routing: Routing = {
        (0, 3): ((1, 3, 0.9),),
        (1, 3): ((2, 3, 0.9),),
        (0, 0): ((3, 0, 0.7),),
        (1, 0): ((4, 0, 0.7),),
        (2, 0): ((5, 0, 0.7),),
        (3, 3): ((4, 3, 0.6),),
        (4, 3): ((5, 3, 0.6),),
    }
    blocked_routing: Routing = {
        (0, 3): ((1, 3, 0.9),),
        (1, 3): ((4, 0, 0.9),),  # detour south instead of continuing east
        (0, 0): ((3, 0, 0.7),),
        (2, 0): ((5, 0, 0.7),),
        (3, 3): ((4, 3, 0.6),),
        (4, 3): ((5, 3, 0.8),),  # detoured cars rejoin eastward
    }
    grid = GridSpec(
        arrivals=arrivals,
        routing=open_routing,
        routing_schedule=((block_from, blocked_routing), (block_until, open_routing)),
    )
    return ScenarioConfig(
        name="grid6",
        kind="grid",
        arrivals=main,
        steps=steps,
        gamma=gamma,
        c2=c2,
        lam=lam,
        template_delta=2,
        warm_start=False,
        grid=grid,
    )


_BUILTINS = {
    "scenario1": scenario_1,
    "scenario1-slow": scenario_1_slow,
    "grid6": grid_6,
}


def builtin_scenarios() -> tuple[str, ...]:
    return tuple(_BUILTINS)


def _replace(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    import dataclasses

    return dataclasses.replace(cfg, **kw)


def make_scenario(name: str, **overrides) -> ScenarioConfig:
    if name not in _BUILTINS:
        raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(_BUILTINS)}")
    factory_kw = {}
    post_kw = {}
    import inspect

    params = inspect.signature(_BUILTINS[name]).parameters
    for key, value in overrides.items():
        if value is None:
            continue
        if key in params:
            factory_kw[key] = value
        else:
            post_kw[key] = value
    cfg = _BUILTINS[name](**factory_kw)
    if post_kw:
        try:
            cfg = _replace(cfg, **post_kw)
        except TypeError as exc:
            raise ConfigError(f"unknown override: {exc}") from exc
    return cfg


# -- YAML parsing -------------------------------------------------------------


def _require_keys(section: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _parse_arrivals(section: Mapping[str, Any], where: str = "arrivals") -> ArrivalModel:
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    _require_keys(section, {"kind", "rates", "schedule", "poisson_cap"}, where)
    try:
        rates = tuple(float(x) for x in section["rates"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.rates must be a list of numbers: {exc}") from exc
    schedule = []
    for i, entry in enumerate(section.get("schedule") or []):
        _require_keys(entry, {"step", "rates"}, f"{where}.schedule[{i}]")
        schedule.append((int(entry["step"]), tuple(float(x) for x in entry["rates"])))
    try:
        return ArrivalModel(
            rates=rates,
            schedule=tuple(schedule),
            kind=section.get("kind", "bernoulli"),
            poisson_cap=int(section.get("poisson_cap", 3)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_routing(entries: Any, where: str) -> Routing:
    routing: Routing = {}
    if not isinstance(entries, list):
        raise ConfigError(f"{where} must be a list of routing entries")
    for i, entry in enumerate(entries):
        _require_keys(entry, {"from", "to"}, f"{where}[{i}]")
        src = entry["from"]
        hops = tuple((int(j), int(lane), float(p)) for j, lane, p in entry["to"])
        routing[(int(src[0]), int(src[1]))] = hops
    return routing


_SCENARIO_KEYS = {
    "name",
    "kind",
    "steps",
    "arrivals",
    "phase_length",
    "discharge",
    "initial_cutoff",
    "gamma",
    "c2",
    "lambda",
    "lambda_schedule",
    "period_t",
    "warmup",
    "template_delta",
    "warm_start",
    "change_gate",
    "cusum_drift",
    "cusum_threshold",
    "transition_budget",
    "grid",
}


def parse_scenario(data: Mapping[str, Any]) -> ScenarioConfig:
    """Build a scenario from a parsed mapping, rejecting unknown keys."""
    if not isinstance(data, Mapping):
        raise ConfigError("scenario config must be a mapping")
    _require_keys(data, _SCENARIO_KEYS, "scenario")
    if "arrivals" not in data:
        raise ConfigError("scenario needs an arrivals section")
    arrivals = _parse_arrivals(data["arrivals"])

    grid = None
    if data.get("grid") is not None:
        gsec = data["grid"]
        _require_keys(gsec, {"arrivals", "routing", "routing_schedule"}, "grid")
        g_arrivals = tuple(
            _parse_arrivals(a, f"grid.arrivals[{i}]") for i, a in enumerate(gsec["arrivals"])
        )
        routing = _parse_routing(gsec["routing"], "grid.routing")
        schedule = []
        for i, entry in enumerate(gsec.get("routing_schedule") or []):
            _require_keys(entry, {"step", "routing"}, f"grid.routing_schedule[{i}]")
            schedule.append(
                (int(entry["step"]), _parse_routing(entry["routing"], "grid.routing_schedule"))
            )
        grid = GridSpec(arrivals=g_arrivals, routing=routing, routing_schedule=tuple(schedule))

    lam_schedule = None
    if data.get("lambda_schedule") is not None:
        sec = data["lambda_schedule"]
        _require_keys(sec, {"base", "horizon"}, "lambda_schedule")
        lam_schedule = (float(sec["base"]), float(sec["horizon"]))

    try:
        return ScenarioConfig(
            name=str(data.get("name", "custom")),
            kind=str(data.get("kind", "single")),
            arrivals=arrivals,
            steps=int(data.get("steps", 6000)),
            phase_length=int(data.get("phase_length", 20)),
            discharge=int(data.get("discharge", 1)),
            initial_cutoff=tuple(int(v) for v in data.get("initial_cutoff", (3, 3, 3, 3))),
            gamma=float(data.get("gamma", 0.5)),
            c2=float(data.get("c2", 5.0)),
            lam=float(data.get("lambda", 0.3)),
            lam_schedule=lam_schedule,
            period_t=int(data.get("period_t", 500)),
            warmup=int(data.get("warmup", 1000)),
            template_delta=int(data.get("template_delta", 1)),
            warm_start=bool(data.get("warm_start", True)),
            change_gate=bool(data.get("change_gate", False)),
            cusum_drift=float(data.get("cusum_drift", 0.5)),
            cusum_threshold=float(data.get("cusum_threshold", 10.0)),
            transition_budget=int(data.get("transition_budget", DEFAULT_TRANSITION_BUDGET)),
            grid=grid,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Parse a YAML scenario file."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return parse_scenario(data or {})


def resolve_scenario(ref: str, **overrides) -> ScenarioConfig:
    """Builtin scenario name, or a path to a YAML config."""
    if ref in _BUILTINS:
        return make_scenario(ref, **overrides)
    path = Path(ref)
    if path.exists():
        cfg = load_scenario(path)
        clean = {k: v for k, v in overrides.items() if v is not None}
        if clean:
            try:
                cfg = _replace(cfg, **clean)
            except TypeError as exc:
                raise ConfigError(f"unknown override: {exc}") from exc
        return cfg
    raise ConfigError(f"{ref!r} is neither a builtin scenario nor a config file")

"""Small multi-intersection network: departures feed downstream queues.

Stands in for a city network at desk scale. Each intersection is the
four-queue model from :mod:`adashield.traffic`; a routing table sends a
departing vehicle to a downstream queue with a fixed probability, with
the remaining mass leaving the network. Routing tables can be swapped on
a schedule to script incidents such as a blocked road.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .traffic import SERVED_LANES, ArrivalModel, IntersectionState

#: routing: (intersection, lane) -> ((dest_intersection, dest_lane, prob), ...)
Routing = dict[tuple[int, int], tuple[tuple[int, int, float], ...]]


def validate_routing(routing: Routing, n_intersections: int) -> None:
    for (i, lane), hops in routing.items():
        if not (0 <= i < n_intersections and 0 <= lane < 4):
            raise ValueError(f"routing source ({i}, {lane}) out of range")
        total = 0.0
        for j, dest_lane, p in hops:
            if not (0 <= j < n_intersections and 0 <= dest_lane < 4):
                raise ValueError(f"routing target ({j}, {dest_lane}) out of range")
            if p < 0.0:
                raise ValueError("routing probabilities must be non-negative")
            total += p
        if total > 1.0 + 1e-9:
            raise ValueError(
                f"routing probabilities from ({i}, {lane}) sum to {total:.6g} > 1"
            )


@dataclass
class GridNetwork:
    """Intersections plus time-varying routing of departures.

    ``routing_schedule`` lists ``(step, routing)`` change points; the
    routing active at a step is the last change point at or before it.
    """

    arrivals: list[ArrivalModel]
    routing: Routing
    routing_schedule: tuple[tuple[int, Routing], ...] = ()
    discharge: int = 1
    states: list[IntersectionState] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            self.states = [IntersectionState() for _ in self.arrivals]
        if len(self.states) != len(self.arrivals):
            raise ValueError("one arrival model per intersection required")
        validate_routing(self.routing, len(self.states))
        for _, routing in self.routing_schedule:
            validate_routing(routing, len(self.states))

    @property
    def n_intersections(self) -> int:
        return len(self.states)

    def routing_at(self, step: int) -> Routing:
        routing = self.routing
        for at, r in self.routing_schedule:
            if step >= at:
                routing = r
            else:
                break
        return routing

    def queues(self) -> list[tuple[int, ...]]:
        return [s.queues for s in self.states]

    def total_queued(self) -> int:
        return sum(sum(s.queues) for s in self.states)

    def step(self, commands: list[int], step: int, rng: np.random.Generator) -> None:
        """Advance every intersection one step under the given light settings.

        Order per step: discharge served lanes, route each departed
        vehicle (or let it exit), then apply external arrivals and routed
        inflows together. Vehicles routed downstream arrive in the same
        step they depart.
        """
        if len(commands) != self.n_intersections:
            raise ValueError("one command per intersection required")
        routing = self.routing_at(step)
        inflows = [[0, 0, 0, 0] for _ in self.states]

        departures: list[list[int]] = []
        for idx, (state, command) in enumerate(zip(self.states, commands)):
            served = SERVED_LANES[command]
            out = [0, 0, 0, 0]
            for lane in served:
                out[lane] = min(self.discharge, state.queues[lane])
            departures.append(out)

        for idx, out in enumerate(departures):
            for lane in range(4):
                hops = routing.get((idx, lane))
                if not hops:
                    continue
                for _ in range(out[lane]):
                    u = rng.random()
                    acc = 0.0
                    for j, dest_lane, p in hops:
                        acc += p
                        if u < acc:
                            inflows[j][dest_lane] += 1
                            break

        for idx, state in enumerate(self.states):
            external = self.arrivals[idx].sample(step, rng)
            served = SERVED_LANES[commands[idx]]
            queues = []
            for lane in range(4):
                q = state.queues[lane]
                if lane in served:
                    q = max(0, q - self.discharge)
                queues.append(q + external[lane] + inflows[idx][lane])
            total = sum(queues)
            self.states[idx] = IntersectionState(
                queues=tuple(queues),
                clock=state.clock + 1,
                waited=state.waited + total,
            )

"""Small networks and scenario documents shared by the test modules."""

from __future__ import annotations

import copy
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.agents import BidCurve, Side
from src.market import ClearingProblem
from src.netmodel import Bus, Line, LineState, SwitchCandidate, SwitchKind, Topology, build_ptdf


def ring_topology() -> Topology:
    """Three buses in a ring with equal reactances; bus 3 is the slack."""
    return Topology(
        buses=(Bus("1"), Bus("2"), Bus("3", is_slack=True)),
        lines=(
            Line("L12", "1", "2", 1.0, math.inf),
            Line("L13", "1", "3", 1.0, math.inf),
            Line("L23", "2", "3", 1.0, math.inf),
        ),
    )


def feeder_topology(with_switches: bool = True) -> Topology:
    """Slack S feeding 1-2-3-4 radially, with a tie 4-S and an NCS on line 2-3."""
    lines = [
        Line("LS1", "S", "1", 0.1, math.inf),
        Line("L12", "1", "2", 0.1, math.inf),
        Line("L23", "2", "3", 0.1, math.inf, LineState.SWITCHABLE),
        Line("L34", "3", "4", 0.1, math.inf),
        Line("T4S", "4", "S", 0.1, math.inf, LineState.SWITCHABLE),
    ]
    switches = (
        SwitchCandidate("N", SwitchKind.NOS, "T4S"),
        SwitchCandidate("C", SwitchKind.NCS, "L23"),
    )
    return Topology(
        buses=(Bus("S", 0, True), Bus("1", 10), Bus("2", 20), Bus("3", 30), Bus("4", 40)),
        lines=tuple(lines),
        switches=switches if with_switches else (),
    )


def two_bus_topology(capacity: float) -> Topology:
    return Topology(
        buses=(Bus("n1", is_slack=True), Bus("n2")),
        lines=(Line("L1", "n1", "n2", 0.1, capacity),),
    )


def two_bus_problem(capacity: float, step_hours: float = 1.0) -> ClearingProblem:
    """5 MW at 10 $/MWh on bus n1 serving 3 MW valued at 50 $/MWh on bus n2."""
    topology = two_bus_topology(capacity)
    return ClearingProblem(
        H=build_ptdf(topology),
        line_caps=(capacity,),
        supply=(BidCurve(((5.0, 10.0),), Side.SUPPLY, "g1", "n1"),),
        demand=(BidCurve(((3.0, 50.0),), Side.DEMAND, "z1", "n2"),),
        step_hours=step_hours,
    )


def _step_curve(rng: np.random.Generator, side: Side, resource: str, bus: str) -> BidCurve:
    segments = int(rng.integers(1, 4))
    widths = np.round(rng.uniform(0.1, 2.0, segments), 1)
    prices = np.round(np.sort(rng.uniform(1.0, 60.0, segments)), 2)
    if side is Side.DEMAND:
        prices = prices[::-1]
    points = tuple(zip(np.cumsum(widths).tolist(), prices.tolist()))
    return BidCurve(points, side, resource, bus)


def random_problem(seed: int, max_buses: int = 8) -> ClearingProblem:
    """Random connected network with extra meshing, random caps and random step curves."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_buses + 1))
    buses = tuple(Bus(f"b{i}", is_slack=(i == 0)) for i in range(n))
    lines: List[Line] = []
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        lines.append(Line(f"l{len(lines)}", f"b{parent}", f"b{i}", float(rng.uniform(0.05, 0.5)), math.inf))
    for _ in range(int(rng.integers(0, n))):
        a, b = rng.choice(n, size=2, replace=False)
        lines.append(Line(f"l{len(lines)}", f"b{a}", f"b{b}", float(rng.uniform(0.05, 0.5)), math.inf))
    topology = Topology(buses=buses, lines=tuple(lines))
    caps = tuple(
        math.inf if rng.random() < 0.3 else float(np.round(rng.uniform(0.2, 3.0), 2)) for _ in lines
    )
    supply = tuple(
        _step_curve(rng, Side.SUPPLY, f"g{g}", f"b{int(rng.integers(0, n))}") for g in range(int(rng.integers(1, 4)))
    )
    demand = tuple(
        _step_curve(rng, Side.DEMAND, f"z{z}", f"b{int(rng.integers(0, n))}") for z in range(int(rng.integers(1, 5)))
    )
    return ClearingProblem(H=build_ptdf(topology), line_caps=caps, supply=supply, demand=demand)


def _cost_table() -> Dict:
    return {
        "NOS": {"capital": 85000.0, "operating": 200.0},
        "NCS": {"capital": 20000.0, "operating": 200.0},
        "DER": {"capital": 340.0, "operating": 17.0},
    }


def congested_line_document(profile: Sequence[float] = (1.0,), der_grid: Optional[Dict] = None) -> Dict:
    """Two buses joined by one 1.005 MW line; the far bus holds a linear-demand load and a DER site.

    Demand is 400 steps of 0.01 MW priced 20 - 0.04 (j + 0.5) $/MWh; grid and DER energy both cost
    10 $/MWh, so the line is the only thing that makes the far bus dearer.
    """
    utility = [[(j + 1) / 400.0, 20.0 - 0.04 * (j + 0.5)] for j in range(400)]
    return {
        "format_version": 1,
        "name": "congested-line",
        "description": "single congested line",
        "seed": 7,
        "horizon": {"step_hours": 1.0, "profile": list(profile)},
        "buses": [{"id": "n0", "customers": 0, "slack": True}, {"id": "n1", "customers": 10}],
        "lines": [{"id": "L1", "from": "n0", "to": "n1", "reactance": 0.1, "capacity": 1.005}],
        "switches": [],
        "contingencies": [{"id": "base", "failed_lines": [], "weight": 1.0}],
        "loads": [{"id": "z1", "bus": "n1", "peak": 4.0, "utility": utility}],
        "utility_supply": {"id": "grid", "bus": "n0", "capacity": 10.0, "marginal_cost": 10.0,
                           "ramp_up": 10.0, "ramp_down": 10.0},
        "der_sites": [{"id": "DER1", "bus": "n1", "capacity": 0.0, "marginal_cost": 10.0,
                       "ramp_up": 10.0, "ramp_down": 10.0}],
        "agents": [
            {"role": "Utility", "index": 0, "loads": [], "resources": ["grid"]},
            {"role": "Aggregator", "index": 0, "loads": ["z1"], "resources": ["DER1"]},
        ],
        "costs": _cost_table(),
        "discount_rate": 0.07,
        "lifetimes": {"NOS": 20, "NCS": 20, "DER": 20},
        "fixed_supply_cost": 0.0,
        "der_grid": der_grid or {"start": 0.0, "stop": 0.3, "step": 0.01},
        "protocol": {"tolerance": 0.01, "max_iters": 10},
    }


def feeder_document() -> Dict:
    """The five-bus feeder of `feeder_topology` as a scenario document, with one contingency on L23."""
    return {
        "format_version": 1,
        "name": "feeder",
        "seed": 3,
        "horizon": {"step_hours": 1.0, "profile": [0.6, 0.8, 1.0, 0.7]},
        "buses": [
            {"id": "S", "customers": 0, "slack": True},
            {"id": "1", "customers": 10},
            {"id": "2", "customers": 20},
            {"id": "3", "customers": 30},
            {"id": "4", "customers": 40},
        ],
        "lines": [
            {"id": "LS1", "from": "S", "to": "1", "reactance": 0.1, "capacity": None},
            {"id": "L12", "from": "1", "to": "2", "reactance": 0.1, "capacity": None},
            {"id": "L23", "from": "2", "to": "3", "reactance": 0.1, "capacity": None},
            {"id": "L34", "from": "3", "to": "4", "reactance": 0.1, "capacity": None},
            {"id": "T4S", "from": "4", "to": "S", "reactance": 0.1, "capacity": None},
        ],
        "switches": [
            {"id": "C", "kind": "NCS", "line": "L23"},
            {"id": "N", "kind": "NOS", "line": "T4S"},
        ],
        "contingencies": [
            {"id": "base", "failed_lines": [], "weight": 0.6},
            {"id": "fault-L23", "failed_lines": ["L23"], "weight": 0.4},
        ],
        "loads": [
            {"id": f"z{b}", "bus": b, "peak": 0.02 * c, "utility": [[1.0, 40.0]]}
            for b, c in (("1", 10), ("2", 20), ("3", 30), ("4", 40))
        ],
        "utility_supply": {"id": "grid", "bus": "S", "capacity": 10.0, "marginal_cost": 3.0},
        "der_sites": [],
        "agents": [
            {"role": "Utility", "index": 0, "loads": ["z1", "z2", "z3", "z4"], "resources": ["grid"]},
        ],
        "perturbation": {"grid": 1.0},
        "costs": _cost_table(),
        "discount_rate": 0.07,
        "fixed_supply_cost": 1000.0,
        "der_grid": [0.0],
        "protocol": {"tolerance": 0.01, "max_iters": 10},
    }


def with_changes(document: Dict, **changes) -> Dict:
    updated = copy.deepcopy(document)
    updated.update(changes)
    return updated

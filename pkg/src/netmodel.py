"""
Grid topology, switch/contingency reconfiguration and DC power-flow sensitivities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from . import config

logger = logging.getLogger(__name__)

BASE_CASE_ID = "base"
RADIAL_TOLERANCE = 1e-9
_CONDITION_LIMIT = 1e12


class NetworkError(Exception):
    """Base error for network model failures."""


class TopologyError(NetworkError):
    """Raised when a topology or contingency violates a type invariant."""


class DisconnectedGraph(NetworkError):
    """Raised when the closed lines do not connect every required bus to the slack."""


class SingularMatrix(NetworkError):
    """Raised when the reduced susceptance matrix cannot be inverted."""


class UnbalancedInjection(NetworkError):
    """Raised when an injection vector does not sum to zero."""


class UnknownSwitch(NetworkError):
    """Raised when a switch id is not among the candidates."""


class UnknownContingency(NetworkError):
    """Raised when a contingency refers to lines outside the topology."""


class LineState(str, Enum):
    FIXED_CLOSED = "fixed-closed"
    SWITCHABLE = "switchable"


class SwitchKind(str, Enum):
    NOS = "NOS"
    NCS = "NCS"


@dataclass(frozen=True)
class Bus:
    id: str
    customers: int = 0
    is_slack: bool = False

    def __post_init__(self) -> None:
        if not self.id:
            raise TopologyError("bus id is required")
        if self.customers < 0:
            raise TopologyError(f"customers >= 0 (bus {self.id})")

    def to_dict(self) -> Dict:
        return {"id": self.id, "customers": self.customers, "is_slack": self.is_slack}


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    reactance: float
    base_capacity: float
    state: LineState = LineState.FIXED_CLOSED

    def __post_init__(self) -> None:
        if not self.reactance > 0:
            raise TopologyError(f"reactance > 0 (line {self.id})")
        if self.base_capacity < 0:
            raise TopologyError(f"base_capacity >= 0 (line {self.id})")
        if self.from_bus == self.to_bus:
            raise TopologyError(f"from != to (line {self.id})")

    @property
    def endpoints(self) -> Tuple[str, str]:
        return (self.from_bus, self.to_bus)

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "from": self.from_bus,
            "to": self.to_bus,
            "reactance": self.reactance,
            "base_capacity": self.base_capacity,
            "state": self.state.value,
        }


@dataclass(frozen=True)
class SwitchCandidate:
    id: str
    kind: SwitchKind
    host_line: str
    installed: bool = False

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "host_line": self.host_line,
            "installed": self.installed,
        }


@dataclass(frozen=True)
class Contingency:
    id: str
    failed_lines: FrozenSet[str] = frozenset()
    probability_weight: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "failed_lines", frozenset(self.failed_lines))
        if not 0.0 <= self.probability_weight <= 1.0:
            raise TopologyError(f"probability_weight in [0, 1] (contingency {self.id})")

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "failed_lines": sorted(self.failed_lines),
            "probability_weight": self.probability_weight,
        }


BASE_CASE = Contingency(BASE_CASE_ID, frozenset(), 1.0)


@dataclass(frozen=True)
class Topology:
    buses: Tuple[Bus, ...]
    lines: Tuple[Line, ...]
    switches: Tuple[SwitchCandidate, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "switches", tuple(self.switches))
        self._validate()

    def _validate(self) -> None:
        bus_ids = [bus.id for bus in self.buses]
        if len(set(bus_ids)) != len(bus_ids):
            raise TopologyError("bus ids unique")
        line_ids = [line.id for line in self.lines]
        if len(set(line_ids)) != len(line_ids):
            raise TopologyError("line ids unique")
        switch_ids = [switch.id for switch in self.switches]
        if len(set(switch_ids)) != len(switch_ids):
            raise TopologyError("switch ids unique")

        if sum(1 for bus in self.buses if bus.is_slack) != 1:
            raise TopologyError("exactly one slack bus")

        known = set(bus_ids)
        for line in self.lines:
            if line.from_bus not in known or line.to_bus not in known:
                raise TopologyError(f"line {line.id} refers to an unknown bus")

        hosts = set()
        lines_by_id = {line.id: line for line in self.lines}
        for switch in self.switches:
            host = lines_by_id.get(switch.host_line)
            if host is None:
                raise TopologyError(f"switch {switch.id} host line {switch.host_line} unknown")
            if host.state is not LineState.SWITCHABLE:
                raise TopologyError(f"switch {switch.id} must sit on a switchable line")
            if switch.host_line in hosts:
                raise TopologyError(f"one switch per host line ({switch.host_line})")
            hosts.add(switch.host_line)

        graph = self.graph(self.base_closed_set)
        if not nx.is_connected(graph):
            raise TopologyError("graph over closed lines is connected in the base state")

    @cached_property
    def bus_ids(self) -> Tuple[str, ...]:
        return tuple(bus.id for bus in self.buses)

    @cached_property
    def line_ids(self) -> Tuple[str, ...]:
        return tuple(line.id for line in self.lines)

    @cached_property
    def switch_ids(self) -> Tuple[str, ...]:
        return tuple(switch.id for switch in self.switches)

    @cached_property
    def slack(self) -> str:
        return next(bus.id for bus in self.buses if bus.is_slack)

    @cached_property
    def bus_index(self) -> Dict[str, int]:
        return {bus_id: position for position, bus_id in enumerate(self.bus_ids)}

    @cached_property
    def line_index(self) -> Dict[str, int]:
        return {line_id: position for position, line_id in enumerate(self.line_ids)}

    @cached_property
    def _lines_by_id(self) -> Dict[str, Line]:
        return {line.id: line for line in self.lines}

    @cached_property
    def _switches_by_id(self) -> Dict[str, SwitchCandidate]:
        return {switch.id: switch for switch in self.switches}

    @cached_property
    def _switch_by_host(self) -> Dict[str, SwitchCandidate]:
        return {switch.host_line: switch for switch in self.switches}

    def line(self, line_id: str) -> Line:
        return self._lines_by_id[line_id]

    def switch(self, switch_id: str) -> SwitchCandidate:
        try:
            return self._switches_by_id[switch_id]
        except KeyError:
            raise UnknownSwitch(f"Switch {switch_id} is not a candidate") from None

    def switch_on(self, line_id: str) -> Optional[SwitchCandidate]:
        return self._switch_by_host.get(line_id)

    def customers(self, bus_ids: Iterable[str]) -> int:
        counts = {bus.id: bus.customers for bus in self.buses}
        return sum(counts[bus_id] for bus_id in bus_ids)

    @cached_property
    def total_customers(self) -> int:
        return sum(bus.customers for bus in self.buses)

    @cached_property
    def tie_lines(self) -> FrozenSet[str]:
        """Normally-open lines: the hosts of NOS candidates."""
        return frozenset(s.host_line for s in self.switches if s.kind is SwitchKind.NOS)

    @cached_property
    def base_closed_set(self) -> FrozenSet[str]:
        return frozenset(line.id for line in self.lines if line.id not in self.tie_lines)

    @cached_property
    def installed_switches(self) -> FrozenSet[str]:
        return frozenset(s.id for s in self.switches if s.installed)

    def graph(self, closed_set: Iterable[str]) -> nx.MultiGraph:
        graph = nx.MultiGraph()
        graph.add_nodes_from(self.bus_ids)
        for line_id in closed_set:
            line = self._lines_by_id[line_id]
            graph.add_edge(line.from_bus, line.to_bus, key=line.id)
        return graph

    def to_dict(self) -> Dict:
        return {
            "buses": [bus.to_dict() for bus in self.buses],
            "lines": [line.to_dict() for line in self.lines],
            "switches": [switch.to_dict() for switch in self.switches],
        }


@dataclass(frozen=True)
class PtdfMatrix:
    """Line-flow sensitivities to bus injections; rows follow `line_ids`, columns `bus_ids`.

    The slack column (and any bus outside the slack's island) is identically zero, so
    `entries` is always lines x all buses. `columns` lists the non-slack buses that carry
    a sensitivity.
    """

    entries: np.ndarray
    line_ids: Tuple[str, ...]
    bus_ids: Tuple[str, ...]
    slack: str
    columns: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @cached_property
    def bus_index(self) -> Dict[str, int]:
        return {bus_id: position for position, bus_id in enumerate(self.bus_ids)}

    @cached_property
    def line_index(self) -> Dict[str, int]:
        return {line_id: position for position, line_id in enumerate(self.line_ids)}

    def column(self, bus_id: str) -> np.ndarray:
        return self.entries[:, self.bus_index[bus_id]]

    def is_radial(self) -> bool:
        rounded = np.round(self.entries)
        return bool(
            np.all(np.abs(self.entries - rounded) < RADIAL_TOLERANCE)
            and np.all(np.isin(rounded, (-1.0, 0.0, 1.0)))
        )


def build_ptdf(
    topology: Topology,
    closed_set: Optional[Iterable[str]] = None,
    slack: Optional[str] = None,
    required_buses: Optional[Iterable[str]] = None,
) -> PtdfMatrix:
    """Build H such that flows = H @ injections for balanced injections.

    `required_buses` defaults to every bus; any of them outside the slack's island raises
    DisconnectedGraph. Buses that are allowed to be islanded get zero columns.
    """
    closed = frozenset(topology.base_closed_set if closed_set is None else closed_set)
    slack = slack or topology.slack
    if slack not in topology.bus_index:
        raise TopologyError(f"slack bus {slack} is unknown")
    unknown = closed - set(topology.line_ids)
    if unknown:
        raise TopologyError(f"closed set refers to unknown lines {sorted(unknown)}")

    graph = topology.graph(closed)
    island = nx.node_connected_component(graph, slack)
    required = set(topology.bus_ids if required_buses is None else required_buses)
    missing = sorted(required - island)
    if missing:
        raise DisconnectedGraph(f"Buses {missing} are not connected to slack {slack}")

    columns = tuple(b for b in topology.bus_ids if b in island and b != slack)
    col_of = {bus_id: position for position, bus_id in enumerate(columns)}
    active = [line for line in topology.lines if line.id in closed and line.from_bus in island]

    n = len(columns)
    b_reduced = np.zeros((n, n))
    b_flow = np.zeros((len(topology.lines), n))
    for line in active:
        susceptance = 1.0 / line.reactance
        row = topology.line_index[line.id]
        f = col_of.get(line.from_bus)
        t = col_of.get(line.to_bus)
        if f is not None:
            b_reduced[f, f] += susceptance
            b_flow[row, f] += susceptance
        if t is not None:
            b_reduced[t, t] += susceptance
            b_flow[row, t] -= susceptance
        if f is not None and t is not None:
            b_reduced[f, t] -= susceptance
            b_reduced[t, f] -= susceptance

    entries = np.zeros((len(topology.lines), len(topology.bus_ids)))
    if n:
        if np.linalg.cond(b_reduced) > _CONDITION_LIMIT:
            raise SingularMatrix("Reduced susceptance matrix is numerically singular")
        try:
            # B is symmetric, so H = Bf @ inv(B) = solve(B, Bf.T).T
            reduced = np.linalg.solve(b_reduced, b_flow.T).T
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix(str(exc)) from exc
        for position, bus_id in enumerate(columns):
            entries[:, topology.bus_index[bus_id]] = reduced[:, position]

    logger.debug("Built PTDF for %d lines x %d buses (slack %s)", len(topology.lines), n, slack)
    return PtdfMatrix(
        entries=entries,
        line_ids=topology.line_ids,
        bus_ids=topology.bus_ids,
        slack=slack,
        columns=columns,
    )


Injections = Union[Mapping[str, float], Sequence[float], np.ndarray]


def injection_vector(H: PtdfMatrix, injections: Injections) -> np.ndarray:
    if isinstance(injections, Mapping):
        vector = np.zeros(len(H.bus_ids))
        for bus_id, value in injections.items():
            vector[H.bus_index[bus_id]] += float(value)
        return vector
    vector = np.asarray(injections, dtype=float)
    if vector.shape != (len(H.bus_ids),):
        raise ValueError(f"injections must have shape ({len(H.bus_ids)},), got {vector.shape}")
    return vector


def line_flows(H: PtdfMatrix, injections: Injections) -> np.ndarray:
    """Per-line MW flows (from -> to positive) for a balanced injection vector."""
    vector = injection_vector(H, injections)
    scale = max(1.0, float(np.abs(vector).sum()))
    if abs(float(vector.sum())) > config.BALANCE_TOLERANCE * scale:
        raise UnbalancedInjection(f"Injections sum to {vector.sum():.3e}, expected 0")
    return H.entries @ vector


def _check_installed(topology: Topology, installed: Iterable[str]) -> FrozenSet[str]:
    installed = frozenset(installed)
    for switch_id in sorted(installed):
        topology.switch(switch_id)
    return installed


def effective_topology(
    topology: Topology,
    installed: Iterable[str],
    contingency: Optional[Contingency] = None,
) -> Tuple[FrozenSet[str], FrozenSet[str]]:
    """Closed lines and energized buses after a contingency and switch restoration.

    Failed lines are removed and the slack island stays energized. The far end of a failed
    line is left de-energized unless an installed NCS sits on that line. Installed NOS ties
    then close, in id order, whenever they reach a healthy de-energized island.
    """
    installed = _check_installed(topology, installed)
    contingency = contingency or BASE_CASE
    unknown = contingency.failed_lines - set(topology.line_ids)
    if unknown:
        raise UnknownContingency(
            f"Contingency {contingency.id} fails unknown lines {sorted(unknown)}"
        )

    base_closed = topology.base_closed_set
    if not contingency.failed_lines:
        return base_closed, frozenset(topology.bus_ids)

    failed = contingency.failed_lines
    closed = set(base_closed - failed)
    energized = set(nx.node_connected_component(topology.graph(closed), topology.slack))

    faulted = set()
    for line_id in sorted(failed & base_closed):
        switch = topology.switch_on(line_id)
        if switch is not None and switch.id in installed and switch.kind is SwitchKind.NCS:
            continue
        faulted.update(end for end in topology.line(line_id).endpoints if end not in energized)

    closed = {
        line_id
        for line_id in closed
        if not faulted.intersection(topology.line(line_id).endpoints)
    }

    ties = sorted(
        (topology.switch(switch_id) for switch_id in installed),
        key=lambda s: s.id,
    )
    ties = [s for s in ties if s.kind is SwitchKind.NOS and s.host_line not in failed]
    graph = topology.graph(closed)
    progress = True
    while progress:
        progress = False
        for tie in ties:
            if tie.host_line in closed:
                continue
            a, b = topology.line(tie.host_line).endpoints
            if a in energized and b not in energized and b not in faulted:
                island_end = b
            elif b in energized and a not in energized and a not in faulted:
                island_end = a
            else:
                continue
            energized |= nx.node_connected_component(graph, island_end)
            closed.add(tie.host_line)
            graph.add_edge(a, b, key=tie.host_line)
            progress = True

    return frozenset(closed), frozenset(energized)


def _contingency_set(contingencies: Sequence[Contingency]) -> List[Contingency]:
    contingencies = list(contingencies) or [BASE_CASE]
    total = sum(c.probability_weight for c in contingencies)
    if abs(total - 1.0) > 1e-9:
        raise TopologyError(f"contingency weights sum to 1 (got {total:.12g})")
    return contingencies


def energization_probabilities(
    topology: Topology,
    installed: Iterable[str],
    contingencies: Sequence[Contingency],
) -> Dict[str, float]:
    """Probability-weighted share of the contingency set in which each bus is energized."""
    installed = _check_installed(topology, installed)
    probabilities = {bus_id: 0.0 for bus_id in topology.bus_ids}
    for contingency in _contingency_set(contingencies):
        _, energized = effective_topology(topology, installed, contingency)
        for bus_id in energized:
            probabilities[bus_id] += contingency.probability_weight
    return probabilities


def served_customers(
    topology: Topology,
    installed: Iterable[str],
    contingencies: Sequence[Contingency],
) -> float:
    probabilities = energization_probabilities(topology, installed, contingencies)
    return float(sum(bus.customers * probabilities[bus.id] for bus in topology.buses))

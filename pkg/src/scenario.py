"""
Scenario files: parsing, validation and the network/agent views the planners work from.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import config
from .agents import AgentError, DemandSpec, DerSpec
from .netmodel import (
    BASE_CASE,
    Bus,
    Contingency,
    Line,
    LineState,
    NetworkError,
    PtdfMatrix,
    SwitchCandidate,
    SwitchKind,
    Topology,
    build_ptdf,
    effective_topology,
)
from .plp import CostSpec, PlanningError, annualize_cost
from .protocol import AgentId, MarketAgent, Role, StepContext

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KW_PER_MW = 1000.0


class ScenarioError(Exception):
    """Base error for scenario loading failures."""


class ParseError(ScenarioError):
    """Raised when a scenario file cannot be read as a scenario document."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None, path: str = ""):
        where = []
        if line is not None:
            where.append(f"line {line}, column {column}")
        if path:
            where.append(f"field {path}")
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)
        self.line = line
        self.column = column
        self.path = path


class ValidationError(ScenarioError):
    """Raised when a parsed scenario violates a model invariant."""


@dataclass(frozen=True)
class AgentConfig:
    role: Role
    index: int
    loads: Tuple[str, ...] = ()
    resources: Tuple[str, ...] = ()

    @property
    def id(self) -> AgentId:
        return AgentId(self.role, self.index)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    topology: Topology
    loads: Tuple[DemandSpec, ...]
    utility_supply: DerSpec
    der_sites: Tuple[DerSpec, ...]
    agents: Tuple[AgentConfig, ...]
    costs: Dict[str, CostSpec]
    fixed_supply_cost: float
    contingencies: Tuple[Contingency, ...]
    profile: Tuple[float, ...]
    step_hours: float = 1.0
    perturbation: Dict[str, float] = field(default_factory=dict)
    der_grid: Tuple[float, ...] = (0.0,)
    price_tolerance: float = config.PRICE_TOLERANCE
    max_iters: int = config.MAX_ITERS
    seed: int = config.SEED
    digest: str = ""
    description: str = ""
    source: Dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def horizon(self) -> int:
        return len(self.profile)

    def load_factor(self, step: int) -> float:
        return self.profile[step % len(self.profile)]

    def der_site(self, site_id: str) -> DerSpec:
        for site in self.der_sites:
            if site.id == site_id:
                return site
        raise ValidationError(f"unknown DER site {site_id}")

    def kappa_switch(self, switch_id: str) -> float:
        """Annualized cost of one switch, $/yr."""
        return annualize_cost(self.costs[self.topology.switch(switch_id).kind.value])

    def kappa_der(self) -> float:
        """Annualized DER capacity cost, $/MW-yr."""
        return annualize_cost(self.costs["DER"]) * KW_PER_MW

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)

    def network(
        self, installed: Iterable[str], contingency: Optional[Contingency] = None
    ) -> Tuple[PtdfMatrix, FrozenSet[str]]:
        return _network(self.topology, frozenset(installed), contingency or BASE_CASE)

    def step_context(
        self,
        step: int,
        installed: Optional[Iterable[str]] = None,
        contingency: Optional[Contingency] = None,
    ) -> StepContext:
        installed = self.topology.installed_switches if installed is None else installed
        H, energized = self.network(installed, contingency)
        return StepContext(
            step=step,
            load_factor=self.load_factor(step),
            step_hours=self.step_hours,
            H=H,
            line_caps=tuple(line.base_capacity for line in self.topology.lines),
            energized=energized,
        )

    def market_agents(self, der_capacity: Optional[Mapping[str, float]] = None) -> List[MarketAgent]:
        """Fresh bidding agents; `der_capacity` adds MW on top of each site's existing capacity."""
        der_capacity = der_capacity or {}
        loads = {spec.id: spec for spec in self.loads}
        resources = {self.utility_supply.id: self.utility_supply}
        for site in self.der_sites:
            resources[site.id] = site.with_capacity(site.capacity + der_capacity.get(site.id, 0.0))
        return [
            MarketAgent(
                id=agent.id,
                loads=tuple(loads[z] for z in agent.loads),
                resources=tuple(resources[r] for r in agent.resources),
                perturbation={r: self.perturbation[r] for r in agent.resources if r in self.perturbation},
                seed=self.seed,
            )
            for agent in self.agents
        ]

    def to_dict(self) -> Dict:
        return dict(self.source)


@lru_cache(maxsize=1024)
def _network(
    topology: Topology, installed: FrozenSet[str], contingency: Contingency
) -> Tuple[PtdfMatrix, FrozenSet[str]]:
    """PTDF and energized buses of one switch set under one contingency."""
    closed, energized = effective_topology(topology, installed, contingency)
    return build_ptdf(topology, closed, required_buses=energized), energized


def _digest(data: Mapping) -> str:
    body = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _require(data: Mapping, key: str, path: str) -> Any:
    if not isinstance(data, Mapping):
        raise ParseError("expected an object", path=path)
    if key not in data:
        raise ParseError(f"missing field '{key}'", path=f"{path}.{key}" if path else key)
    return data[key]


def _mapping(value: Any, path: str) -> Mapping:
    if not isinstance(value, Mapping):
        raise ParseError(f"expected an object, got {type(value).__name__}", path=path)
    return value


def _der_spec(data: Mapping, path: str) -> DerSpec:
    return DerSpec(
        id=str(_require(data, "id", path)),
        bus=str(_require(data, "bus", path)),
        capacity=float(_require(data, "capacity", path)),
        marginal_cost=float(_require(data, "marginal_cost", path)),
        ramp_up=float(data.get("ramp_up", math.inf)),
        ramp_down=float(data.get("ramp_down", math.inf)),
        p_min=float(data.get("p_min", 0.0)),
    )


def _grid(data: Any, path: str) -> Tuple[float, ...]:
    if isinstance(data, Mapping):
        start = float(_require(data, "start", path))
        stop = float(_require(data, "stop", path))
        step = float(_require(data, "step", path))
        if step <= 0:
            raise ValidationError("der_grid step > 0")
        count = int(round((stop - start) / step))
        return tuple(float(v) for v in np.round(start + step * np.arange(count + 1), 10))
    return tuple(float(v) for v in data)


def scenario_from_dict(data: Mapping, digest: Optional[str] = None) -> ScenarioConfig:
    """Build and validate a scenario from its parsed document."""
    version = _require(data, "format_version", "")
    if version != FORMAT_VERSION:
        raise ValidationError(f"format_version == {FORMAT_VERSION} (got {version})")
    try:
        return _build(data, digest or _digest(data))
    except (NetworkError, AgentError, PlanningError) as exc:
        raise ValidationError(str(exc)) from exc
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed value: {exc}") from exc


def _build(data: Mapping, digest: str) -> ScenarioConfig:
    switch_rows = _require(data, "switches", "")
    hosts = {str(_require(s, "line", f"switches[{i}]")) for i, s in enumerate(switch_rows)}

    buses = tuple(
        Bus(
            id=str(_require(b, "id", f"buses[{i}]")),
            customers=int(b.get("customers", 0)),
            is_slack=bool(b.get("slack", False)),
        )
        for i, b in enumerate(_require(data, "buses", ""))
    )
    lines = []
    for i, row in enumerate(_require(data, "lines", "")):
        path = f"lines[{i}]"
        line_id = str(_require(row, "id", path))
        capacity = row.get("capacity")
        switchable = bool(row.get("switchable", line_id in hosts))
        lines.append(
            Line(
                id=line_id,
                from_bus=str(_require(row, "from", path)),
                to_bus=str(_require(row, "to", path)),
                reactance=float(_require(row, "reactance", path)),
                base_capacity=math.inf if capacity is None else float(capacity),
                state=LineState.SWITCHABLE if switchable else LineState.FIXED_CLOSED,
            )
        )
    switches = tuple(
        SwitchCandidate(
            id=str(_require(s, "id", f"switches[{i}]")),
            kind=SwitchKind(str(_require(s, "kind", f"switches[{i}]"))),
            host_line=str(s["line"]),
            installed=bool(s.get("installed", False)),
        )
        for i, s in enumerate(switch_rows)
    )
    topology = Topology(buses=buses, lines=tuple(lines), switches=switches)

    loads = []
    for i, row in enumerate(_require(data, "loads", "")):
        path = f"loads[{i}]"
        peak = float(_require(row, "peak", path))
        points = tuple((float(q) * peak, float(p)) for q, p in _require(row, "utility", path))
        loads.append(DemandSpec(id=str(_require(row, "id", path)), bus=str(_require(row, "bus", path)), l_max=peak, utility_points=points))
    utility_supply = _der_spec(_require(data, "utility_supply", ""), "utility_supply")
    der_sites = tuple(_der_spec(row, f"der_sites[{i}]") for i, row in enumerate(data.get("der_sites", [])))

    discount_rate = float(data.get("discount_rate", 0.07))
    lifetimes = _mapping(data.get("lifetimes", {}), "lifetimes")
    costs = {}
    for kind, row in _mapping(_require(data, "costs", ""), "costs").items():
        costs[kind] = CostSpec(
            capital=float(_require(row, "capital", f"costs.{kind}")),
            operating=float(_require(row, "operating", f"costs.{kind}")),
            discount_rate=discount_rate,
            lifetime=int(lifetimes.get(kind, 20)),
        )

    contingencies = tuple(
        Contingency(
            id=str(_require(c, "id", f"contingencies[{i}]")),
            failed_lines=frozenset(c.get("failed_lines", [])),
            probability_weight=float(_require(c, "weight", f"contingencies[{i}]")),
        )
        for i, c in enumerate(data.get("contingencies", []))
    )

    agents = tuple(
        AgentConfig(
            role=Role(str(_require(a, "role", f"agents[{i}]"))),
            index=int(a.get("index", 0)),
            loads=tuple(a.get("loads", [])),
            resources=tuple(a.get("resources", [])),
        )
        for i, a in enumerate(_require(data, "agents", ""))
    )

    horizon = _mapping(_require(data, "horizon", ""), "horizon")
    profile = tuple(float(v) for v in _require(horizon, "profile", "horizon"))
    protocol = _mapping(data.get("protocol", {}), "protocol")

    scenario = ScenarioConfig(
        name=str(data.get("name", "scenario")),
        topology=topology,
        loads=tuple(loads),
        utility_supply=utility_supply,
        der_sites=der_sites,
        agents=agents,
        costs=costs,
        fixed_supply_cost=float(data.get("fixed_supply_cost", 0.0)),
        contingencies=contingencies,
        profile=profile,
        step_hours=float(horizon.get("step_hours", 1.0)),
        perturbation={str(k): float(v) for k, v in _mapping(data.get("perturbation", {}), "perturbation").items()},
        der_grid=_grid(data.get("der_grid", [0.0]), "der_grid"),
        price_tolerance=float(protocol.get("tolerance", config.PRICE_TOLERANCE)),
        max_iters=int(protocol.get("max_iters", config.MAX_ITERS)),
        seed=int(data.get("seed", config.SEED)),
        digest=digest,
        description=str(data.get("description", "")),
        source=json.loads(json.dumps(data)),
    )
    validate(scenario)
    return scenario


def validate(scenario: ScenarioConfig) -> None:
    """Cross-reference checks that the individual types cannot make on their own."""
    topology = scenario.topology
    buses = set(topology.bus_ids)
    load_ids = [z.id for z in scenario.loads]
    resource_ids = [scenario.utility_supply.id] + [s.id for s in scenario.der_sites]
    if len(set(load_ids)) != len(load_ids):
        raise ValidationError("load ids unique")
    if len(set(resource_ids)) != len(resource_ids):
        raise ValidationError("resource ids unique")
    for spec in list(scenario.loads) + [scenario.utility_supply] + list(scenario.der_sites):
        if spec.bus not in buses:
            raise ValidationError(f"{spec.id} refers to unknown bus {spec.bus}")
    if scenario.utility_supply.bus != topology.slack:
        raise ValidationError("utility supply sits at the slack bus")

    roles = [a.role for a in scenario.agents]
    if roles.count(Role.UTILITY) != 1:
        raise ValidationError("exactly one Utility")
    if Role.DSO in roles:
        raise ValidationError("the DSO is implicit and owns no assets")
    if len({a.id for a in scenario.agents}) != len(scenario.agents):
        raise ValidationError("agent ids unique")
    owned_loads: List[str] = []
    owned_resources: List[str] = []
    der_ids = {s.id for s in scenario.der_sites}
    for agent in scenario.agents:
        for z in agent.loads:
            if z not in load_ids:
                raise ValidationError(f"agent {agent.id} refers to unknown load {z}")
        for r in agent.resources:
            if r not in resource_ids:
                raise ValidationError(f"agent {agent.id} refers to unknown resource {r}")
            if r in der_ids and agent.role is not Role.AGGREGATOR:
                raise ValidationError("DER sites belong to aggregators")
        owned_loads.extend(agent.loads)
        owned_resources.extend(agent.resources)
    if sorted(owned_loads) != sorted(load_ids):
        raise ValidationError("every load has exactly one owning agent")
    if sorted(owned_resources) != sorted(resource_ids):
        raise ValidationError("every supply resource has exactly one owning agent")
    for r in scenario.perturbation:
        if r not in resource_ids:
            raise ValidationError(f"perturbation refers to unknown resource {r}")

    for kind in ("NOS", "NCS", "DER"):
        if kind not in scenario.costs:
            raise ValidationError(f"cost table lists {kind}")
    if not scenario.contingencies:
        raise ValidationError("contingency set nonempty")
    total = sum(c.probability_weight for c in scenario.contingencies)
    if abs(total - 1.0) > 1e-9:
        raise ValidationError(f"contingency weights sum to 1 (got {total:.12g})")
    for c in scenario.contingencies:
        unknown = c.failed_lines - set(topology.line_ids)
        if unknown:
            raise ValidationError(f"contingency {c.id} refers to unknown lines {sorted(unknown)}")

    if not scenario.profile or any(v < 0 for v in scenario.profile):
        raise ValidationError("profile nonempty and nonnegative")
    if scenario.step_hours <= 0:
        raise ValidationError("step_hours > 0")
    if scenario.fixed_supply_cost < 0:
        raise ValidationError("fixed_supply_cost >= 0")
    if any(k < 0 for k in scenario.der_grid):
        raise ValidationError("der_grid nonnegative")
    if scenario.max_iters < 1:
        raise ValidationError("max_iters >= 1")


def load_scenario(path: Optional[Path] = None) -> ScenarioConfig:
    path = Path(path or config.SCENARIO_PATH)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read scenario {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, column=exc.colno) from exc
    scenario = scenario_from_dict(data)
    logger.info("Loaded scenario %s (%s) from %s", scenario.name, scenario.digest[:12], path)
    return scenario

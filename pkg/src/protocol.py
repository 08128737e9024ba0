"""
Deterministic DSO / aggregator / utility message exchange for one clearing step.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from . import config
from .agents import (
    BidCurve,
    DemandSpec,
    DerSpec,
    Side,
    demand_curve_of,
    perturbation_draw,
    ramp_envelope_step,
    supply_curve_of,
)
from .market import ClearingProblem, ClearingResult, KktReport, clear_step, require_kkt
from .netmodel import PtdfMatrix

logger = logging.getLogger(__name__)


class ProtocolError(Exception):
    """Base error for message-exchange failures."""


class NoConvergence(ProtocolError):
    """Raised when a strict round exhausts its iteration cap."""


class ProtocolViolation(ProtocolError):
    """Raised when a message or agent set breaks the protocol's rules."""


class Role(str, Enum):
    DSO = "DSO"
    AGGREGATOR = "Aggregator"
    UTILITY = "Utility"


class MessageKind(str, Enum):
    FORECAST = "Forecast"
    BID_CURVES = "BidCurves"
    PRICE_UPDATE = "PriceUpdate"
    AWARD = "Award"


_PAYLOAD_KEYS = {
    MessageKind.FORECAST: {"step", "load_factor", "step_hours", "energized"},
    MessageKind.BID_CURVES: {"curves", "final"},
    MessageKind.PRICE_UPDATE: {"lambda", "tolerance"},
    MessageKind.AWARD: {"resources", "loads"},
}

BROADCAST = "*"


@dataclass(frozen=True, order=True)
class AgentId:
    role: Role
    index: int = 0

    @property
    def name(self) -> str:
        return f"{self.role.value}-{self.index}"

    def __str__(self) -> str:
        return self.name


DSO_ID = AgentId(Role.DSO, 0)


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: AgentId
    recipient: Optional[AgentId]
    step: int
    iteration: int
    payload: Dict

    def __post_init__(self) -> None:
        expected = _PAYLOAD_KEYS[self.kind]
        if set(self.payload) != expected:
            raise ProtocolViolation(
                f"{self.kind.value} payload keys {sorted(self.payload)} != {sorted(expected)}"
            )

    def digest(self) -> str:
        body = json.dumps(self.payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def to_record(self) -> Dict:
        return {
            "step": self.step,
            "iter": self.iteration,
            "kind": self.kind.value,
            "sender": self.sender.name,
            "recipient": self.recipient.name if self.recipient else BROADCAST,
            "digest": self.digest(),
        }


@dataclass
class RoundLog:
    iterations: int = 0
    price_trajectory: List[float] = field(default_factory=list)
    converged: bool = False
    messages: List[Message] = field(default_factory=list)
    problem: Optional[ClearingProblem] = None
    report: Optional[KktReport] = None

    def transcript_lines(self) -> List[str]:
        return [json.dumps(m.to_record(), sort_keys=True) for m in self.messages]


def has_converged(log: RoundLog, tolerance: float) -> bool:
    if not log.price_trajectory:
        raise ProtocolViolation("has_converged needs a nonempty log")
    if len(log.price_trajectory) == 1:
        return True
    return abs(log.price_trajectory[-1] - log.price_trajectory[-2]) < tolerance


@dataclass(frozen=True)
class StepContext:
    """What the DSO knows about one step: the network and the load forecast."""

    step: int
    load_factor: float
    step_hours: float
    H: PtdfMatrix
    line_caps: Tuple[float, ...]
    energized: FrozenSet[str]

    def forecast_payload(self) -> Dict:
        return {
            "step": self.step,
            "load_factor": self.load_factor,
            "step_hours": self.step_hours,
            "energized": sorted(self.energized),
        }


@dataclass
class MarketAgent:
    """An aggregator or the utility: owns loads and supply resources, answers with bid curves.

    Specs stay private to the agent; only curves leave it. `previous` holds the last awarded
    quantity per resource and drives the ramp envelope of the next step. Risk margins live for
    one round: `open_round` sets them and every posted price revises them.
    """

    id: AgentId
    loads: Tuple[DemandSpec, ...] = ()
    resources: Tuple[DerSpec, ...] = ()
    perturbation: Dict[str, float] = field(default_factory=dict)
    seed: int = 0
    previous: Dict[str, float] = field(default_factory=dict)
    _margins: Dict[str, float] = field(default_factory=dict, init=False, repr=False)
    _step: int = field(default=0, init=False, repr=False)

    def set_capacity(self, resource_id: str, capacity: float) -> None:
        self.resources = tuple(
            r.with_capacity(capacity) if r.id == resource_id else r for r in self.resources
        )

    def _amplitude(self, resource_index: int, spec: DerSpec, step: int) -> float:
        delta = self.perturbation.get(spec.id, 0.0)
        if not delta:
            return 0.0
        entropy = (self.seed, _ROLE_CODE[self.id.role], self.id.index, step, resource_index)
        return abs(perturbation_draw(entropy) * delta)

    def open_round(self, step: int, tolerance: float) -> None:
        """Start a step with the full risk margin on every resource whose margin reaches `tolerance`."""
        self._step = step
        self._margins = {
            spec.id: 1.0 if self._amplitude(i, spec, step) >= tolerance else 0.0
            for i, spec in enumerate(self.resources)
        }

    def revise(self, price: float, tolerance: float) -> None:
        """Revise margins against the posted balance price.

        A resource keeps half its margin only while its cost lies within that margin of the
        price; resources clear of the price bid truthfully from here on.
        """
        for i, spec in enumerate(self.resources):
            scale = self._margins.get(spec.id, 0.0)
            if not scale:
                continue
            amplitude = self._amplitude(i, spec, self._step)
            if abs(spec.marginal_cost - price) > amplitude * scale + tolerance:
                scale = 0.0
            else:
                scale *= 0.5
            self._margins[spec.id] = scale if amplitude * scale >= tolerance else 0.0

    def is_final(self) -> bool:
        """True when no resource carries a margin, so the next curves equal the current ones."""
        return not any(self._margins.values())

    def bid_curves(self, context: Dict, perturb: bool = True) -> List[BidCurve]:
        energized = set(context["energized"])
        step = context["step"]
        curves: List[BidCurve] = []
        for spec in self.loads:
            if spec.bus not in energized:
                continue
            curve = demand_curve_of(spec.scaled(context["load_factor"]))
            if not curve.is_empty:
                curves.append(curve)
        for i, spec in enumerate(self.resources):
            if spec.bus not in energized or spec.capacity <= 0:
                continue
            envelope = ramp_envelope_step(spec, self.previous.get(spec.id))
            if envelope.p_max_t <= 0:
                continue
            scale = self._margins.get(spec.id, 0.0) if perturb else 0.0
            curves.append(
                supply_curve_of(
                    spec,
                    envelope,
                    perturbation=self.perturbation.get(spec.id, 0.0),
                    rng_seed=(self.seed, _ROLE_CODE[self.id.role], self.id.index, step, i),
                    scale=scale,
                )
            )
        return curves

    def accept_award(self, payload: Dict) -> None:
        for resource_id, award in payload["resources"].items():
            self.previous[resource_id] = award["quantity"]
        for spec in self.resources:
            if spec.id not in payload["resources"]:
                self.previous[spec.id] = 0.0


_ROLE_CODE = {Role.DSO: 0, Role.UTILITY: 1, Role.AGGREGATOR: 2}


def check_agents(agents: Sequence[MarketAgent]) -> None:
    roles = [a.id.role for a in agents]
    if Role.DSO in roles:
        raise ProtocolViolation("the DSO is not a bidding agent")
    if roles.count(Role.UTILITY) != 1:
        raise ProtocolViolation("exactly one Utility")
    if len({a.id for a in agents}) != len(agents):
        raise ProtocolViolation("agent ids unique")


def assemble_problem(context: StepContext, curves: Iterable[BidCurve]) -> ClearingProblem:
    curves = list(curves)
    return ClearingProblem(
        H=context.H,
        line_caps=context.line_caps,
        supply=tuple(c for c in curves if c.side is Side.SUPPLY),
        demand=tuple(c for c in curves if c.side is Side.DEMAND),
        step_hours=context.step_hours,
        step=context.step,
    )


def award_payload(agent_curves: List[BidCurve], result: ClearingResult) -> Dict:
    resources, loads = {}, {}
    for curve in agent_curves:
        price = result.nodal_prices[curve.bus]
        if curve.side is Side.SUPPLY:
            resources[curve.resource] = {"quantity": result.dispatch.gen[curve.resource], "price": price}
        else:
            loads[curve.resource] = {"quantity": result.dispatch.load[curve.resource], "price": price}
    return {"resources": resources, "loads": loads}


def run_clearing_round(
    agents: Sequence[MarketAgent],
    context: StepContext,
    tolerance: Optional[float] = None,
    max_iters: Optional[int] = None,
    strict: bool = False,
) -> Tuple[ClearingResult, RoundLog]:
    """Forecast, collect curves, clear, post prices until agents settle, then award.

    The round stops when every agent reports a final curve at the first clearing, or when the
    balance price moves by less than `tolerance` between clearings. A round that reaches
    `max_iters` first returns its last iterate with `converged = False` (or raises when strict).
    """
    tolerance = config.PRICE_TOLERANCE if tolerance is None else tolerance
    max_iters = config.MAX_ITERS if max_iters is None else max_iters
    if max_iters < 1:
        raise ProtocolViolation("max_iters >= 1")
    check_agents(agents)

    log = RoundLog()
    forecast = context.forecast_payload()
    log.messages.append(Message(MessageKind.FORECAST, DSO_ID, None, context.step, 1, forecast))

    submitted: Dict[AgentId, List[BidCurve]] = {}
    finals: Dict[AgentId, bool] = {}

    def collect(k: int, update: Optional[Dict] = None) -> None:
        for agent in agents:
            if update is None:
                agent.open_round(context.step, tolerance)
            else:
                agent.revise(update["lambda"], update["tolerance"])
            curves = agent.bid_curves(forecast)
            final = agent.is_final()
            if k > 0 and finals.get(agent.id) and curves == submitted.get(agent.id):
                continue
            submitted[agent.id] = curves
            finals[agent.id] = final
            payload = {"curves": [c.to_dict() for c in curves], "final": final}
            log.messages.append(Message(MessageKind.BID_CURVES, agent.id, DSO_ID, context.step, k + 1, payload))

    collect(0)
    result: Optional[ClearingResult] = None
    problem: Optional[ClearingProblem] = None
    for iteration in range(1, max_iters + 1):
        if iteration > 1:
            update = {"lambda": log.price_trajectory[-1], "tolerance": tolerance}
            log.messages.append(Message(MessageKind.PRICE_UPDATE, DSO_ID, None, context.step, iteration, update))
            collect(iteration - 1, update)
        problem = assemble_problem(context, (c for a in agents for c in submitted[a.id]))
        result = clear_step(problem)
        log.price_trajectory.append(result.duals.lam)
        log.iterations = iteration
        settled = all(finals.values())
        if (iteration == 1 and settled) or (iteration > 1 and has_converged(log, tolerance)):
            log.converged = True
            break

    if not log.converged:
        logger.warning(
            "Step %d did not converge in %d iterations (last prices %s)",
            context.step,
            max_iters,
            log.price_trajectory[-2:],
        )
        if strict:
            raise NoConvergence(f"Step {context.step}: no price fixed point within {max_iters} iterations")

    log.problem = problem
    log.report = require_kkt(problem, result)
    for agent in agents:
        payload = award_payload(submitted[agent.id], result)
        log.messages.append(Message(MessageKind.AWARD, DSO_ID, agent.id, context.step, log.iterations, payload))
        agent.accept_award(payload)

    logger.debug(
        "Step %d settled after %d iterations at lambda=%.6f", context.step, log.iterations, result.duals.lam
    )
    return result, log


def transcript_lines(logs: Iterable[RoundLog]) -> List[str]:
    lines: List[str] = []
    for log in logs:
        lines.extend(log.transcript_lines())
    return lines


def write_transcript(logs: Iterable[RoundLog], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for line in transcript_lines(logs):
            handle.write(line + "\n")
    return path

"""
Agent-side behaviour: bid curve construction, ramp envelopes, surplus accounting and DER investment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CURVE_TOLERANCE = 1e-12

Point = Tuple[float, float]
SeedLike = Union[None, int, Sequence[int]]


class AgentError(Exception):
    """Base error for agent-side failures."""


class InvalidCurve(AgentError):
    """Raised when a bid curve or utility function breaks its monotonicity invariants."""


class EmptyEnvelope(AgentError):
    """Raised when a resource has nothing to offer in the current step."""


class LengthMismatch(AgentError):
    """Raised when surplus inputs are not aligned over the same horizon."""


class Side(str, Enum):
    DEMAND = "demand"
    SUPPLY = "supply"


def _as_points(points: Sequence[Sequence[float]]) -> Tuple[Point, ...]:
    return tuple((float(q), float(p)) for q, p in points)


@dataclass(frozen=True)
class BidCurve:
    """Cumulative step curve: segment i spans (q[i-1], q[i]] at price p[i], with q[-1] = 0.

    `floor` is the must-run quantity of a supply curve (the lower edge of its ramp envelope).
    """

    points: Tuple[Point, ...]
    side: Side
    resource: str = ""
    bus: str = ""
    floor: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", _as_points(self.points))
        object.__setattr__(self, "side", Side(self.side))
        quantities = [q for q, _ in self.points]
        prices = [p for _, p in self.points]
        if quantities and quantities[0] < 0:
            raise InvalidCurve(f"first quantity >= 0 ({self.resource})")
        if any(b <= a for a, b in zip(quantities, quantities[1:])):
            raise InvalidCurve(f"quantities strictly increasing ({self.resource})")
        if not all(np.isfinite(prices)):
            raise InvalidCurve(f"prices are finite ({self.resource})")
        if self.side is Side.DEMAND:
            if any(b > a + CURVE_TOLERANCE for a, b in zip(prices, prices[1:])):
                raise InvalidCurve(f"demand prices nonincreasing ({self.resource})")
            if self.floor:
                raise InvalidCurve(f"demand curves have no floor ({self.resource})")
        else:
            if any(b < a - CURVE_TOLERANCE for a, b in zip(prices, prices[1:])):
                raise InvalidCurve(f"supply prices nondecreasing ({self.resource})")
            if self.floor < 0 or self.floor > self.max_quantity + CURVE_TOLERANCE:
                raise InvalidCurve(f"floor within [0, max quantity] ({self.resource})")

    @property
    def is_empty(self) -> bool:
        return not self.points

    @property
    def max_quantity(self) -> float:
        return self.points[-1][0] if self.points else 0.0

    def segments(self) -> List[Tuple[float, float]]:
        """(width, price) per step."""
        result = []
        previous = 0.0
        for quantity, price in self.points:
            result.append((quantity - previous, price))
            previous = quantity
        return result

    def quantity_at(self, price: float) -> float:
        """Quantity this curve takes at a posted price; ties resolve to the smaller quantity."""
        if self.side is Side.DEMAND:
            taken = sum(w for w, p in self.segments() if p > price)
            return float(taken)
        offered = sum(w for w, p in self.segments() if p < price)
        return float(max(offered, self.floor))

    def area(self, quantity: float) -> float:
        """Integral of the step curve from 0 to `quantity` ($/h for MW)."""
        total = 0.0
        remaining = quantity
        for width, price in self.segments():
            if remaining <= 0:
                break
            used = min(width, remaining)
            total += used * price
            remaining -= used
        return total

    def to_dict(self) -> Dict:
        return {
            "resource": self.resource,
            "bus": self.bus,
            "side": self.side.value,
            "points": [[q, p] for q, p in self.points],
            "floor": self.floor,
        }


@dataclass(frozen=True)
class DemandSpec:
    """Elastic load with a concave piecewise-linear utility.

    `utility_points` are cumulative (quantity, marginal utility) breakpoints; the marginal
    utility is zero past the last breakpoint.
    """

    id: str
    bus: str
    l_max: float
    utility_points: Tuple[Point, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "utility_points", _as_points(self.utility_points))
        if self.l_max < 0:
            raise InvalidCurve(f"l_max >= 0 (load {self.id})")
        quantities = [q for q, _ in self.utility_points]
        slopes = [s for _, s in self.utility_points]
        if quantities and quantities[0] <= 0:
            raise InvalidCurve(f"utility breakpoints start above 0 (load {self.id})")
        if any(b <= a for a, b in zip(quantities, quantities[1:])):
            raise InvalidCurve(f"utility breakpoints strictly increasing (load {self.id})")
        if any(b > a + CURVE_TOLERANCE for a, b in zip(slopes, slopes[1:])):
            raise InvalidCurve(f"utility concave (load {self.id})")

    def marginal_segments(self) -> List[Tuple[float, float]]:
        """(width, slope) pieces of U' truncated at l_max."""
        pieces = []
        previous = 0.0
        for quantity, slope in self.utility_points:
            if previous >= self.l_max:
                break
            upper = min(quantity, self.l_max)
            pieces.append((upper - previous, slope))
            previous = upper
        return pieces

    def utility_value(self, load: float) -> float:
        """U_z(load) in $/h; U_z(0) = 0."""
        if load < -CURVE_TOLERANCE or load > self.l_max + 1e-7:
            raise InvalidCurve(f"served load within [0, l_max] (load {self.id})")
        total = 0.0
        remaining = max(load, 0.0)
        for width, slope in self.marginal_segments():
            if remaining <= 0:
                break
            used = min(width, remaining)
            total += used * slope
            remaining -= used
        return total

    def scaled(self, factor: float) -> "DemandSpec":
        """Copy with l_max and breakpoints scaled, as for an hourly load profile."""
        return replace(
            self,
            l_max=self.l_max * factor,
            utility_points=tuple((q * factor, s) for q, s in self.utility_points),
        )


@dataclass(frozen=True)
class DerSpec:
    id: str
    bus: str
    capacity: float
    marginal_cost: float
    ramp_up: float
    ramp_down: float
    p_min: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_min <= self.capacity:
            raise InvalidCurve(f"0 <= p_min <= capacity (resource {self.id})")
        if self.ramp_up < 0 or self.ramp_down < 0:
            raise InvalidCurve(f"ramps >= 0 (resource {self.id})")

    def with_capacity(self, capacity: float) -> "DerSpec":
        return replace(self, capacity=capacity)


@dataclass(frozen=True)
class RampEnvelope:
    p_min_t: float
    p_max_t: float

    def __post_init__(self) -> None:
        if self.p_min_t > self.p_max_t + CURVE_TOLERANCE:
            raise InvalidCurve("p_min_t <= p_max_t")


@dataclass
class AgentLedger:
    energy_revenue: float = 0.0
    consumer_utility_value: float = 0.0
    investment_margin: float = 0.0
    history: List[Dict] = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.energy_revenue + self.consumer_utility_value + self.investment_margin

    def __add__(self, other: "AgentLedger") -> "AgentLedger":
        return AgentLedger(
            energy_revenue=self.energy_revenue + other.energy_revenue,
            consumer_utility_value=self.consumer_utility_value + other.consumer_utility_value,
            investment_margin=self.investment_margin + other.investment_margin,
            history=self.history + other.history,
        )

    def to_dict(self) -> Dict:
        return {
            "energy_revenue": self.energy_revenue,
            "consumer_utility_value": self.consumer_utility_value,
            "investment_margin": self.investment_margin,
            "total": self.total,
        }


def demand_curve_of(spec: DemandSpec) -> BidCurve:
    """Marginal-utility bid, truncated at l_max; pieces with no positive value are not bid."""
    points = []
    cumulative = 0.0
    for width, slope in spec.marginal_segments():
        if slope <= 0 or width <= 0:
            continue
        cumulative += width
        points.append((cumulative, slope))
    return BidCurve(points=tuple(points), side=Side.DEMAND, resource=spec.id, bus=spec.bus)


def static_envelope(spec: DerSpec) -> RampEnvelope:
    return RampEnvelope(p_min_t=spec.p_min, p_max_t=spec.capacity)


def ramp_envelope_step(spec: DerSpec, previous_dispatch: Optional[float]) -> RampEnvelope:
    if previous_dispatch is None:
        return static_envelope(spec)
    p_max_t = min(spec.capacity, previous_dispatch + spec.ramp_up)
    p_min_t = max(spec.p_min, previous_dispatch - spec.ramp_down)
    return RampEnvelope(p_min_t=min(p_min_t, p_max_t), p_max_t=p_max_t)


def perturbation_draw(rng_seed: SeedLike) -> float:
    """Uniform draw in [-1, 1], reproducible for a given (seed, agent, step) entropy tuple."""
    if rng_seed is None:
        return 0.0
    entropy = [int(rng_seed)] if np.isscalar(rng_seed) else [int(v) for v in rng_seed]
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    return float(rng.uniform(-1.0, 1.0))


def supply_curve_of(
    spec: DerSpec,
    envelope: RampEnvelope,
    perturbation: float = 0.0,
    rng_seed: SeedLike = None,
    scale: float = 1.0,
) -> BidCurve:
    if envelope.p_max_t <= 0:
        raise EmptyEnvelope(f"Resource {spec.id} has an empty envelope this step")
    if envelope.p_max_t > spec.capacity + CURVE_TOLERANCE or envelope.p_min_t < spec.p_min - CURVE_TOLERANCE:
        raise InvalidCurve(f"envelope within static bounds (resource {spec.id})")
    offset = perturbation_draw(rng_seed) * perturbation * scale if perturbation else 0.0
    return BidCurve(
        points=((envelope.p_max_t, spec.marginal_cost + offset),),
        side=Side.SUPPLY,
        resource=spec.id,
        bus=spec.bus,
        floor=envelope.p_min_t,
    )


def _aligned(name: str, values, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if shape is not None and array.shape != shape:
        raise LengthMismatch(f"{name} has shape {array.shape}, expected {shape}")
    return array


def agent_surplus(
    dispatches: Sequence = (),
    generation_prices: Sequence = (),
    generation_costs: Sequence = (),
    loads: Sequence = (),
    load_prices: Sequence = (),
    utility: Union[DemandSpec, Sequence[DemandSpec], None] = None,
    investments: Sequence[Tuple[float, float, float]] = (),
    step_hours: float = 1.0,
) -> AgentLedger:
    """Three-part agent revenue over a horizon.

    Generation inputs are aligned arrays of shape (T,) or (T, G); load inputs (T,) or (T, Z)
    with one DemandSpec per load column. `investments` holds (K, capacity price, kappa) triples.
    """
    gen = _aligned("dispatches", dispatches)
    gen_prices = _aligned("generation_prices", generation_prices, gen.shape)
    gen_costs = _aligned("generation_costs", generation_costs, gen.shape)
    served = _aligned("loads", loads)
    prices = _aligned("load_prices", load_prices, served.shape)

    specs: List[DemandSpec]
    if utility is None:
        specs = []
    elif isinstance(utility, DemandSpec):
        specs = [utility]
    else:
        specs = list(utility)
    if served.size:
        columns = 1 if served.ndim == 1 else served.shape[1]
        if len(specs) != columns:
            raise LengthMismatch(f"{len(specs)} utility functions for {columns} loads")
    if gen.size and served.size and len(gen) != len(served):
        raise LengthMismatch("generation and load horizons differ")

    gen_2d = gen.reshape(len(gen), -1) if gen.size else np.zeros((0, 0))
    margins = (gen_prices - gen_costs).reshape(gen_2d.shape) if gen.size else gen_2d
    served_2d = served.reshape(len(served), -1) if served.size else np.zeros((0, 0))
    prices_2d = prices.reshape(served_2d.shape) if served.size else served_2d

    history = []
    steps = max(len(gen_2d), len(served_2d))
    energy_total = 0.0
    utility_total = 0.0
    for t in range(steps):
        energy = float(np.sum(gen_2d[t] * margins[t])) * step_hours if gen.size else 0.0
        value = 0.0
        if served.size:
            for z, spec in enumerate(specs):
                load = float(served_2d[t, z])
                value += (spec.utility_value(load) - prices_2d[t, z] * load) * step_hours
        energy_total += energy
        utility_total += value
        history.append({"step": t, "energy_revenue": energy, "consumer_utility_value": value})

    investment_total = 0.0
    for K, capacity_price, kappa in investments:
        if K < 0:
            raise AgentError("investments K >= 0")
        investment_total += K * (capacity_price - kappa)

    return AgentLedger(
        energy_revenue=energy_total,
        consumer_utility_value=utility_total,
        investment_margin=investment_total,
        history=history,
    )


def choose_der_investment(price_signal: float, kappa: float, candidate_grid: Sequence[float]) -> float:
    """Grid point maximizing K * (price_signal - kappa); ties go to the smaller K."""
    grid = sorted(float(k) for k in candidate_grid)
    if not grid or grid[0] < 0:
        raise AgentError("candidate_grid nonempty and nonnegative")
    if price_signal <= kappa:
        return 0.0
    best_k, best_margin = 0.0, 0.0
    for K in grid:
        margin = K * (price_signal - kappa)
        if margin > best_margin:
            best_k, best_margin = K, margin
    logger.debug("DER investment %.4f MW at signal %.4f vs kappa %.4f", best_k, price_signal, kappa)
    return best_k

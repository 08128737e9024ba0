"""
Peak-load-pricing investment layer: annualized costs, capacity signals, planning sweeps and the MPC loop.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import config
from .agents import AgentLedger, DerSpec, agent_surplus, choose_der_investment
from .market import ClearingProblem, ClearingResult, KktReport, clear_step, verify_kkt
from .netmodel import Contingency, energization_probabilities
from .protocol import MarketAgent, Role, RoundLog, assemble_problem, award_payload, run_clearing_round

if TYPE_CHECKING:
    from .scenario import ScenarioConfig

logger = logging.getLogger(__name__)

CAPACITY_TOLERANCE = 1e-9


class PlanningError(Exception):
    """Base error for planning failures."""


class UnverifiedInput(PlanningError):
    """Raised when a capacity signal is requested from clearings that did not pass the KKT check."""


class ZeroEnergy(PlanningError):
    """Raised when a unit price is requested for a plan that serves no energy."""


@dataclass(frozen=True)
class CostSpec:
    """Capital in $ (switches) or $/kW (DER); operating in $/yr or $/kW-yr."""

    capital: float
    operating: float
    discount_rate: float = 0.07
    lifetime: int = 20

    def __post_init__(self) -> None:
        if self.capital < 0 or self.operating < 0:
            raise PlanningError("capital and operating costs >= 0")
        if not 0.0 <= self.discount_rate < 1.0:
            raise PlanningError("discount_rate in [0, 1)")
        if self.lifetime < 1:
            raise PlanningError("lifetime >= 1")

    def to_dict(self) -> Dict:
        return {
            "capital": self.capital,
            "operating": self.operating,
            "discount_rate": self.discount_rate,
            "lifetime": self.lifetime,
        }


def annualize_cost(spec: CostSpec) -> float:
    r, n = spec.discount_rate, spec.lifetime
    if r < 1e-12:
        return spec.capital / n + spec.operating
    return spec.capital * r / (1.0 - (1.0 + r) ** -n) + spec.operating


@dataclass(frozen=True)
class InvestmentPlan:
    switches: FrozenSet[str] = frozenset()
    der_capacity: Dict[str, float] = field(default_factory=dict)
    kappa: Dict[str, float] = field(default_factory=dict)
    step: Optional[int] = None
    signals: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "switches", frozenset(self.switches))
        if any(k < 0 for k in self.der_capacity.values()):
            raise PlanningError("der_capacity >= 0")

    @property
    def locations(self) -> str:
        ids = sorted(self.switches)
        return "".join(ids) if all(len(i) == 1 for i in ids) else ",".join(ids)

    @property
    def total_der(self) -> float:
        return float(sum(self.der_capacity.values()))

    def to_dict(self) -> Dict:
        return {
            "switches": sorted(self.switches),
            "der_capacity": dict(sorted(self.der_capacity.items())),
            "kappa": dict(sorted(self.kappa.items())),
            "step": self.step,
            "signals": dict(sorted(self.signals.items())),
        }


@dataclass
class PlanResult:
    plan: InvestmentPlan
    served: float
    unit_price: float
    energy: float
    total_cost: float
    capacity_signal: Dict[str, float]
    count: int = 0
    welfare: float = 0.0
    production_cost: float = 0.0
    investment_cost: float = 0.0
    site_signal: Optional[float] = None
    heuristic: bool = False

    @property
    def revenue(self) -> float:
        return self.unit_price * self.energy

    @property
    def net_welfare(self) -> float:
        return self.welfare - self.investment_cost


@dataclass(frozen=True)
class VerifiedClearing:
    problem: ClearingProblem
    result: ClearingResult
    report: Optional[KktReport]


@dataclass
class HorizonClearing:
    clearings: List[VerifiedClearing] = field(default_factory=list)

    def __iter__(self) -> Iterator[VerifiedClearing]:
        return iter(self.clearings)

    def __len__(self) -> int:
        return len(self.clearings)

    @property
    def results(self) -> List[ClearingResult]:
        return [c.result for c in self.clearings]


@dataclass
class HorizonEconomics:
    """Annualized totals of a cleared horizon."""

    energy_by_bus: Dict[str, float]
    production_cost: float
    welfare: float
    scale: float

    @property
    def energy(self) -> float:
        return float(sum(self.energy_by_bus.values()))


@dataclass(frozen=True)
class InvestmentCheck:
    """Capacity-cost complementarity of one investment option.

    On a capacity grid, `below` and `above` carry the signals at the neighbouring grid points;
    a discrete optimum then passes when kappa lies between them.
    """

    option: str
    capacity: float
    signal: float
    kappa: float
    below: Optional[float] = None
    above: Optional[float] = None

    @property
    def zeta(self) -> float:
        return max(0.0, self.kappa - self.signal)

    @property
    def residual(self) -> float:
        scale = max(abs(self.kappa), 1e-12)
        if self.below is not None or self.above is not None:
            short = max(0.0, self.kappa - self.below) if self.below is not None else 0.0
            excess = max(0.0, self.above - self.kappa) if self.above is not None else 0.0
            return max(short, excess) / scale
        if self.capacity > 0:
            return abs(self.signal - self.kappa) / scale
        return max(0.0, self.signal - self.kappa) / scale


@dataclass
class MpcRun:
    results: List[ClearingResult]
    plans: List[InvestmentPlan]
    logs: List[RoundLog]


def _year_scale(clearings: Sequence[VerifiedClearing], year_scale: Optional[float]) -> float:
    if year_scale is not None:
        return year_scale
    hours = sum(c.problem.step_hours for c in clearings)
    return config.HOURS_PER_YEAR / hours if hours > 0 else 0.0


def _verified(clearings: Iterable) -> List[VerifiedClearing]:
    items = list(clearings)
    for item in items:
        if not isinstance(item, VerifiedClearing) or item.report is None or not item.report.passed:
            raise UnverifiedInput("capacity signals need KKT-verified clearings")
    return items


def clear_horizon(
    scenario: "ScenarioConfig",
    installed: Optional[Iterable[str]] = None,
    der_capacity: Optional[Mapping[str, float]] = None,
    contingency: Optional[Contingency] = None,
    steps: Optional[int] = None,
) -> HorizonClearing:
    """Clear every step with truthful bids, carrying ramp envelopes forward through the awards."""
    installed = frozenset(scenario.topology.installed_switches if installed is None else installed)
    agents = scenario.market_agents(der_capacity)
    horizon = HorizonClearing()
    for t in range(scenario.horizon if steps is None else steps):
        context = scenario.step_context(t, installed, contingency)
        forecast = context.forecast_payload()
        by_agent = {agent.id: agent.bid_curves(forecast, perturb=False) for agent in agents}
        problem = assemble_problem(context, (c for a in agents for c in by_agent[a.id]))
        result = clear_step(problem)
        horizon.clearings.append(VerifiedClearing(problem, result, verify_kkt(problem, result)))
        for agent in agents:
            agent.accept_award(award_payload(by_agent[agent.id], result))
    return horizon


def capacity_price_signal(clearings: Iterable, year_scale: Optional[float] = None) -> Dict[str, float]:
    """Per-line sum of (mu + nu) * hours, scaled to a year ($/MW-yr).

    With an explicit `year_scale` the signal is additive over disjoint sub-horizons.
    """
    items = _verified(clearings)
    if not items:
        return {}
    scale = _year_scale(items, year_scale)
    line_ids = items[0].problem.H.line_ids
    totals = np.zeros(len(line_ids))
    for c in items:
        totals += (np.asarray(c.result.duals.mu) + np.asarray(c.result.duals.nu)) * c.problem.step_hours
    return {line_id: float(v * scale) for line_id, v in zip(line_ids, totals)}


def site_capacity_signal(clearings: Iterable, site: DerSpec, year_scale: Optional[float] = None) -> float:
    """Capacity rent of one more MW at a DER site, summed over hours and scaled to a year ($/MW-yr).

    Where the site bids at its full capacity the hourly rent is its capacity-bound multiplier,
    p_b minus the price of its top segment when positive. Hours where a ramp limit binds earn
    nothing, and a site with no capacity yet earns the rent of a first MW, max(p_b - cost, 0).
    """
    items = _verified(clearings)
    if not items:
        return 0.0
    scale = _year_scale(items, year_scale)
    total = 0.0
    for c in items:
        price = c.result.nodal_prices.get(site.bus)
        if price is None:
            continue
        curve = next((s for s in c.problem.supply if s.resource == site.id), None)
        if curve is None:
            rent = max(price - site.marginal_cost, 0.0) if site.capacity <= 0 else 0.0
        elif curve.max_quantity >= site.capacity - CAPACITY_TOLERANCE:
            rent = max(price - curve.points[-1][1], 0.0)
        else:
            rent = 0.0
        total += rent * c.problem.step_hours
    return total * scale


def horizon_economics(clearings: Iterable[VerifiedClearing], year_scale: Optional[float] = None) -> HorizonEconomics:
    items = list(clearings)
    scale = _year_scale(items, year_scale)
    energy: Dict[str, float] = {}
    production = 0.0
    welfare = 0.0
    for c in items:
        hours = c.problem.step_hours
        for curve in c.problem.demand:
            energy[curve.bus] = energy.get(curve.bus, 0.0) + c.result.dispatch.load[curve.resource] * hours * scale
        for curve in c.problem.supply:
            production += curve.area(c.result.dispatch.gen[curve.resource]) * hours * scale
        welfare += c.result.welfare * scale
    return HorizonEconomics(energy_by_bus=energy, production_cost=production, welfare=welfare, scale=scale)


def reported_unit_price(total_cost: float, energy: float) -> float:
    if energy <= 0:
        raise ZeroEnergy("No energy served; unit price is undefined")
    return total_cost / energy


def expected_energy(economics: HorizonEconomics, probabilities: Mapping[str, float]) -> float:
    return float(sum(probabilities.get(bus, 0.0) * e for bus, e in economics.energy_by_bus.items()))


def evaluate_plan(
    scenario: "ScenarioConfig",
    economics: HorizonEconomics,
    switches: Iterable[str] = (),
    der_capacity: Optional[Mapping[str, float]] = None,
    capacity_signal: Optional[Dict[str, float]] = None,
    count: Optional[int] = None,
    heuristic: bool = False,
    probabilities: Optional[Mapping[str, float]] = None,
) -> PlanResult:
    """Expected energy, costs and the budget-balancing unit price of a plan.

    Production cost and welfare scale with the expected share of base-case energy that stays
    energized across the contingency set.
    """
    switches = frozenset(switches)
    der_capacity = dict(der_capacity or {})
    topology = scenario.topology
    if probabilities is None:
        probabilities = energization_probabilities(
            topology, topology.installed_switches | switches, scenario.contingencies
        )
    energy_all = economics.energy
    if energy_all <= 0:
        raise ZeroEnergy("Base case serves no energy")
    energy = expected_energy(economics, probabilities)
    share = energy / energy_all
    kappa = {s: scenario.kappa_switch(s) for s in sorted(switches)}
    kappa_der = scenario.kappa_der()
    for site in der_capacity:
        kappa[site] = kappa_der
    investment = sum(kappa[s] for s in switches) + kappa_der * sum(der_capacity.values())
    production = economics.production_cost * share
    total = production + scenario.fixed_supply_cost + investment
    served = float(sum(b.customers * probabilities.get(b.id, 0.0) for b in topology.buses))
    return PlanResult(
        plan=InvestmentPlan(switches=switches, der_capacity=der_capacity, kappa=kappa),
        served=served,
        unit_price=reported_unit_price(total, energy),
        energy=energy,
        total_cost=total,
        capacity_signal=dict(capacity_signal or {}),
        count=len(switches) if count is None else count,
        welfare=economics.welfare * share,
        production_cost=production,
        investment_cost=investment,
        heuristic=heuristic,
    )


class _SwitchValuer:
    """Expected-energy value of switch sets, memoized per set."""

    def __init__(self, scenario: "ScenarioConfig", economics: HorizonEconomics) -> None:
        self.scenario = scenario
        self.economics = economics
        self.base = scenario.topology.installed_switches
        self._cache: Dict[FrozenSet[str], Dict[str, float]] = {}
        energy_all = economics.energy
        if energy_all <= 0:
            raise ZeroEnergy("Base case serves no energy")
        self.welfare_per_mwh = economics.welfare / energy_all

    def probabilities(self, switches: FrozenSet[str]) -> Dict[str, float]:
        if switches not in self._cache:
            self._cache[switches] = energization_probabilities(
                self.scenario.topology, self.base | switches, self.scenario.contingencies
            )
        return self._cache[switches]

    def energy(self, switches: FrozenSet[str]) -> float:
        return expected_energy(self.economics, self.probabilities(switches))

    def objective(self, switches: FrozenSet[str]) -> float:
        cost = sum(self.scenario.kappa_switch(s) for s in switches)
        return self.welfare_per_mwh * self.energy(switches) - cost


def plan_switches(
    scenario: "ScenarioConfig",
    candidates: Optional[Sequence[str]] = None,
    budget_count_range: Optional[Tuple[int, int]] = None,
) -> List[PlanResult]:
    """Best switch set for each count k, by expected welfare net of annualized switch cost."""
    if candidates is None:
        candidates = [s for s in scenario.topology.switch_ids if s not in scenario.topology.installed_switches]
    candidates = sorted(candidates)
    if not candidates:
        raise PlanningError("candidates nonempty")
    for switch_id in candidates:
        scenario.topology.switch(switch_id)
    low, high = budget_count_range or (0, len(candidates))
    high = min(high, len(candidates))
    if low < 0 or low > high:
        raise PlanningError(f"invalid switch count range {low}:{high}")

    horizon = clear_horizon(scenario)
    signal = capacity_price_signal(horizon)
    economics = horizon_economics(horizon)
    valuer = _SwitchValuer(scenario, economics)
    exhaustive = len(candidates) <= config.EXHAUSTIVE_LIMIT
    if not exhaustive:
        logger.warning(
            "%d switch candidates exceed the exhaustive limit of %d; using greedy search",
            len(candidates),
            config.EXHAUSTIVE_LIMIT,
        )

    best_by_k: Dict[int, FrozenSet[str]] = {}
    if exhaustive:
        for k in range(low, high + 1):
            best, best_value = None, -np.inf
            for subset in itertools.combinations(candidates, k):
                chosen = frozenset(subset)
                value = valuer.objective(chosen)
                if value > best_value + 1e-9:
                    best, best_value = chosen, value
            best_by_k[k] = best
    else:
        current: FrozenSet[str] = frozenset()
        best_by_k[0] = current
        for k in range(1, high + 1):
            best, best_value = None, -np.inf
            for s in candidates:
                if s in current:
                    continue
                value = valuer.objective(current | {s})
                if value > best_value + 1e-9:
                    best, best_value = current | {s}, value
            current = best
            best_by_k[k] = current

    results = []
    for k in range(low, high + 1):
        chosen = best_by_k[k]
        result = evaluate_plan(
            scenario,
            economics,
            switches=chosen,
            capacity_signal=signal,
            count=k,
            heuristic=not exhaustive,
            probabilities=valuer.probabilities(chosen),
        )
        logger.info(
            "k=%d served=%.1f price=%.4f locations=%s", k, result.served, result.unit_price, result.plan.locations
        )
        results.append(result)
    return results


def sweep_der_capacity(
    scenario: "ScenarioConfig",
    site: str,
    capacity_grid: Sequence[float],
    switches: Iterable[str] = (),
) -> List[PlanResult]:
    """Unit price and welfare for each added DER capacity K at one site."""
    grid = [float(k) for k in capacity_grid]
    if not grid or grid[0] < 0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise PlanningError("capacity grid nonnegative and strictly ascending")
    base = scenario.der_site(site)
    switches = frozenset(switches)
    results = []
    for K in grid:
        horizon = clear_horizon(scenario, der_capacity={site: K})
        economics = horizon_economics(horizon)
        result = evaluate_plan(
            scenario,
            economics,
            switches=switches,
            der_capacity={site: K},
            capacity_signal=capacity_price_signal(horizon),
        )
        result.site_signal = site_capacity_signal(horizon, base.with_capacity(base.capacity + K))
        logger.info("K=%.3f MW price=%.4f site signal=%.1f", K, result.unit_price, result.site_signal)
        results.append(result)
    return results


def sweep_optimum(results: Sequence[PlanResult]) -> PlanResult:
    """Sweep point maximizing welfare net of investment cost; ties go to the smaller plan."""
    best = results[0]
    for result in results[1:]:
        if result.net_welfare > best.net_welfare + 1e-9:
            best = result
    return best


def price_minimum(results: Sequence[PlanResult]) -> PlanResult:
    best = results[0]
    for result in results[1:]:
        if result.unit_price < best.unit_price - 1e-12:
            best = result
    return best


def optimum_check(results: Sequence[PlanResult], optimum: PlanResult, option: str, kappa: float) -> InvestmentCheck:
    """Investment check at a sweep optimum, bracketed by the site signals of its grid neighbours."""
    index = next(i for i, r in enumerate(results) if r is optimum)
    below = results[index - 1].site_signal if index > 0 else None
    above = results[index + 1].site_signal if index + 1 < len(results) else None
    return InvestmentCheck(option, optimum.plan.total_der, optimum.site_signal or 0.0, kappa, below, above)


def verify_investment_kkt(checks: Iterable[InvestmentCheck], tolerance: float = 0.05) -> Dict:
    """Capacity-cost complementarity per option: signal matches kappa where K > 0, stays below it where K = 0."""
    checks = list(checks)
    rows = [
        {
            "option": c.option,
            "capacity": c.capacity,
            "signal": c.signal,
            "kappa": c.kappa,
            "zeta": c.zeta,
            "below": c.below,
            "above": c.above,
            "residual": c.residual,
        }
        for c in checks
    ]
    worst = max((c.residual for c in checks), default=0.0)
    return {"passed": worst < tolerance, "max_residual": worst, "options": rows}


def _aggregator_for(agents: Sequence[MarketAgent], resource_id: str) -> Optional[MarketAgent]:
    for agent in agents:
        if agent.id.role is Role.AGGREGATOR and any(r.id == resource_id for r in agent.resources):
            return agent
    return None


def _invest(
    scenario: "ScenarioConfig",
    agents: Sequence[MarketAgent],
    window: List[VerifiedClearing],
    installed: set,
    added: Dict[str, float],
    grid: Sequence[float],
    step: int,
) -> InvestmentPlan:
    signals: Dict[str, float] = {}
    kappa_der = scenario.kappa_der()
    economics = horizon_economics(window)

    for site in scenario.der_sites:
        owner = _aggregator_for(agents, site.id)
        if owner is None:
            continue
        signal = site_capacity_signal(window, site.with_capacity(site.capacity + added.get(site.id, 0.0)))
        signals[site.id] = signal
        K = choose_der_investment(signal, kappa_der, grid)
        if K > 0:
            added[site.id] = added.get(site.id, 0.0) + K
            owner.set_capacity(site.id, site.capacity + added[site.id])
            logger.info("Step %d: %s adds %.3f MW at %s (signal %.1f)", step, owner.id, K, site.id, signal)

    if economics.energy > 0:
        valuer = _SwitchValuer(scenario, economics)
        existing = scenario.topology.installed_switches
        chosen = frozenset(installed - existing)
        progress = True
        while progress:
            progress = False
            for switch_id in scenario.topology.switch_ids:
                if switch_id in installed:
                    continue
                gain = valuer.welfare_per_mwh * (valuer.energy(chosen | {switch_id}) - valuer.energy(chosen))
                if gain > scenario.kappa_switch(switch_id):
                    installed.add(switch_id)
                    chosen = chosen | {switch_id}
                    signals[switch_id] = gain
                    progress = True
                    logger.info("Step %d: utility installs switch %s (gain %.1f)", step, switch_id, gain)

    new_switches = frozenset(installed - scenario.topology.installed_switches)
    kappa = {s: scenario.kappa_switch(s) for s in sorted(new_switches)}
    kappa.update({site: kappa_der for site in added})
    return InvestmentPlan(
        switches=new_switches,
        der_capacity=dict(added),
        kappa=kappa,
        step=step,
        signals=signals,
    )


def run_mpc(
    scenario: "ScenarioConfig",
    horizon: Optional[int] = None,
    investment_epoch: Optional[int] = None,
    der_grid: Optional[Sequence[float]] = None,
    tolerance: Optional[float] = None,
    max_iters: Optional[int] = None,
    strict: bool = False,
) -> MpcRun:
    """Clear step by step through the protocol and take investment decisions at every epoch boundary."""
    horizon = scenario.horizon if horizon is None else horizon
    epoch = scenario.horizon if investment_epoch is None else investment_epoch
    if epoch < 1 or horizon < 1 or horizon % epoch:
        raise PlanningError(f"horizon {horizon} must be a positive multiple of the investment epoch {epoch}")
    grid = list(scenario.der_grid if der_grid is None else der_grid)
    tolerance = scenario.price_tolerance if tolerance is None else tolerance
    max_iters = scenario.max_iters if max_iters is None else max_iters

    agents = scenario.market_agents()
    installed = set(scenario.topology.installed_switches)
    added: Dict[str, float] = {}
    run = MpcRun(results=[], plans=[], logs=[])
    window: List[VerifiedClearing] = []
    for t in range(horizon):
        context = scenario.step_context(t, frozenset(installed))
        result, log = run_clearing_round(agents, context, tolerance=tolerance, max_iters=max_iters, strict=strict)
        window.append(VerifiedClearing(log.problem, result, log.report))
        run.results.append(result)
        run.logs.append(log)
        if (t + 1) % epoch == 0:
            run.plans.append(_invest(scenario, agents, window, installed, added, grid, step=t))
            window = []
    return run


def mpc_horizon_run(
    scenario: "ScenarioConfig",
    horizon: Optional[int] = None,
    investment_epoch: Optional[int] = None,
    **kwargs,
) -> Tuple[List[ClearingResult], List[InvestmentPlan]]:
    run = run_mpc(scenario, horizon=horizon, investment_epoch=investment_epoch, **kwargs)
    return run.results, run.plans


def ledgers_for_run(scenario: "ScenarioConfig", run: MpcRun) -> Dict[str, AgentLedger]:
    """Three-part revenue of every bidding agent over an MPC run."""
    agents = scenario.market_agents()
    ledgers = {agent.id.name: AgentLedger() for agent in agents}
    for log, result in zip(run.logs, run.results):
        problem = log.problem
        factor = scenario.load_factor(problem.step)
        cleared_supply = {c.resource: c for c in problem.supply}
        cleared_demand = {c.resource: c for c in problem.demand}
        for agent in agents:
            resources = [r for r in agent.resources if r.id in cleared_supply]
            loads = [z for z in agent.loads if z.id in cleared_demand]
            ledger = agent_surplus(
                dispatches=[[result.dispatch.gen[r.id] for r in resources]],
                generation_prices=[[result.nodal_prices[r.bus] for r in resources]],
                generation_costs=[[r.marginal_cost for r in resources]],
                loads=[[result.dispatch.load[z.id] for z in loads]] if loads else (),
                load_prices=[[result.nodal_prices[z.bus] for z in loads]] if loads else (),
                utility=[z.scaled(factor) for z in loads],
                step_hours=problem.step_hours,
            )
            for entry in ledger.history:
                entry["step"] = problem.step
            ledgers[agent.id.name] = ledgers[agent.id.name] + ledger

    previous_der: Dict[str, float] = {}
    previous_switches: FrozenSet[str] = frozenset()
    utility = next(a for a in agents if a.id.role is Role.UTILITY)
    for plan in run.plans:
        for site, total in plan.der_capacity.items():
            delta = total - previous_der.get(site, 0.0)
            owner = _aggregator_for(agents, site)
            if delta > 0 and owner is not None:
                investment = agent_surplus(
                    investments=[(delta, plan.signals.get(site, 0.0), plan.kappa.get(site, scenario.kappa_der()))]
                )
                ledgers[owner.id.name] = ledgers[owner.id.name] + investment
        for switch_id in sorted(plan.switches - previous_switches):
            investment = agent_surplus(
                investments=[(1.0, plan.signals.get(switch_id, 0.0), plan.kappa[switch_id])]
            )
            ledgers[utility.id.name] = ledgers[utility.id.name] + investment
        previous_der = dict(plan.der_capacity)
        previous_switches = plan.switches
    return ledgers

"""
Per-step welfare-maximizing market clearing over the DC network, with an independent KKT check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linprog

from . import config
from .agents import BidCurve, Side
from .netmodel import PtdfMatrix

logger = logging.getLogger(__name__)

FEASIBILITY_TOLERANCE = 1e-7


class MarketError(Exception):
    """Base error for market clearing failures."""


class Infeasible(MarketError):
    """Raised when must-run floors cannot be delivered within the line limits."""


class Unbounded(MarketError):
    """Raised when the clearing program has no finite optimum."""


class InfeasibleDispatch(MarketError):
    """Raised when a dispatch breaks balance, box or flow limits."""


class KKTViolation(MarketError):
    """Raised when a clearing result fails its optimality check."""


@dataclass(frozen=True)
class ClearingProblem:
    """One clearing step. `line_caps` follows `H.line_ids`; `math.inf` means unconstrained."""

    H: PtdfMatrix
    line_caps: Tuple[float, ...]
    supply: Tuple[BidCurve, ...]
    demand: Tuple[BidCurve, ...]
    step_hours: float = 1.0
    step: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "line_caps", tuple(float(c) for c in self.line_caps))
        object.__setattr__(self, "supply", tuple(self.supply))
        object.__setattr__(self, "demand", tuple(self.demand))
        if len(self.line_caps) != len(self.H.line_ids):
            raise MarketError("one line cap per PTDF row")
        if any(c < 0 for c in self.line_caps):
            raise MarketError("line_caps >= 0")
        if self.step_hours <= 0:
            raise MarketError("step_hours > 0")
        seen = set()
        for curve, side in [(c, Side.SUPPLY) for c in self.supply] + [(c, Side.DEMAND) for c in self.demand]:
            if curve.side is not side:
                raise MarketError(f"curve {curve.resource} is on the wrong side")
            if curve.bus not in self.H.bus_index:
                raise MarketError(f"curve {curve.resource} sits on unknown bus {curve.bus}")
            if curve.resource in seen:
                raise MarketError(f"resource ids unique ({curve.resource})")
            seen.add(curve.resource)

    def uncapped(self) -> "ClearingProblem":
        return ClearingProblem(
            H=self.H,
            line_caps=tuple(math.inf for _ in self.line_caps),
            supply=self.supply,
            demand=self.demand,
            step_hours=self.step_hours,
            step=self.step,
        )

    def to_dict(self) -> Dict:
        return {
            "step": self.step,
            "step_hours": self.step_hours,
            "ptdf": {
                "entries": self.H.entries.tolist(),
                "line_ids": list(self.H.line_ids),
                "bus_ids": list(self.H.bus_ids),
                "slack": self.H.slack,
                "columns": list(self.H.columns),
            },
            "line_caps": [None if math.isinf(c) else c for c in self.line_caps],
            "supply": [c.to_dict() for c in self.supply],
            "demand": [c.to_dict() for c in self.demand],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ClearingProblem":
        ptdf = data["ptdf"]
        H = PtdfMatrix(
            entries=np.array(ptdf["entries"], dtype=float).reshape(len(ptdf["line_ids"]), len(ptdf["bus_ids"])),
            line_ids=tuple(ptdf["line_ids"]),
            bus_ids=tuple(ptdf["bus_ids"]),
            slack=ptdf["slack"],
            columns=tuple(ptdf["columns"]),
        )
        return cls(
            H=H,
            line_caps=tuple(math.inf if c is None else c for c in data["line_caps"]),
            supply=tuple(_curve_from_dict(c) for c in data["supply"]),
            demand=tuple(_curve_from_dict(c) for c in data["demand"]),
            step_hours=data["step_hours"],
            step=data["step"],
        )


def _curve_from_dict(data: Dict) -> BidCurve:
    return BidCurve(
        points=tuple(tuple(p) for p in data["points"]),
        side=Side(data["side"]),
        resource=data["resource"],
        bus=data["bus"],
        floor=data.get("floor", 0.0),
    )


@dataclass(frozen=True)
class Dispatch:
    gen: Dict[str, float]
    load: Dict[str, float]
    flows: Tuple[float, ...]

    def to_dict(self) -> Dict:
        return {"gen": dict(self.gen), "load": dict(self.load), "flows": list(self.flows)}


@dataclass(frozen=True)
class Duals:
    lam: float
    mu: Tuple[float, ...]
    nu: Tuple[float, ...]
    rho: Dict[str, float]
    sigma: Dict[str, float]
    alpha: Dict[str, float]
    beta: Dict[str, float]
    zeta: Tuple[float, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "lambda": self.lam,
            "mu": list(self.mu),
            "nu": list(self.nu),
            "rho": dict(self.rho),
            "sigma": dict(self.sigma),
            "alpha": dict(self.alpha),
            "beta": dict(self.beta),
            "zeta": list(self.zeta),
        }


@dataclass(frozen=True)
class ClearingResult:
    dispatch: Dispatch
    duals: Duals
    nodal_prices: Dict[str, float]
    welfare: float
    step: int = 0

    def to_dict(self) -> Dict:
        return {
            "step": self.step,
            "dispatch": self.dispatch.to_dict(),
            "duals": self.duals.to_dict(),
            "nodal_prices": dict(self.nodal_prices),
            "welfare": self.welfare,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ClearingResult":
        d, u = data["dispatch"], data["duals"]
        return cls(
            dispatch=Dispatch(gen=dict(d["gen"]), load=dict(d["load"]), flows=tuple(d["flows"])),
            duals=Duals(
                lam=u["lambda"],
                mu=tuple(u["mu"]),
                nu=tuple(u["nu"]),
                rho=dict(u["rho"]),
                sigma=dict(u["sigma"]),
                alpha=dict(u["alpha"]),
                beta=dict(u["beta"]),
                zeta=tuple(u.get("zeta", ())),
            ),
            nodal_prices=dict(data["nodal_prices"]),
            welfare=data["welfare"],
            step=data.get("step", 0),
        )


@dataclass
class KktReport:
    residuals: Dict[str, float]
    tolerance: float
    degenerate: bool = False
    notes: List[str] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_residual < self.tolerance

    def violations(self) -> List[str]:
        return sorted(name for name, value in self.residuals.items() if value >= self.tolerance)

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "max_residual": self.max_residual,
            "residuals": dict(self.residuals),
            "degenerate": self.degenerate,
            "notes": list(self.notes),
        }


class _Layout:
    """Column and row bookkeeping for the clearing LP."""

    def __init__(self, problem: ClearingProblem) -> None:
        self.n_gen = len(problem.supply)
        self.n_load = len(problem.demand)
        self.supply_segments: List[Tuple[int, float, float]] = []
        self.demand_segments: List[Tuple[int, float, float]] = []
        for g, curve in enumerate(problem.supply):
            for width, price in curve.segments():
                self.supply_segments.append((g, width, price))
        for z, curve in enumerate(problem.demand):
            for width, price in curve.segments():
                self.demand_segments.append((z, width, price))
        self.x0 = self.n_gen + self.n_load
        self.y0 = self.x0 + len(self.supply_segments)
        self.n_vars = self.y0 + len(self.demand_segments)
        self.capped_lines = [
            l
            for l, cap in enumerate(problem.line_caps)
            if math.isfinite(cap) and np.any(problem.H.entries[l] != 0.0)
        ]


def _injection_rows(problem: ClearingProblem, layout: _Layout) -> np.ndarray:
    """Flow sensitivity of every line to each P and L column."""
    rows = np.zeros((len(problem.H.line_ids), layout.n_vars))
    for g, curve in enumerate(problem.supply):
        rows[:, g] = problem.H.column(curve.bus)
    for z, curve in enumerate(problem.demand):
        rows[:, layout.n_gen + z] = -problem.H.column(curve.bus)
    return rows


def clear_step(problem: ClearingProblem) -> ClearingResult:
    """Maximize utility minus cost subject to balance, flow limits and bid boxes.

    Objective and duals are per hour; welfare is scaled by the step length.
    """
    layout = _Layout(problem)
    line_count = len(problem.H.line_ids)
    if layout.n_vars == 0:
        zeros = tuple(0.0 for _ in range(line_count))
        dispatch = Dispatch(gen={}, load={}, flows=zeros)
        duals = Duals(0.0, zeros, zeros, {}, {}, {}, {}, zeros)
        return ClearingResult(dispatch, duals, nodal_prices(duals, problem.H), 0.0, problem.step)

    c = np.zeros(layout.n_vars)
    bounds: List[Tuple[float, Optional[float]]] = []
    for curve in problem.supply:
        bounds.append((curve.floor, curve.max_quantity))
    for _ in problem.demand:
        bounds.append((0.0, None))
    for i, (_, width, price) in enumerate(layout.supply_segments):
        c[layout.x0 + i] = price
        bounds.append((0.0, width))
    for i, (_, width, price) in enumerate(layout.demand_segments):
        c[layout.y0 + i] = -price
        bounds.append((0.0, width))

    a_eq = np.zeros((1 + layout.n_gen + layout.n_load, layout.n_vars))
    a_eq[0, : layout.n_gen] = 1.0
    a_eq[0, layout.n_gen : layout.x0] = -1.0
    for g in range(layout.n_gen):
        a_eq[1 + g, g] = 1.0
    for z in range(layout.n_load):
        a_eq[1 + layout.n_gen + z, layout.n_gen + z] = 1.0
    for i, (g, _, _) in enumerate(layout.supply_segments):
        a_eq[1 + g, layout.x0 + i] = -1.0
    for i, (z, _, _) in enumerate(layout.demand_segments):
        a_eq[1 + layout.n_gen + z, layout.y0 + i] = -1.0
    b_eq = np.zeros(a_eq.shape[0])

    sensitivity = _injection_rows(problem, layout)
    capped = layout.capped_lines
    a_ub = np.vstack([sensitivity[capped], -sensitivity[capped]]) if capped else None
    b_ub = np.array([problem.line_caps[l] for l in capped] * 2) if capped else None

    res = linprog(
        c,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=bounds,
        method=config.SOLVER_METHOD,
        options={
            "primal_feasibility_tolerance": config.SOLVER_TOLERANCE,
            "dual_feasibility_tolerance": config.SOLVER_TOLERANCE,
        },
    )
    if res.status == 2:
        raise Infeasible(f"Step {problem.step}: {res.message}")
    if res.status == 3:
        raise Unbounded(f"Step {problem.step}: {res.message}")
    if res.status != 0:
        raise MarketError(f"Step {problem.step}: solver status {res.status}: {res.message}")

    x = res.x
    gen = {curve.resource: float(x[g]) for g, curve in enumerate(problem.supply)}
    load = {curve.resource: float(x[layout.n_gen + z]) for z, curve in enumerate(problem.demand)}
    flows = tuple(float(v) for v in sensitivity @ x)

    eq = res.eqlin.marginals
    mu = np.zeros(line_count)
    nu = np.zeros(line_count)
    if capped:
        ub = res.ineqlin.marginals
        mu[capped] = -ub[: len(capped)]
        nu[capped] = -ub[len(capped) :]
    # sign cleanup for values the solver reports as -0.0 or within tolerance of zero
    mu = np.maximum(mu, 0.0)
    nu = np.maximum(nu, 0.0)
    # a pinned generator (floor == max) may report its multiplier on either bound
    bound = res.lower.marginals + res.upper.marginals
    duals = Duals(
        lam=float(eq[0]),
        mu=tuple(float(v) for v in mu),
        nu=tuple(float(v) for v in nu),
        rho={curve.resource: float(-eq[1 + g]) for g, curve in enumerate(problem.supply)},
        sigma={
            curve.resource: float(eq[1 + layout.n_gen + z]) for z, curve in enumerate(problem.demand)
        },
        alpha={curve.resource: float(max(bound[g], 0.0)) for g, curve in enumerate(problem.supply)},
        beta={curve.resource: float(max(-bound[g], 0.0)) for g, curve in enumerate(problem.supply)},
        zeta=tuple(0.0 for _ in range(line_count)),
    )
    welfare = -float(res.fun) * problem.step_hours
    logger.debug(
        "Cleared step %d: lambda=%.6f welfare=%.6f congested=%d",
        problem.step,
        duals.lam,
        welfare,
        int(np.sum((mu + nu) > config.KKT_TOLERANCE)),
    )
    return ClearingResult(
        dispatch=Dispatch(gen=gen, load=load, flows=flows),
        duals=duals,
        nodal_prices=nodal_prices(duals, problem.H),
        welfare=welfare,
        step=problem.step,
    )


def nodal_prices(duals: Duals, H: PtdfMatrix) -> Dict[str, float]:
    """lambda - sum_l H[l, b] (mu_l - nu_l); the importing end of a congested line is dearer."""
    if not len(H.line_ids):
        return {bus_id: duals.lam for bus_id in H.bus_ids}
    congestion = np.asarray(duals.mu, dtype=float) - np.asarray(duals.nu, dtype=float)
    prices = duals.lam - H.entries.T @ congestion
    return {bus_id: float(prices[i]) for i, bus_id in enumerate(H.bus_ids)}


def _recomputed_flows(problem: ClearingProblem, dispatch: Dispatch) -> np.ndarray:
    injections = np.zeros(len(problem.H.bus_ids))
    for curve in problem.supply:
        injections[problem.H.bus_index[curve.bus]] += dispatch.gen[curve.resource]
    for curve in problem.demand:
        injections[problem.H.bus_index[curve.bus]] -= dispatch.load[curve.resource]
    return problem.H.entries @ injections


def verify_kkt(
    problem: ClearingProblem,
    result: ClearingResult,
    tolerance: Optional[float] = None,
) -> KktReport:
    """Recompute primal feasibility, dual feasibility, stationarity, complementarity and the duality gap.

    The duality gap is reported relative to max(1, |welfare|).
    """
    tolerance = config.KKT_TOLERANCE if tolerance is None else tolerance
    d, u = result.dispatch, result.duals
    mu = np.asarray(u.mu, dtype=float)
    nu = np.asarray(u.nu, dtype=float)
    caps = np.asarray(problem.line_caps, dtype=float)
    finite = np.isfinite(caps)
    flows = _recomputed_flows(problem, d)
    prices = nodal_prices(u, problem.H)

    residuals: Dict[str, float] = {}
    residuals["balance"] = abs(sum(d.gen.values()) - sum(d.load.values()))
    over = np.abs(flows) - np.where(finite, caps, np.inf)
    residuals["flow_limits"] = float(np.max(over, initial=0.0)) if over.size else 0.0
    residuals["flow_consistency"] = float(np.max(np.abs(flows - np.asarray(d.flows)), initial=0.0))

    box = 0.0
    for curve in problem.supply:
        p = d.gen[curve.resource]
        box = max(box, curve.floor - p, p - curve.max_quantity)
    for curve in problem.demand:
        l = d.load[curve.resource]
        box = max(box, -l, l - curve.max_quantity)
    residuals["bounds"] = max(box, 0.0)

    negatives = [-v for v in list(mu) + list(nu) + list(u.alpha.values()) + list(u.beta.values()) + list(u.zeta)]
    residuals["dual_feasibility"] = max([0.0] + negatives)

    upper_slack = np.where(finite, caps - flows, 0.0)
    lower_slack = np.where(finite, flows + caps, 0.0)
    unbounded_mult = np.where(finite, 0.0, mu + nu)
    residuals["flow_upper_complementarity"] = float(np.max(np.abs(mu * upper_slack), initial=0.0))
    residuals["flow_lower_complementarity"] = float(np.max(np.abs(nu * lower_slack), initial=0.0))
    residuals["uncapped_multipliers"] = float(np.max(np.abs(unbounded_mult), initial=0.0))

    stationarity = 0.0
    bound_comp = 0.0
    segment_comp = 0.0
    dual_rate = float(np.sum(np.where(finite, caps, 0.0) * (mu + nu)))
    for curve in problem.supply:
        rid = curve.resource
        rho, alpha, beta = u.rho[rid], u.alpha[rid], u.beta[rid]
        p = d.gen[rid]
        stationarity = max(stationarity, abs(rho - (prices[curve.bus] + alpha - beta)))
        bound_comp = max(bound_comp, abs(alpha * (p - curve.floor)), abs(beta * (curve.max_quantity - p)))
        dual_rate += -alpha * curve.floor + beta * curve.max_quantity
        filled = p
        for width, price in curve.segments():
            used = min(width, max(filled, 0.0))
            filled -= used
            segment_comp = max(
                segment_comp,
                max(0.0, rho - price) * (width - used),
                max(0.0, price - rho) * used,
            )
            dual_rate += width * max(0.0, rho - price)
    for curve in problem.demand:
        rid = curve.resource
        sigma = u.sigma[rid]
        l = d.load[rid]
        gap = prices[curve.bus] - sigma
        stationarity = max(stationarity, max(0.0, -gap), abs(gap * l))
        filled = l
        for width, price in curve.segments():
            used = min(width, max(filled, 0.0))
            filled -= used
            segment_comp = max(
                segment_comp,
                max(0.0, price - sigma) * (width - used),
                max(0.0, sigma - price) * used,
            )
            dual_rate += width * max(0.0, price - sigma)
    residuals["stationarity"] = stationarity
    residuals["bound_complementarity"] = bound_comp
    residuals["segment_complementarity"] = segment_comp

    dual_welfare = dual_rate * problem.step_hours
    residuals["duality_gap"] = abs(result.welfare - dual_welfare) / max(1.0, abs(result.welfare))

    degenerate = False
    notes: List[str] = []
    for l, line_id in enumerate(problem.H.line_ids):
        if finite[l] and abs(abs(flows[l]) - caps[l]) <= FEASIBILITY_TOLERANCE and mu[l] + nu[l] <= tolerance:
            degenerate = True
            notes.append(f"line {line_id} binding with zero shadow price")
    if degenerate:
        logger.debug("Step %d degenerate: %s", problem.step, "; ".join(notes))

    return KktReport(residuals=residuals, tolerance=tolerance, degenerate=degenerate, notes=notes)


def welfare_of(dispatch: Dispatch, problem: ClearingProblem) -> float:
    """Integrated utility minus integrated cost over the step, in $."""
    balance = abs(sum(dispatch.gen.values()) - sum(dispatch.load.values()))
    if balance > FEASIBILITY_TOLERANCE:
        raise InfeasibleDispatch(f"Generation and load differ by {balance:.3e} MW")
    total = 0.0
    for curve in problem.supply:
        p = dispatch.gen.get(curve.resource, 0.0)
        if p < curve.floor - FEASIBILITY_TOLERANCE or p > curve.max_quantity + FEASIBILITY_TOLERANCE:
            raise InfeasibleDispatch(f"{curve.resource} dispatched outside its envelope")
        total -= curve.area(p)
    for curve in problem.demand:
        l = dispatch.load.get(curve.resource, 0.0)
        if l < -FEASIBILITY_TOLERANCE or l > curve.max_quantity + FEASIBILITY_TOLERANCE:
            raise InfeasibleDispatch(f"{curve.resource} served outside [0, l_max]")
        total += curve.area(l)
    flows = _recomputed_flows(problem, dispatch)
    for l, cap in enumerate(problem.line_caps):
        if abs(flows[l]) > cap + FEASIBILITY_TOLERANCE:
            raise InfeasibleDispatch(f"Line {problem.H.line_ids[l]} flow {flows[l]:.6f} exceeds {cap}")
    return total * problem.step_hours


def require_kkt(problem: ClearingProblem, result: ClearingResult) -> KktReport:
    report = verify_kkt(problem, result)
    if not report.passed:
        raise KKTViolation(
            f"Step {problem.step} failed KKT check: {', '.join(report.violations())} "
            f"(max residual {report.max_residual:.3e})"
        )
    return report

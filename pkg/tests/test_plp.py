from __future__ import annotations

import unittest
from unittest import mock

from src import config, market, plp
from src.agents import DerSpec
from src.plp import CostSpec, VerifiedClearing
from src.scenario import load_scenario, scenario_from_dict

from tests.builders import congested_line_document, feeder_document, two_bus_problem


def _verified_two_bus(hours: int, capacity: float = 2.0):
    problem = two_bus_problem(capacity)
    result = market.clear_step(problem)
    report = market.verify_kkt(problem, result)
    return [VerifiedClearing(problem, result, report) for _ in range(hours)]


class AnnualizationTestCase(unittest.TestCase):
    def test_switch_and_der_costs(self) -> None:
        self.assertAlmostEqual(plp.annualize_cost(CostSpec(20000.0, 200.0, 0.07, 20)), 2087.9, delta=0.1)
        self.assertAlmostEqual(plp.annualize_cost(CostSpec(85000.0, 200.0, 0.07, 20)), 8223.4, delta=0.1)
        self.assertAlmostEqual(plp.annualize_cost(CostSpec(340.0, 17.0, 0.07, 20)), 49.09, delta=0.1)

    def test_zero_rate_limit(self) -> None:
        self.assertAlmostEqual(plp.annualize_cost(CostSpec(1000.0, 10.0, 0.0, 10)), 110.0)
        near_zero = plp.annualize_cost(CostSpec(1000.0, 10.0, 1e-9, 10))
        self.assertAlmostEqual(near_zero, 110.0, places=4)

    def test_invalid_cost_spec(self) -> None:
        with self.assertRaises(plp.PlanningError):
            CostSpec(-1.0, 0.0)
        with self.assertRaises(plp.PlanningError):
            CostSpec(1.0, 0.0, discount_rate=1.5)


class CapacitySignalTestCase(unittest.TestCase):
    def test_congested_line_over_hundred_hours(self) -> None:
        clearings = _verified_two_bus(100)
        self.assertAlmostEqual(plp.capacity_price_signal(clearings)["L1"], 40.0 * config.HOURS_PER_YEAR, places=4)
        self.assertAlmostEqual(plp.capacity_price_signal(clearings, year_scale=1.0)["L1"], 4000.0, places=4)

    def test_signal_is_additive_over_sub_horizons(self) -> None:
        clearings = _verified_two_bus(10)
        whole = plp.capacity_price_signal(clearings, year_scale=1.0)["L1"]
        parts = (
            plp.capacity_price_signal(clearings[:4], year_scale=1.0)["L1"]
            + plp.capacity_price_signal(clearings[4:], year_scale=1.0)["L1"]
        )
        self.assertAlmostEqual(whole, parts, places=9)

    def test_uncongested_line_has_no_signal(self) -> None:
        clearings = _verified_two_bus(5, capacity=10.0)
        self.assertAlmostEqual(plp.capacity_price_signal(clearings)["L1"], 0.0, places=9)

    def test_site_signal(self) -> None:
        clearings = _verified_two_bus(10)
        site = DerSpec("DER", "n2", capacity=0.0, marginal_cost=10.0, ramp_up=10.0, ramp_down=10.0)
        self.assertAlmostEqual(plp.site_capacity_signal(clearings, site, year_scale=1.0), 400.0, places=5)
        elsewhere = DerSpec("DER", "n1", capacity=0.0, marginal_cost=10.0, ramp_up=10.0, ramp_down=10.0)
        self.assertAlmostEqual(plp.site_capacity_signal(clearings, elsewhere, year_scale=1.0), 0.0, places=9)

    def test_site_signal_needs_full_capacity_bid(self) -> None:
        clearings = _verified_two_bus(10)
        full = DerSpec("g1", "n2", capacity=5.0, marginal_cost=10.0, ramp_up=10.0, ramp_down=10.0)
        self.assertAlmostEqual(plp.site_capacity_signal(clearings, full, year_scale=1.0), 400.0, places=5)
        ramp_limited = DerSpec("g1", "n2", capacity=6.0, marginal_cost=10.0, ramp_up=10.0, ramp_down=10.0)
        self.assertAlmostEqual(plp.site_capacity_signal(clearings, ramp_limited, year_scale=1.0), 0.0, places=9)

    def test_unverified_input_rejected(self) -> None:
        problem = two_bus_problem(2.0)
        result = market.clear_step(problem)
        with self.assertRaises(plp.UnverifiedInput):
            plp.capacity_price_signal([VerifiedClearing(problem, result, None)])
        with self.assertRaises(plp.UnverifiedInput):
            plp.capacity_price_signal([result])

    def test_zero_energy(self) -> None:
        with self.assertRaises(plp.ZeroEnergy):
            plp.reported_unit_price(100.0, 0.0)


class CostRecoveryTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.scenario = scenario_from_dict(congested_line_document())
        cls.sweep = plp.sweep_der_capacity(cls.scenario, "DER1", cls.scenario.der_grid)

    def test_welfare_optimum(self) -> None:
        optimum = plp.sweep_optimum(self.sweep)
        self.assertAlmostEqual(optimum.plan.total_der, 0.09, places=9)

    def test_signal_recovers_capacity_cost(self) -> None:
        optimum = plp.sweep_optimum(self.sweep)
        kappa = self.scenario.kappa_der()
        self.assertLess(abs(optimum.site_signal - kappa) / kappa, 0.05)
        check = plp.verify_investment_kkt(
            [plp.InvestmentCheck("DER1", optimum.plan.total_der, optimum.site_signal, kappa)]
        )
        self.assertTrue(check["passed"])
        bracketed = plp.verify_investment_kkt([plp.optimum_check(self.sweep, optimum, "DER1", kappa)])
        self.assertTrue(bracketed["passed"], bracketed)

    def test_signal_falls_with_capacity(self) -> None:
        signals = [r.site_signal for r in self.sweep]
        for earlier, later in zip(signals, signals[1:]):
            self.assertLessEqual(later, earlier + 1e-6)

    def test_budget_balance(self) -> None:
        for result in self.sweep:
            self.assertLess(abs(result.revenue - result.total_cost) / result.total_cost, 1e-6)

    def test_invalid_grid(self) -> None:
        with self.assertRaises(plp.PlanningError):
            plp.sweep_der_capacity(self.scenario, "DER1", [0.2, 0.1])


class FeederPlanningTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.scenario = scenario_from_dict(feeder_document())

    def test_best_sets_by_count(self) -> None:
        results = plp.plan_switches(self.scenario)
        self.assertEqual([r.count for r in results], [0, 1, 2])
        self.assertEqual([r.plan.locations for r in results], ["", "N", "CN"])
        for result, served in zip(results, (72.0, 88.0, 100.0)):
            self.assertAlmostEqual(result.served, served, places=9)
            self.assertFalse(result.heuristic)

    def test_greedy_fallback_is_labelled(self) -> None:
        with mock.patch.object(config, "EXHAUSTIVE_LIMIT", 1):
            results = plp.plan_switches(self.scenario)
        self.assertTrue(all(r.heuristic for r in results))
        self.assertEqual(results[-1].plan.locations, "CN")

    def test_count_range(self) -> None:
        results = plp.plan_switches(self.scenario, budget_count_range=(1, 1))
        self.assertEqual([r.count for r in results], [1])
        with self.assertRaises(plp.PlanningError):
            plp.plan_switches(self.scenario, budget_count_range=(2, 1))

    def test_budget_balance(self) -> None:
        for result in plp.plan_switches(self.scenario):
            self.assertLess(abs(result.revenue - result.total_cost) / result.total_cost, 1e-6)


class CongestedLineMpcTestCase(unittest.TestCase):
    def test_investment_at_first_epoch(self) -> None:
        scenario = scenario_from_dict(congested_line_document(profile=[1.0] * 4))
        results, plans = plp.mpc_horizon_run(scenario, horizon=4, investment_epoch=2)
        self.assertEqual(len(results), 4)
        self.assertEqual(len(plans), 2)
        first, second = plans
        self.assertAlmostEqual(first.der_capacity["DER1"], 0.3, places=9)
        self.assertGreaterEqual(first.signals["DER1"], scenario.kappa_der())
        self.assertAlmostEqual(second.der_capacity["DER1"], 0.3, places=9)
        self.assertLess(second.signals["DER1"], scenario.kappa_der())

    def test_epoch_must_divide_horizon(self) -> None:
        scenario = scenario_from_dict(congested_line_document(profile=[1.0] * 4))
        with self.assertRaises(plp.PlanningError):
            plp.run_mpc(scenario, horizon=4, investment_epoch=3)


class BundledScenarioTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.scenario = load_scenario(config.DATA_DIR / "desk_scenario.json")
        cls.plans = plp.plan_switches(cls.scenario)

    def test_served_nondecreasing_and_saturating(self) -> None:
        served = [r.served for r in self.plans]
        for earlier, later in zip(served, served[1:]):
            self.assertGreaterEqual(later, earlier - 1e-9)
        self.assertAlmostEqual(served[-1], float(self.scenario.topology.total_customers), places=6)
        self.assertAlmostEqual(served[9], served[-1], places=6)

    def test_price_is_unimodal(self) -> None:
        prices = [r.unit_price for r in self.plans]
        low = prices.index(min(prices))
        self.assertEqual(low, 9)
        self.assertEqual(self.plans[low].plan.locations, "ABCDFGHKL")
        for earlier, later in zip(prices[: low + 1], prices[1 : low + 1]):
            self.assertLess(later, earlier)
        for earlier, later in zip(prices[low:], prices[low + 1 :]):
            self.assertGreater(later, earlier)

    def test_post_saturation_increment(self) -> None:
        kappa_ncs = plp.annualize_cost(self.scenario.costs["NCS"])
        saturated = self.plans[9:]
        for earlier, later in zip(saturated, saturated[1:]):
            self.assertAlmostEqual(later.unit_price - earlier.unit_price, kappa_ncs / later.energy, delta=1e-6)

    def test_budget_balance(self) -> None:
        for result in self.plans:
            self.assertLess(abs(result.revenue - result.total_cost) / result.total_cost, 1e-6)

    def test_der_cost_recovery_is_bracketed(self) -> None:
        sweep = plp.sweep_der_capacity(self.scenario, "DER1", self.scenario.der_grid)
        optimum = plp.sweep_optimum(sweep)
        self.assertGreater(optimum.plan.total_der, 0.0)
        self.assertLess(optimum.plan.total_der, sweep[-1].plan.total_der)
        kappa = self.scenario.kappa_der()
        check = plp.optimum_check(sweep, optimum, "DER1", kappa)
        self.assertGreaterEqual(check.below, kappa)
        self.assertLessEqual(check.above, kappa)
        self.assertTrue(plp.verify_investment_kkt([check])["passed"])

    def test_der_sweep_structure(self) -> None:
        sweep = plp.sweep_der_capacity(self.scenario, "DER1", self.scenario.der_grid)
        prices = [r.unit_price for r in sweep]
        low = prices.index(min(prices))
        self.assertGreater(low, 0)
        self.assertLess(low, len(prices) - 1)
        for result in sweep:
            self.assertAlmostEqual(result.served, sweep[0].served, places=9)
        tail, last = sweep[-2], sweep[-1]
        slope = (last.unit_price - tail.unit_price) / (last.plan.total_der - tail.plan.total_der)
        expected = self.scenario.kappa_der() / last.energy
        self.assertLess(abs(slope - expected) / expected, 0.01)

    def test_mpc_final_plan_is_epoch_invariant(self) -> None:
        _, daily = plp.mpc_horizon_run(self.scenario, horizon=48, investment_epoch=24)
        _, once = plp.mpc_horizon_run(self.scenario, horizon=48, investment_epoch=48)
        self.assertEqual(daily[-1].switches, once[-1].switches)
        self.assertEqual(daily[-1].locations, "ABCDFGHKL")
        self.assertEqual(daily[-1].der_capacity, once[-1].der_capacity)
        self.assertEqual(daily[-1].der_capacity, {"DER1": 2.0, "DER2": 2.0})


if __name__ == "__main__":
    unittest.main()

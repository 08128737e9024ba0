from __future__ import annotations

import json
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

from src import config, scenario
from src.scenario import ParseError, ValidationError, load_scenario, scenario_from_dict

from tests.builders import feeder_document, with_changes


class BundledScenarioTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.scenario = load_scenario(config.DATA_DIR / "desk_scenario.json")

    def test_shape(self) -> None:
        topology = self.scenario.topology
        self.assertEqual(len(topology.buses), 30)
        self.assertEqual(topology.switch_ids, tuple("ABCDEFGHIJKLM"))
        self.assertEqual(topology.total_customers, 2090)
        self.assertEqual(self.scenario.horizon, 24)
        self.assertEqual([s.id for s in self.scenario.der_sites], ["DER1", "DER2"])
        self.assertIn("approximation", self.scenario.description)

    def test_digest_is_stable(self) -> None:
        again = load_scenario(config.DATA_DIR / "desk_scenario.json")
        self.assertEqual(self.scenario.digest, again.digest)
        self.assertEqual(len(self.scenario.digest), 64)

    def test_annualized_costs(self) -> None:
        self.assertAlmostEqual(self.scenario.kappa_switch("A"), 8223.4, delta=0.1)
        self.assertAlmostEqual(self.scenario.kappa_switch("C"), 2087.9, delta=0.1)
        self.assertAlmostEqual(self.scenario.kappa_der(), 49093.6, delta=1.0)

    def test_step_context(self) -> None:
        context = self.scenario.step_context(18)
        self.assertEqual(context.load_factor, 1.0)
        self.assertEqual(context.energized, frozenset(self.scenario.topology.bus_ids))
        self.assertEqual(len(context.line_caps), len(self.scenario.topology.lines))

    def test_market_agents(self) -> None:
        agents = self.scenario.market_agents({"DER1": 0.5})
        names = [a.id.name for a in agents]
        self.assertEqual(names, ["Utility-0", "Aggregator-0", "Aggregator-1"])
        der = {r.id: r.capacity for r in agents[1].resources}
        self.assertEqual(der, {"DER1": 0.5, "DER2": 0.0})
        self.assertEqual(agents[0].perturbation, {"grid": 1.0})


class ValidationTestCase(unittest.TestCase):
    def test_feeder_document_is_valid(self) -> None:
        loaded = scenario_from_dict(feeder_document())
        self.assertEqual(loaded.name, "feeder")
        self.assertEqual(loaded.topology.tie_lines, frozenset({"T4S"}))

    def test_digest_changes_with_content(self) -> None:
        first = scenario_from_dict(feeder_document())
        second = scenario_from_dict(with_changes(feeder_document(), fixed_supply_cost=2000.0))
        self.assertNotEqual(first.digest, second.digest)

    def test_zero_reactance(self) -> None:
        document = feeder_document()
        document["lines"][0]["reactance"] = 0.0
        with self.assertRaises(ValidationError):
            scenario_from_dict(document)

    def test_duplicate_switch_ids(self) -> None:
        document = feeder_document()
        document["switches"][1]["id"] = "C"
        with self.assertRaises(ValidationError):
            scenario_from_dict(document)

    def test_weights_must_sum_to_one(self) -> None:
        document = feeder_document()
        document["contingencies"][1]["weight"] = 0.3
        with self.assertRaises(ValidationError):
            scenario_from_dict(document)

    def test_utility_supply_at_slack(self) -> None:
        document = feeder_document()
        document["utility_supply"]["bus"] = "1"
        with self.assertRaises(ValidationError):
            scenario_from_dict(document)

    def test_every_load_has_one_owner(self) -> None:
        document = feeder_document()
        document["agents"].append({"role": "Aggregator", "index": 0, "loads": ["z1"], "resources": []})
        with self.assertRaises(ValidationError):
            scenario_from_dict(document)

    def test_format_version(self) -> None:
        with self.assertRaises(ValidationError):
            scenario_from_dict(with_changes(feeder_document(), format_version=2))

    def test_missing_field(self) -> None:
        document = feeder_document()
        del document["buses"]
        with self.assertRaises(ParseError) as caught:
            scenario_from_dict(document)
        self.assertIn("buses", str(caught.exception))

    def test_sections_must_be_objects(self) -> None:
        for key, value in (("costs", []), ("lifetimes", 5), ("protocol", "fast"), ("horizon", [1.0])):
            with self.subTest(key=key):
                with self.assertRaises(ParseError) as caught:
                    scenario_from_dict(with_changes(feeder_document(), **{key: value}))
                self.assertIn(key, str(caught.exception))

    def test_networks_are_shared_between_seeds(self) -> None:
        base = scenario_from_dict(feeder_document())
        reseeded = base.with_seed(99)
        self.assertIs(base.network(["N"])[0], reseeded.network(["N"])[0])
        self.assertEqual(base, replace(reseeded, seed=base.seed))

    def test_malformed_value(self) -> None:
        document = feeder_document()
        document["lines"][0]["reactance"] = "thin"
        with self.assertRaises(ParseError):
            scenario_from_dict(document)


class LoadScenarioTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.tmpdir = tempfile.TemporaryDirectory()
        self.path = Path(self.tmpdir.name) / "scenario.json"

    def tearDown(self) -> None:
        self.tmpdir.cleanup()

    def test_round_trip_through_file(self) -> None:
        self.path.write_text(json.dumps(feeder_document()), encoding="utf-8")
        loaded = load_scenario(self.path)
        self.assertEqual(loaded.digest, scenario_from_dict(feeder_document()).digest)

    def test_invalid_json_reports_position(self) -> None:
        self.path.write_text('{"format_version": 1,\n  "name": }', encoding="utf-8")
        with self.assertRaises(ParseError) as caught:
            load_scenario(self.path)
        self.assertEqual(caught.exception.line, 2)

    def test_missing_file(self) -> None:
        with self.assertRaises(scenario.ScenarioError):
            load_scenario(Path(self.tmpdir.name) / "absent.json")


if __name__ == "__main__":
    unittest.main()

from __future__ import annotations

import math
import unittest

import numpy as np

from src import netmodel
from src.netmodel import Bus, Contingency, Line, LineState, SwitchCandidate, SwitchKind, Topology

from tests.builders import feeder_topology, ring_topology


class PtdfTestCase(unittest.TestCase):
    def test_ring_sensitivities(self) -> None:
        H = netmodel.build_ptdf(ring_topology())
        np.testing.assert_allclose(H.column("1"), [1 / 3, 2 / 3, 1 / 3], atol=1e-12)
        np.testing.assert_allclose(H.column("3"), [0.0, 0.0, 0.0])
        self.assertEqual(H.columns, ("1", "2"))
        self.assertFalse(H.is_radial())

    def test_ring_flows(self) -> None:
        H = netmodel.build_ptdf(ring_topology())
        flows = netmodel.line_flows(H, {"1": 1.0, "3": -1.0})
        np.testing.assert_allclose(flows, [1 / 3, 2 / 3, 1 / 3], atol=1e-12)

    def test_flows_are_linear(self) -> None:
        H = netmodel.build_ptdf(ring_topology())
        a = np.array([0.7, -0.2, -0.5])
        b = np.array([-1.1, 0.6, 0.5])
        np.testing.assert_allclose(
            netmodel.line_flows(H, 2.0 * a + b),
            2.0 * netmodel.line_flows(H, a) + netmodel.line_flows(H, b),
            atol=1e-12,
        )

    def test_radial_entries(self) -> None:
        H = netmodel.build_ptdf(feeder_topology())
        self.assertTrue(H.is_radial())
        # injection at bus 3 returns to the slack over L23, L12, LS1 against their direction
        np.testing.assert_allclose(H.column("3"), [-1.0, -1.0, -1.0, 0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(H.column("4"), [-1.0, -1.0, -1.0, -1.0, 0.0], atol=1e-9)

    def test_unbalanced_injection_rejected(self) -> None:
        H = netmodel.build_ptdf(ring_topology())
        with self.assertRaises(netmodel.UnbalancedInjection):
            netmodel.line_flows(H, {"1": 1.0})

    def test_disconnected_bus_rejected(self) -> None:
        topology = feeder_topology()
        with self.assertRaises(netmodel.DisconnectedGraph):
            netmodel.build_ptdf(topology, topology.base_closed_set - {"L34"})

    def test_islanded_bus_allowed_when_not_required(self) -> None:
        topology = feeder_topology()
        H = netmodel.build_ptdf(topology, topology.base_closed_set - {"L34"}, required_buses={"S", "1", "2", "3"})
        np.testing.assert_allclose(H.column("4"), np.zeros(5))
        self.assertNotIn("4", H.columns)

    def test_entries_are_read_only(self) -> None:
        H = netmodel.build_ptdf(ring_topology())
        with self.assertRaises(ValueError):
            H.entries[0, 0] = 5.0


class TopologyValidationTestCase(unittest.TestCase):
    def test_zero_reactance_rejected(self) -> None:
        with self.assertRaises(netmodel.TopologyError):
            Line("L", "a", "b", 0.0, 1.0)

    def test_self_loop_rejected(self) -> None:
        with self.assertRaises(netmodel.TopologyError):
            Line("L", "a", "a", 0.1, 1.0)

    def test_two_slack_buses_rejected(self) -> None:
        with self.assertRaises(netmodel.TopologyError):
            Topology(
                buses=(Bus("a", is_slack=True), Bus("b", is_slack=True)),
                lines=(Line("L", "a", "b", 0.1, 1.0),),
            )

    def test_disconnected_base_state_rejected(self) -> None:
        with self.assertRaises(netmodel.TopologyError):
            Topology(buses=(Bus("a", is_slack=True), Bus("b")), lines=())

    def test_switch_needs_switchable_host(self) -> None:
        with self.assertRaises(netmodel.TopologyError):
            Topology(
                buses=(Bus("a", is_slack=True), Bus("b")),
                lines=(Line("L", "a", "b", 0.1, 1.0),),
                switches=(SwitchCandidate("X", SwitchKind.NCS, "L"),),
            )

    def test_one_switch_per_host(self) -> None:
        with self.assertRaises(netmodel.TopologyError):
            Topology(
                buses=(Bus("a", is_slack=True), Bus("b")),
                lines=(Line("L", "a", "b", 0.1, 1.0, LineState.SWITCHABLE),),
                switches=(
                    SwitchCandidate("X", SwitchKind.NCS, "L"),
                    SwitchCandidate("Y", SwitchKind.NCS, "L"),
                ),
            )

    def test_tie_lines_open_in_base_state(self) -> None:
        topology = feeder_topology()
        self.assertEqual(topology.tie_lines, frozenset({"T4S"}))
        self.assertNotIn("T4S", topology.base_closed_set)

    def test_unknown_switch(self) -> None:
        with self.assertRaises(netmodel.UnknownSwitch):
            netmodel.effective_topology(feeder_topology(), {"Z"})


class RestorationTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.topology = feeder_topology()
        self.fault = Contingency("fault-L23", frozenset({"L23"}), 1.0)

    def test_base_case_energizes_everything(self) -> None:
        closed, energized = netmodel.effective_topology(self.topology, set())
        self.assertEqual(energized, frozenset(self.topology.bus_ids))
        self.assertEqual(closed, self.topology.base_closed_set)

    def test_fault_without_switches(self) -> None:
        _, energized = netmodel.effective_topology(self.topology, set(), self.fault)
        self.assertEqual(energized, frozenset({"S", "1", "2"}))

    def test_tie_restores_healthy_segment(self) -> None:
        closed, energized = netmodel.effective_topology(self.topology, {"N"}, self.fault)
        # bus 3 is the far end of the failed line and stays out
        self.assertEqual(energized, frozenset({"S", "1", "2", "4"}))
        self.assertIn("T4S", closed)
        self.assertNotIn("L34", closed)

    def test_sectionalizer_and_tie_restore_all(self) -> None:
        _, energized = netmodel.effective_topology(self.topology, {"N", "C"}, self.fault)
        self.assertEqual(energized, frozenset(self.topology.bus_ids))

    def test_sectionalizer_alone_restores_nothing(self) -> None:
        _, energized = netmodel.effective_topology(self.topology, {"C"}, self.fault)
        self.assertEqual(energized, frozenset({"S", "1", "2"}))

    def test_unknown_contingency_line(self) -> None:
        with self.assertRaises(netmodel.UnknownContingency):
            netmodel.effective_topology(self.topology, set(), Contingency("x", frozenset({"nope"}), 1.0))

    def test_served_customers(self) -> None:
        contingencies = [
            Contingency("base", frozenset(), 0.6),
            Contingency("fault-L23", frozenset({"L23"}), 0.4),
        ]
        self.assertAlmostEqual(netmodel.served_customers(self.topology, set(), contingencies), 30 + 0.6 * 70)
        self.assertAlmostEqual(netmodel.served_customers(self.topology, {"N"}, contingencies), 100 - 0.4 * 30)
        self.assertAlmostEqual(netmodel.served_customers(self.topology, {"N", "C"}, contingencies), 100.0)

    def test_served_customers_nondecreasing_in_switches(self) -> None:
        contingencies = [
            Contingency("base", frozenset(), 0.5),
            Contingency("a", frozenset({"L23"}), 0.25),
            Contingency("b", frozenset({"L12"}), 0.25),
        ]
        previous = -math.inf
        for installed in (set(), {"N"}, {"N", "C"}):
            served = netmodel.served_customers(self.topology, installed, contingencies)
            self.assertGreaterEqual(served, previous)
            previous = served

    def test_empty_contingency_set_is_base_case(self) -> None:
        self.assertAlmostEqual(netmodel.served_customers(self.topology, set(), []), 100.0)

    def test_weights_must_sum_to_one(self) -> None:
        with self.assertRaises(netmodel.TopologyError):
            netmodel.served_customers(self.topology, set(), [Contingency("base", frozenset(), 0.5)])


if __name__ == "__main__":
    unittest.main()

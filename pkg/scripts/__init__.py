"""Experiment scripts run against the bundled desk scenario."""

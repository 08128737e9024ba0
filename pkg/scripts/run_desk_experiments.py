#!/usr/bin/env python
"""
Run the three planning experiments on the bundled desk scenario and print their tables.

Switch placement by count, the DER capacity sweep at the first site, and a two-day
MPC run with daily investment epochs. Artefacts land under runs/desk/.
"""

from __future__ import annotations

from src import config, plp, results
from src.scenario import load_scenario


def run_switch_plan(scenario) -> None:
    """Best switch set for every count, with the reported unit price."""
    print("\n🔌 Switch placement by count...")
    plans = plp.plan_switches(scenario)
    for r in plans:
        mark = " (greedy)" if r.heuristic else ""
        print(f"  k={r.count:2d}  served={r.served:7.1f}  price={r.unit_price:8.4f}  {r.plan.locations or '-'}{mark}")
    best = min(plans, key=lambda r: (r.unit_price, r.count))
    print(f"✓ Cheapest plan: k={best.count} at {best.unit_price:.4f} $/MWh ({best.plan.locations})")

    metadata = results.table_metadata(scenario.digest, scenario.seed, "plan-switches")
    path = results.write_table(results.switch_table(plans, metadata), config.OUTPUT_DIR / "desk" / "plan_switches.csv")
    print(f"  Wrote {path}")


def run_der_sweep(scenario) -> None:
    """Unit price and welfare as DER capacity grows at the first site."""
    site = scenario.der_sites[0].id
    print(f"\n☀️  DER capacity sweep at {site}...")
    sweep = plp.sweep_der_capacity(scenario, site, scenario.der_grid)
    for r in sweep:
        print(f"  K={r.plan.total_der:4.2f} MW  price={r.unit_price:8.4f}  net welfare={r.net_welfare:14.2f}")
    cheapest = plp.price_minimum(sweep)
    optimum = plp.sweep_optimum(sweep)
    print(f"✓ Price minimum at K={cheapest.plan.total_der:.2f} MW")
    print(f"✓ Welfare optimum at K={optimum.plan.total_der:.2f} MW")

    metadata = results.table_metadata(scenario.digest, scenario.seed, "sweep-der")
    metadata["site"] = site
    path = results.write_table(results.der_table(sweep, metadata), config.OUTPUT_DIR / "desk" / "sweep_der.csv")
    print(f"  Wrote {path}")


def run_mpc(scenario) -> None:
    """Two days of protocol clearings with an investment decision at the end of each day."""
    print("\n📈 MPC run over 48 steps, daily epochs...")
    run = plp.run_mpc(scenario, horizon=2 * scenario.horizon, investment_epoch=scenario.horizon)
    for plan in run.plans:
        der = ", ".join(f"{site}={mw:.1f}" for site, mw in plan.der_capacity.items()) or "none"
        print(f"  step {plan.step:2d}: switches {plan.locations or '-'}  DER {der}")
    iterations = [log.iterations for log in run.logs]
    print(f"✓ {len(run.results)} steps cleared, at most {max(iterations)} protocol iterations per step")


def main() -> None:
    print("\n" + "=" * 60)
    print("⚡ PLPGRID - DESK SCENARIO EXPERIMENTS")
    print("=" * 60)

    scenario = load_scenario(config.SCENARIO_PATH)
    print(f"Scenario {scenario.name} ({scenario.digest[:12]}), seed {scenario.seed}")
    print(f"  {len(scenario.topology.buses)} buses, {scenario.topology.total_customers} customers")

    run_switch_plan(scenario)
    run_der_sweep(scenario)
    run_mpc(scenario)

    print("\n✅ Experiments complete!")
    print("\nRe-run any of them through the CLI, e.g.:")
    print("  python -m src.cli plan-switches --out runs/plan")
    print()


if __name__ == "__main__":
    main()

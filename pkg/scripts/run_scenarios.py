#!/usr/bin/env python3
"""Run every simulation scenario and write one JSON report per scenario.

    python scripts/run_scenarios.py --out reports --seed 42 --nodes 10
"""

import argparse
import json
import sys
from pathlib import Path

from chainpki.simnet import SCENARIOS, SimConfig, run_scenario


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="reports")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--nodes", type=int, default=10)
    ap.add_argument("--gossip-rounds", type=int, default=1)
    ap.add_argument("--sweep-seeds", type=int, default=0,
                    help="also run convergence over this many seeds and tabulate ticks")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    for name in SCENARIOS:
        config = SimConfig(node_count=args.nodes, gossip_rounds_per_tick=args.gossip_rounds, rng_seed=args.seed)
        report = run_scenario(name, config)
        (out / f"{name}.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        ok &= report.passed
        print(f"{name:<28} {'PASS' if report.passed else 'FAIL'}  ticks={report.ticks}  {report.summary}")

    if args.sweep_seeds:
        ticks = {}
        for seed in range(args.sweep_seeds):
            report = run_scenario("convergence", SimConfig(node_count=args.nodes, rng_seed=seed,
                                                           gossip_rounds_per_tick=args.gossip_rounds))
            t = report.summary["converged_at_tick"]
            ticks[t] = ticks.get(t, 0) + 1
        print("convergence ticks over", args.sweep_seeds, "seeds:",
              ", ".join(f"{k}: {v}" for k, v in sorted(ticks.items(), key=lambda kv: (kv[0] is None, kv[0] or 0))))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

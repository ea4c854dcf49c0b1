"""Generator/load weight-ratio sweep for NPS (m=4) and RPS (steps 3,4).

    python3 scripts/weight_sweep.py --out results/sweep.csv [--gammas 0.1:10]
"""
import argparse
from pathlib import Path

from gridshed.harness import ScenarioConfig, SweepConfig, parse_gammas, weight_sweep, write_sweep_csv
from gridshed.solver import SolverConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/sweep.csv")
    ap.add_argument("--gammas", type=parse_gammas, default=parse_gammas("0.1:10"))
    ap.add_argument("--horizon", type=float, default=10.0)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()

    base = ScenarioConfig(sever=[10], solver=SolverConfig(horizon=args.horizon))
    rows = weight_sweep(SweepConfig(base, args.gammas, workers=args.workers))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, args.out)
    for r in rows:
        if r["error"]:
            print(f"gamma={r['gamma']:<5} {r['scheme']}: {r['error']}")
        else:
            print(f"gamma={r['gamma']:<5} {r['scheme']}: N_cb={r['n_connected']} "
                  f"N_ab={r['n_active']} P_t={r['total_power']:.3f} P_m={r['mismatch']:.4f}")


if __name__ == "__main__":
    main()

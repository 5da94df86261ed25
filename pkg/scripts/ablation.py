"""Distance-coefficient ablation on overlapping clusters.

Each seed is trained once; the last checkpoint is then scored with the
coefficient-weighted rule and with the plain concatenated softmax.
"""
import argparse
from pathlib import Path

from morecl import harness, scenarios


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--separation", type=float, default=4.0)
    ap.add_argument("--no-back-update", action="store_true")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        cfg = scenarios.overlapping(seed, args.out / f"seed{seed}", separation=args.separation,
                                    back_update=not args.no_back_update)
        harness.run_experiment(cfg)
        rows.append(scenarios.final_aca_both_rules(cfg))
        print(f"seed {seed}: with coefficient {rows[-1][0]:.2f}  plain {rows[-1][1]:.2f}")
    print(f"mean:   with coefficient {scenarios.mean([r[0] for r in rows]):.2f}  "
          f"plain {scenarios.mean([r[1] for r in rows]):.2f}")


if __name__ == "__main__":
    main()

"""Five-seed desk-scale run: final ACA, AIA, reduction rate, AUC and IAUC per seed."""
import argparse
import json
from pathlib import Path

from morecl import harness, scenarios


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--fwt", action="store_true", help="also train single-task reference models")
    args = ap.parse_args()

    summary = {}
    for seed in args.seeds:
        cfg = scenarios.desk(seed, args.out / f"seed{seed}", fwt_reference=args.fwt)
        record = harness.run_experiment(cfg)
        harness.report(record, "all", cfg.out)
        summary[seed] = {k: record.metrics[k] for k in ("aca", "aia", "reduction_rate", "fwt", "iauc")}
        summary[seed]["final_auc"] = record.metrics["auc_per_step"][-1]
        print(f"seed {seed}\n{harness.format_table(record.metrics)}")
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()

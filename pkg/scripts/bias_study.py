"""Where cross-task errors go with and without revisiting earlier heads."""
import argparse
from pathlib import Path

from morecl import harness, scenarios


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/bias"))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = ap.parse_args()

    print(f"{'seed':>4}  {'earlier off':>11}  {'earlier on':>10}  {'ACA off':>7}  {'ACA on':>6}")
    for seed in args.seeds:
        res = {}
        for flag in (False, True):
            cfg = scenarios.bias(seed, args.out / f"seed{seed}_{'on' if flag else 'off'}", back_update=flag)
            res[flag] = harness.run_experiment(cfg).metrics
        e = {f: res[f]["bias_diagnostic"]["earlier_fraction"] for f in res}
        print(f"{seed:>4}  {e[False]:>11.3f}  {e[True]:>10.3f}  {res[False]['aca']:>7.2f}  {res[True]['aca']:>6.2f}")


if __name__ == "__main__":
    main()

"""Online estimator logs for the constant, ramp and drifting-delay cases.

    python3 scripts/run_online_logs.py [--out results] [--seed 0]

Each log holds the estimates and the simulated truth side by side so the
figures can be drawn with any plotting tool.
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from delayid.scenarios import estimate, load_scenario


def truth_columns(sc, t, x):
    a = sc.system.coeffs
    cols = {f"a{i}": np.broadcast_to(a[i](t), t.shape) for i in range(len(a))}
    cols["b"] = np.broadcast_to(sc.system.gain(t), t.shape)
    cols["h"] = np.broadcast_to(sc.system.input_delay(t), t.shape)
    cols["x"], cols["xdot"] = x[0].values, x[1].values
    return cols


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("example1", "example3", "example4"):
        sc = load_scenario(name, online=True)
        data = sc.generate(args.seed)
        r = estimate(sc, data)
        truth = truth_columns(sc, r.t, data.x)
        header = r.columns + [f"{k}_true" for k in truth]
        table = np.column_stack([r.table()] + [np.asarray(v, float) for v in truth.values()])
        path = out / f"{sc.name}_log.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows([[f"{v:.8g}" for v in row] for row in table[::10]])
        last = r.at(r.t[-1])
        print(f"{sc.name}: " + "  ".join(f"{k}={v:.4g}" for k, v in last.items()) + f"  -> {path}")


if __name__ == "__main__":
    main()

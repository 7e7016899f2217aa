"""Linear / AERC / ASAERC comparison at desk scale.

Runs the configured sweep through the CLI (so artifacts are cached under the
config's out_dir) and prints mean and std of test MSE per model, the per-system
breakdown and the two error ratios.
"""

import argparse
import csv
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from asaerc import cli
from asaerc.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out_dir or cfg.out_dir)
    argv = ["sweep", "--config", args.config, "--out-dir", str(out), "--threads", str(args.threads)]
    code = cli.main(argv)
    if code:
        return code

    manifest = json.loads((out / "run_manifest.json").read_text())
    key = next(s["hash"] for s in manifest["stages"] if s["stage"] == "sweep")
    sweep_csv = out / "sweeps" / key / "sweep.csv"
    vals = defaultdict(list)
    for r in csv.DictReader(open(sweep_csv)):
        if r["status"] == "ok":
            vals[(r["model"], r["metric"])].append(float(r["value"]))

    models = [m for m in ("linear", "aerc", "asaerc") if (m, "test_mse") in vals]
    metrics = sorted({k[1] for k in vals if k[1].startswith("mse:")})
    print(f"\n{'metric':<22}" + "".join(f"{m:>20}" for m in models))
    for metric in ["test_mse"] + metrics:
        cells = []
        for m in models:
            v = np.array(vals.get((m, metric), [np.nan]))
            cells.append(f"{v.mean():>11.4g} +- {v.std():<6.2g}")
        print(f"{metric:<22}" + "".join(f"{c:>20}" for c in cells))

    mean = {m: np.mean(vals[(m, "test_mse")]) for m in models}
    if {"linear", "aerc"} <= set(mean):
        print(f"\nlinear/aerc  {mean['linear'] / mean['aerc']:.2f}")
    if {"aerc", "asaerc"} <= set(mean):
        print(f"aerc/asaerc  {mean['aerc'] / mean['asaerc']:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

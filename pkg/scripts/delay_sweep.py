"""Delay-embedding MLP baseline: test MSE as a function of window length k."""

import argparse
import csv
import sys

from asaerc.config import load_config
from asaerc.dynsys import build_dataset, default_specs, generate
from asaerc.models import build_model
from asaerc.reservoir import Grid
from asaerc.train import FeatureSource, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--k", type=int, nargs="*", default=[0, 1, 2, 4, 8])
    ap.add_argument("--seeds", type=int, nargs="*", default=[0])
    ap.add_argument("--csv", default=None, help="also write rows here")
    args = ap.parse_args()

    cfg = load_config(args.config)
    specs = default_specs(cfg.data.n_samples)
    ds = build_dataset([generate(specs[s]).values for s in cfg.data.systems], cfg.data.test_fraction, cfg.data.systems)

    rows = []
    for seed in args.seeds:
        for k in args.k:
            model = build_model("delay-mlp", Grid(), hidden=cfg.model.hidden, seed=seed, k=k)
            source = FeatureSource(model, ds)
            train(model, ds, None, cfg.train.build(seed), source=source)
            ev = evaluate(model, ds, source=source)
            rows.append(dict(k=k, seed=seed, params=model.n_params(), test_mse=ev.mse))
            print(f"k={k:<3} seed={seed} params={model.n_params():<6} test_mse={ev.mse:.5g}", flush=True)

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

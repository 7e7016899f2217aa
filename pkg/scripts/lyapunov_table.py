"""Print sampling step, spans and largest Lyapunov exponent for each benchmark system."""

import argparse
import time

from asaerc.dynsys import SYSTEM_ORDER, default_specs, estimate_largest_lyapunov


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=7500)
    ap.add_argument("--systems", nargs="*", default=list(SYSTEM_ORDER))
    args = ap.parse_args()

    specs = default_specs(args.samples)
    print(f"{'system':<16}{'step':>8}{'span':>10}{'lyapunov':>11}{'reliable':>10}{'sec':>7}")
    for name in args.systems:
        spec = specs[name]
        t0 = time.perf_counter()
        est = estimate_largest_lyapunov(spec)
        print(f"{name:<16}{spec.sample_dt:>8.3f}{spec.total_time:>10.1f}{est.value:>11.4f}{str(est.reliable):>10}{time.perf_counter() - t0:>7.1f}")


if __name__ == "__main__":
    main()

"""Finite-difference check of every layer kind and both segmentation graphs."""

import argparse
import sys
import time

from msiseg.checks import gradient_suite, suite_lines


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tolerance", type=float, default=1e-3)
    ap.add_argument("--layers-only", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    results = gradient_suite(args.seed, args.tolerance, graphs=not args.layers_only)
    print("\n".join(suite_lines(results)))
    print(f"{time.perf_counter() - t0:.0f}s")
    sys.exit(0 if all(r.passed for _, r in results) else 1)


if __name__ == "__main__":
    main()

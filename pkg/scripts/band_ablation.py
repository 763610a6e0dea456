"""SVM (or another baseline) AA on RGB, 4-band VNIR and all six bands of the vegetation benchmark."""

import argparse
import time

from msiseg.baselines import BaselineSpec
from msiseg.benchmarks import vegetation_data
from msiseg.trainer import BAND_PRESETS, ablation_table, band_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kind", default="svm")
    ap.add_argument("--train-scenes", type=int, default=2)
    ap.add_argument("--test-scenes", type=int, default=1)
    args = ap.parse_args()
    t0 = time.perf_counter()
    train, test = vegetation_data(args.seed, args.train_scenes, args.test_scenes)
    subsets = {k: BAND_PRESETS[k] for k in ("rgb", "vnir4", "all6")}
    rows = band_ablation(train, test, subsets, args.kind, BaselineSpec(), args.seed)
    print(ablation_table(rows), end="")
    aa = [r.evaluation.aa for r in rows]
    print(f"all6 > vnir4 > rgb: {aa[2] > aa[1] > aa[0]}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()

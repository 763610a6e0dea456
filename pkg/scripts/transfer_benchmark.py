"""Synthetic pretraining vs random init for both segmentation heads, majority over seeds.

Writes per-seed AA to ``transfer.csv`` and a bar chart to ``transfer.svg``
in ``--out`` (default: current directory).
"""

import argparse
import time
from pathlib import Path

from msiseg.benchmarks import TransferConfig, run_transfer, transfer_verdict
from msiseg.svg import bar_chart

KEYS = [(h, i) for h in ("sharpmask", "refinenet") for i in ("random", "pretrained")]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default=".")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    results = [run_transfer(s, TransferConfig(), log=print) for s in args.seeds]
    rows = ["seed," + ",".join(f"{h}_{i}" for h, i in KEYS)]
    for s, r in zip(args.seeds, results):
        rows.append(f"{s}," + ",".join(f"{r[k]:.6f}" for k in KEYS))
    (out / "transfer.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    mean = {f"{h[:5]}/{i[:4]}": 100 * sum(r[(h, i)] for r in results) / len(results) for h, i in KEYS}
    (out / "transfer.svg").write_text(bar_chart(mean, "mean test AA by head and init", "AA %"), encoding="utf-8")
    v = transfer_verdict(results)
    print(f"pretrained >= random (both heads): {v['votes_helps']}/{len(results)} seeds -> {v['pretrained_helps']}")
    print(f"RefineNet gap >= SharpMask gap:    {v['votes_gap']}/{len(results)} seeds -> {v['refinenet_gap_larger']}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()

"""Ablation grid over seeds: full vs vae-gan vs cnn-encoder mean test PCC.

Usage: python scripts/run_ablations.py [--seeds 0 1 2]
"""

import argparse

import numpy as np

from dvaegan import benchmark, evaluate

ABLATIONS = ("full", "vae-gan", "cnn-encoder")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    table = {a: [] for a in ABLATIONS}
    for seed in args.seeds:
        dataset = benchmark.benchmark_dataset(seed=seed)
        for ablation in ABLATIONS:
            bundle, _ = benchmark.run_benchmark(dataset, seed=seed, ablation=ablation)
            report = evaluate.make_report(bundle, dataset, seed=seed + 1)
            table[ablation].append(report.pcc_mean)
            print(f"seed={seed} {ablation:12s} PCC={report.pcc_mean:.3f}")
    print()
    for ablation in ABLATIONS:
        vals = np.array(table[ablation])
        print(f"{ablation:12s} mean={vals.mean():.3f} per-seed={np.round(vals, 3).tolist()}")
    margins = np.array(table["full"]) - np.array(table["vae-gan"])
    if len(margins) > 1:
        t = margins.mean() / (margins.std(ddof=1) / np.sqrt(len(margins)) + 1e-12)
        print(f"full - vae-gan margins: {np.round(margins, 3).tolist()} (t={t:.2f})")


if __name__ == "__main__":
    main()

"""Train the canonical benchmark and print the evaluation summary.

Usage: python scripts/run_benchmark.py [--seed N] [--ablation full|vae-gan|cnn-encoder] [--out DIR]
"""

import argparse
import time

from dvaegan import benchmark, evaluate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ablation", default="full", choices=["full", "vae-gan", "cnn-encoder"])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    dataset = benchmark.benchmark_dataset(seed=args.seed)
    t0 = time.time()
    bundle, tlog = benchmark.run_benchmark(
        dataset, seed=args.seed, ablation=args.ablation, out_dir=args.out
    )
    minutes = (time.time() - t0) / 60
    report = evaluate.make_report(bundle, dataset, seed=args.seed + 1, out_dir=args.out)
    stage2 = tlog.stages.get(2)
    gap = ""
    if stage2 is not None and not stage2.skipped and stage2.epochs:
        gap = f"  distill gap {stage2.baseline_gap:.2f} -> {stage2.epochs[-1]['latent_gap']:.2f}"
    print(
        f"{args.ablation} seed={args.seed}: PCC {report.pcc_mean:.3f}+-{report.pcc_std:.3f}  "
        f"SSIM {report.ssim_mean:.3f}  Pix-Com {report.pixcom:.3f}  [{minutes:.1f} min]{gap}"
    )


if __name__ == "__main__":
    main()

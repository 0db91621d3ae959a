"""Sweep the fixed update-compression ratio and tabulate accuracy vs bytes.

Runs one simulation per ratio (shared data and seeds, so the cloud path is
identical) and aggregates the runs with the report machinery.

Usage: python scripts/ratio_sweep.py [--out runs/sweep] [--seed 7]
       [--ratios 2,5,10,20,100]
"""

import argparse
import os
import warnings

from odup.pipeline import ExperimentConfig, run_report, run_simulate


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/sweep")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--ratios", default="2,5,10,20,100")
    args = parser.parse_args()

    ratios = [float(r) for r in args.ratios.split(",")]
    run_dirs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in ratios:
            out = os.path.join(args.out, f"r{r:g}")
            cfg = ExperimentConfig(
                data="synth",
                slices="2:1:1:1:1",
                synth_vocab=300,
                synth_sessions=3000,
                synth_drift=0.3,
                synth_clusters=6,
                d=16,
                rec_epochs=20,
                n=8,
                k=16,
                tau=0.2,
                codec_epochs=250,
                strategy="queue",
                r=r,
                mmd_samples=0,
                seed=args.seed,
                out=out,
            )
            reports = run_simulate(cfg).reports
            final = reports[-1]
            print(f"r={r:g}: beta={reports[1].beta} cum_bytes={final.cum_bytes} "
                  f"device P@10={final.dev_p10:.4f}")
            run_dirs.append(out)

    print()
    print(run_report(run_dirs, os.path.join(args.out, "aggregate")))
    print(f"\ntables in {os.path.join(args.out, 'aggregate')}")


if __name__ == "__main__":
    main()

"""End-to-end demo on synthetic drifting sessions.

Deploys a compressed model at slice 1, then ships queue-strategy deltas at
a fixed 10x update compression and prints the per-slice report.

Usage: python scripts/run_demo.py [--out runs/demo] [--seed 7]
"""

import argparse
import warnings

from odup.pipeline import ExperimentConfig, run_simulate


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

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
        r=10.0,
        mmd_samples=0,
        seed=args.seed,
        out=args.out,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = run_simulate(cfg)
    print(f"{'slice':>5} {'mmd':>9} {'beta':>5} {'bytes':>8} {'cum':>9} "
          f"{'cloud@10':>9} {'dev@10':>8}")
    for r in result.reports:
        print(f"{r.slice:>5} {r.mmd:>9.5f} {r.beta:>5} {r.delta_bytes:>8} "
              f"{r.cum_bytes:>9} {r.cloud_p10:>9.4f} {r.dev_p10:>8.4f}")
    print(f"\nreports written to {result.csv_path}")


if __name__ == "__main__":
    main()

"""Run an ablation spec and print one row per variant.

    python scripts/run_ablation.py configs/ablation.toml --out runs/ablation
"""
import argparse
import logging

from streamfield.experiments import load_ablation_spec, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("spec")
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    spec = load_ablation_spec(args.spec)
    for r in run_ablation(spec, args.out):
        if r["status"] != "ok":
            print(f"{r['variant']:>20s}  {r['status']}")
            continue
        print(f"{r['variant']:>20s}  J={r['iters_per_frame']:<3d}  all {r['mean_psnr_db']:.2f} dB  "
              f"frames>={spec.eval_from} {r['eval_psnr_db']:.2f} dB  train {r['median_train_ms']:.0f} ms  "
              f"{r['mean_samples_per_ray']:.1f} samples/ray")


if __name__ == "__main__":
    main()

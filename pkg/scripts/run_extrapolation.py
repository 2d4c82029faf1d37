"""Render frame k before training on it, for the projected-color and space-time models.

    python scripts/run_extrapolation.py --out runs/extrapolation [--frames 30]
"""
import argparse
import json
from pathlib import Path

from streamfield.config import load_train_config
from streamfield.experiments import extrapolation_eval, summarize_extrapolation, write_rows
from streamfield.geometry import make_forward_facing_rig
from streamfield.scene import generate_scene, moving_sphere_scene

HERE = Path(__file__).resolve().parent
HEADER = ["variant", "frame", "extrapolation_psnr_db", "reconstruction_psnr_db", "lag_psnr_db"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/extrapolation")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--config", default=str(HERE.parent / "configs" / "synthetic.toml"))
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_scene(moving_sphere_scene(args.frames), make_forward_facing_rig())
    rows = extrapolation_eval(ds, load_train_config(args.config))
    write_rows(rows, out / "extrapolation.csv", HEADER)
    summary = summarize_extrapolation(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    for variant, s in summary.items():
        print(f"{variant:>16s}  extrapolation {s['extrapolation_psnr_db']:.2f} dB  "
              f"reconstruction {s['reconstruction_psnr_db']:.2f} dB  vs frame k-1 {s['lag_psnr_db']:.2f} dB")


if __name__ == "__main__":
    main()

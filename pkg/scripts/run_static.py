"""Stream the static scene and report per-frame PSNR spread.

    python scripts/run_static.py --out runs/static [--frames 30]
"""
import argparse
import time
from pathlib import Path

import numpy as np

from streamfield import trainer
from streamfield.config import load_train_config
from streamfield.geometry import make_forward_facing_rig
from streamfield.scene import generate_scene, static_scene

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/static")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--config", default=str(HERE.parent / "configs" / "synthetic.toml"))
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_scene(static_scene(args.frames), make_forward_facing_rig())
    sink = trainer.CsvSink(out / "metrics.csv")
    t0 = time.perf_counter()
    rows, _ = trainer.stream(ds, load_train_config(args.config), sinks=[sink, print_row])
    sink.close()
    psnr = np.array([r["psnr_db"] for r in rows])
    print(f"PSNR {psnr.min():.2f}-{psnr.max():.2f} dB, range {np.ptp(psnr):.2f} dB, "
          f"{(time.perf_counter() - t0) / 60:.1f} min")


def print_row(r):
    print(f"frame {r['frame']:3d}  {r['psnr_db']:6.2f} dB  train {r['train_ms']:8.0f} ms  "
          f"render {r['render_ms']:6.0f} ms  {r['mean_samples_per_ray']:6.1f} samples/ray", flush=True)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Run the VAE pretraining stage with auto-resume on crash."""

import argparse
import sys
import traceback
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from baddiv.training import TrainConfig, train_vae  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--out", default="runs/vae")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-epochs", type=int, default=320)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--warmup-steps", type=int, default=10000)
    ap.add_argument("--resume", action="store_true", dest="resume_first")
    args = ap.parse_args()

    cfg = TrainConfig(stage="vae", data_dir=args.data_dir, out_dir=args.out,
                      seed=args.seed, lr=args.lr, batch_size=args.batch_size,
                      max_epochs=args.max_epochs,
                      warmup_steps=args.warmup_steps)
    for attempt in range(3):
        try:
            res = train_vae(cfg, resume=attempt > 0 or args.resume_first)
            print(f"done: {res['steps']} steps, best val {res['best_val']:.3f}")
            return 0
        except Exception:
            traceback.print_exc()
            print(f"attempt {attempt} failed; resuming", flush=True)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())

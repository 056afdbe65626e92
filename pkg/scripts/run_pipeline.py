#!/usr/bin/env python3
"""Sequential pipeline driver: waits for the VAE pretraining artifacts, then
trains the two classifier variants, runs the divergence fine-tuning, and
emits the evaluation report.  Everything is resumable and idempotent: stages
whose outputs already exist are skipped."""

import argparse
import subprocess
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))


def sh(args):
    print("+", " ".join(map(str, args)), flush=True)
    rc = subprocess.call([sys.executable, "-m", "baddiv.cli", *map(str, args)],
                         env=None)
    if rc != 0:
        raise SystemExit(rc)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--runs", default="runs")
    ap.add_argument("--bad-batch-size", type=int, default=128)
    ap.add_argument("--skip-wait", action="store_true")
    args = ap.parse_args()

    runs = Path(args.runs)
    vae_final = runs / "vae" / "final.ckpt"
    if not args.skip_wait:
        while not vae_final.exists():
            print(f"waiting for {vae_final} ...", flush=True)
            time.sleep(300)
        time.sleep(10)

    clf_dir = runs / "classifier"
    if not (clf_dir / "final.ckpt").exists():
        sh(["train-classifier", "--out", clf_dir, "--mnist-dir",
            args.data_dir, "--seed", 0, "--force"])
    clf_plain = runs / "classifier_noaug"
    if not (clf_plain / "final.ckpt").exists():
        sh(["train-classifier", "--out", clf_plain, "--mnist-dir",
            args.data_dir, "--seed", 0, "--no-augment", "--force"])
    clf_seed1 = runs / "classifier_seed1"
    if not (clf_seed1 / "final.ckpt").exists():
        sh(["train-classifier", "--out", clf_seed1, "--mnist-dir",
            args.data_dir, "--seed", 1, "--force"])

    bad_dir = runs / "bad_mmd"
    if not (bad_dir / "final.ckpt").exists():
        sh(["finetune-bad", "--out", bad_dir, "--mnist-dir", args.data_dir,
            "--vae-checkpoint", vae_final,
            "--classifier-checkpoint", clf_dir / "best.ckpt",
            "--couple", "mmd", "--batch-size", args.bad_batch_size,
            "--seed", 0, "--force"])

    eval_dir = runs / "eval_mmd"
    if not (eval_dir / "metrics.csv").exists():
        sh(["evaluate", "--out", eval_dir, "--mnist-dir", args.data_dir,
            "--vae-checkpoint", vae_final,
            "--bad-checkpoint", bad_dir / "final.ckpt",
            "--classifier-checkpoint", clf_dir / "best.ckpt",
            "--seed", 0, "--force"])
    print("pipeline complete", flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

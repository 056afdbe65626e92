"""Command-line surface tying the pipeline together.

Commands: prepare-data, train-vae, train-classifier, finetune-bad, evaluate,
grid.  Exit codes: 0 success, 2 configuration/user error, 3 training aborted
on NaN (the last good checkpoint path is printed).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

from .runconfig import ConfigError, RunConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

MNIST_FILES = {
    "train-images-idx3-ubyte": "images",
    "train-labels-idx1-ubyte": "labels",
    "t10k-images-idx3-ubyte": "images",
    "t10k-labels-idx1-ubyte": "labels",
}


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig()


def _data_dir(cfg: RunConfig, args) -> str:
    if getattr(args, "mnist_dir", None):
        return args.mnist_dir
    env = os.environ.get("BADDIV_DATA_ROOT")
    if env:
        return env
    return cfg.get("data", "mnist_dir")


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    marker = out / "resolved.ini"
    if marker.exists() and not args.force and not getattr(args, "resume",
                                                          False):
        raise ConfigError(
            f"output directory {out} already holds a run (use --force to "
            f"overwrite or --resume where supported)")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    return out


# ---------------------------------------------------------------------------
# prepare-data
# ---------------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    from .data import read_idx_images, read_idx_labels

    data_dir = Path(args.mnist_dir)
    lines = ["# baddiv dataset manifest"]
    counts = {}
    for name, kind in MNIST_FILES.items():
        path = data_dir / name
        if not path.exists():
            print(f"error: missing {kind} file: {path}", file=sys.stderr)
            return EXIT_CONFIG
        payload = path.read_bytes()
        digest = hashlib.sha256(payload).hexdigest()
        if kind == "images":
            arr = read_idx_images(path)
            counts[name] = len(arr)
            lines.append(f"{name} sha256={digest} items={len(arr)} "
                         f"rows={arr.shape[1]} cols={arr.shape[2]}")
        else:
            arr = read_idx_labels(path)
            counts[name] = len(arr)
            lines.append(f"{name} sha256={digest} items={len(arr)}")
    for split in ("train", "t10k"):
        a = counts[f"{split}-images-idx3-ubyte"]
        b = counts[f"{split}-labels-idx1-ubyte"]
        if a != b:
            print(f"error: {split} split has {a} images but {b} labels",
                  file=sys.stderr)
            return EXIT_CONFIG
    lines.append(f"total_train={counts['train-images-idx3-ubyte']}")
    lines.append(f"total_test={counts['t10k-images-idx3-ubyte']}")
    manifest = data_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    print(f"wrote {manifest}: {counts['train-images-idx3-ubyte']} train / "
          f"{counts['t10k-images-idx3-ubyte']} test items")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

def _train_config_vae(cfg: RunConfig, args, data_dir: str):
    from .training import TrainConfig
    sec = "vae"
    if args.seed is not None:
        cfg.set(sec, "seed", args.seed)
    if args.max_epochs is not None:
        cfg.set(sec, "max_epochs", args.max_epochs)
    if getattr(args, "batch_size", None) is not None:
        cfg.set(sec, "batch_size", args.batch_size)
    return TrainConfig(
        stage="vae", data_dir=data_dir, out_dir=args.out,
        seed=cfg.get_int(sec, "seed"), lr=cfg.get_float(sec, "lr"),
        batch_size=cfg.get_int(sec, "batch_size"),
        max_epochs=cfg.get_int(sec, "max_epochs"),
        warmup_steps=cfg.get_int(sec, "warmup_steps"),
        patience=cfg.get_int(sec, "patience"),
        min_rel_improvement=cfg.get_float(sec, "min_rel_improvement"))


def cmd_train_vae(args) -> int:
    from .training import TrainingDiverged, train_vae

    cfg = _load_config(args)
    data_dir = _data_dir(cfg, args)
    cfg.set("data", "mnist_dir", data_dir)
    tc = _train_config_vae(cfg, args, data_dir)
    _prepare_out(args, cfg)
    try:
        res = train_vae(tc, resume=args.resume)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint: {exc.last_good}",
              file=sys.stderr)
        return EXIT_DIVERGED
    print(f"train-vae done: {res['steps']} steps, best val total "
          f"{res['best_val']:.3f}, outputs in {res['out_dir']}")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    from .training import TrainConfig, TrainingDiverged, train_classifier

    cfg = _load_config(args)
    data_dir = _data_dir(cfg, args)
    cfg.set("data", "mnist_dir", data_dir)
    sec = "classifier"
    if args.seed is not None:
        cfg.set(sec, "seed", args.seed)
    if args.max_epochs is not None:
        cfg.set(sec, "max_epochs", args.max_epochs)
    if args.no_augment:
        cfg.set(sec, "augment", "false")
    tc = TrainConfig(
        stage="classifier", data_dir=data_dir, out_dir=args.out,
        seed=cfg.get_int(sec, "seed"), lr=cfg.get_float(sec, "lr"),
        batch_size=cfg.get_int(sec, "batch_size"),
        max_epochs=cfg.get_int(sec, "max_epochs"),
        augment=cfg.get_bool(sec, "augment"),
        patience=cfg.get_int(sec, "patience"),
        min_rel_improvement=cfg.get_float(sec, "min_rel_improvement"))
    _prepare_out(args, cfg)
    try:
        res = train_classifier(tc)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint: {exc.last_good}",
              file=sys.stderr)
        return EXIT_DIVERGED
    print(f"train-classifier done: best accuracy {res['best_accuracy']:.4f}, "
          f"outputs in {res['out_dir']}")
    return EXIT_OK


def cmd_finetune_bad(args) -> int:
    from .divergences import BadConfig, KernelConfig
    from .training import TrainConfig, TrainingDiverged, finetune_bad

    cfg = _load_config(args)
    data_dir = _data_dir(cfg, args)
    cfg.set("data", "mnist_dir", data_dir)
    sec = "bad"
    for flag, key in (("seed", "seed"), ("vae_checkpoint", "vae_checkpoint"),
                      ("classifier_checkpoint", "classifier_checkpoint"),
                      ("batch_size", "batch_size"), ("epochs", "epochs"),
                      ("couple", "couple")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(sec, key, val)
    for key in ("vae_checkpoint", "classifier_checkpoint"):
        if not cfg.get(sec, key):
            print(f"error: missing required key '{key}' in section [bad] "
                  f"(set it in the config or pass --{key.replace('_', '-')})",
                  file=sys.stderr)
            return EXIT_CONFIG
    bandwidth = cfg.get(sec, "kernel_bandwidth")
    kernel = KernelConfig(bandwidth="median" if bandwidth == "median"
                          else float(bandwidth))
    alpha = cfg.get(sec, "alpha")
    beta = cfg.get(sec, "beta")
    bad = BadConfig(couple=cfg.get(sec, "couple"),
                    alpha=float(alpha) if alpha else None,
                    beta=float(beta) if beta else None,
                    classifier=cfg.get(sec, "classifier_kind"),
                    kernel=kernel)
    cfg.set(sec, "alpha", bad.alpha)
    cfg.set(sec, "beta", bad.beta)
    tc = TrainConfig(
        stage="bad", data_dir=data_dir, out_dir=args.out,
        seed=cfg.get_int(sec, "seed"), lr=cfg.get_float(sec, "lr"),
        batch_size=cfg.get_int(sec, "batch_size"),
        epochs=cfg.get_int(sec, "epochs"),
        batches_per_epoch=cfg.get_int(sec, "batches_per_epoch"),
        checkpoint_every=cfg.get_int(sec, "checkpoint_every"),
        vae_checkpoint=cfg.get(sec, "vae_checkpoint"),
        classifier_checkpoint=cfg.get(sec, "classifier_checkpoint"),
        bad=bad)
    _prepare_out(args, cfg)
    try:
        res = finetune_bad(tc)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint: {exc.last_good}",
              file=sys.stderr)
        return EXIT_DIVERGED
    last = res["history"][-1]
    print(f"finetune-bad done: l_div {last['l_div']:.5f} l_reg "
          f"{last['l_reg']:.5f}, outputs in {res['out_dir']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation commands
# ---------------------------------------------------------------------------

def _eval_args(cfg: RunConfig, args):
    sec = "eval"
    for flag, key in (("vae_checkpoint", "vae_checkpoint"),
                      ("bad_checkpoint", "bad_checkpoint"),
                      ("classifier_checkpoint", "classifier_checkpoint"),
                      ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(sec, key, val)
    if args.temperatures:
        cfg.set(sec, "temperatures", args.temperatures)
    missing = [k for k in ("vae_checkpoint", "bad_checkpoint",
                           "classifier_checkpoint") if not cfg.get(sec, k)]
    if missing:
        raise ConfigError(f"missing required eval checkpoint keys: "
                          f"{', '.join(missing)}")
    return (cfg.get(sec, "vae_checkpoint"), cfg.get(sec, "bad_checkpoint"),
            cfg.get(sec, "classifier_checkpoint"),
            cfg.get_floats(sec, "temperatures"), cfg.get_int(sec, "seed"),
            cfg.get_int(sec, "n_samples"), cfg.get_int(sec, "prd_clusters"))


def cmd_evaluate(args) -> int:
    from .checkpoint import CheckpointError
    from .evaluation import evaluate_run

    cfg = _load_config(args)
    data_dir = _data_dir(cfg, args)
    cfg.set("data", "mnist_dir", data_dir)
    vae_ck, bad_ck, clf_ck, temps, seed, n_samples, prd_k = \
        _eval_args(cfg, args)
    _prepare_out(args, cfg)
    try:
        evaluate_run(vae_ck, bad_ck, clf_ck, args.out, temperatures=temps,
                     seed=seed, n_samples=n_samples, data_dir=data_dir,
                     prd_clusters=prd_k)
    except (CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"evaluate done: reports in {args.out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    import numpy as np

    from .autodiff import no_grad
    from .checkpoint import CheckpointError, load_checkpoint
    from .evaluation import write_png_grid
    from .models import Vae, sample_prior
    from .training import _vae_arch

    cfg = _load_config(args)
    temps = cfg.get_floats("eval", "temperatures") \
        if not args.temperatures else [float(t) for t in
                                       args.temperatures.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        for spec in args.checkpoints:
            name, _, path = spec.partition("=")
            if not path:
                name, path = Path(spec).stem, spec
            vae = Vae(seed=0)
            ck = load_checkpoint(path, expected_arch=_vae_arch(vae))
            vae.load_state_dict(ck.tensors)
            vae.eval()
            for t in temps:
                rng = np.random.default_rng(args.seed + int(t * 1000))
                z = sample_prior(64, t, rng)
                with no_grad():
                    imgs = vae.decode(z).numpy()
                write_png_grid(out / f"grid_{name}_{t}.png", imgs)
    except (CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"grid done: {len(args.checkpoints) * len(temps)} grids in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="baddiv",
        description="Divergence-driven fine-tuning of a small MNIST VAE")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="validate an MNIST IDX directory")
    p.add_argument("--mnist-dir", required=True)
    p.set_defaults(func=cmd_prepare_data)

    def common(p, resume=False):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--mnist-dir")
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing run directory")
        if resume:
            p.add_argument("--resume", action="store_true",
                           help="continue from the last checkpoint")

    p = sub.add_parser("train-vae", help="pretrain the VAE on binary MNIST")
    common(p, resume=True)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-classifier",
                       help="train the digit classifier with augmentation")
    common(p)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train_classifier, resume=False)

    p = sub.add_parser("finetune-bad",
                       help="fine-tune the decoder with a divergence couple")
    common(p)
    p.add_argument("--vae-checkpoint")
    p.add_argument("--classifier-checkpoint")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--couple", choices=["mmd", "is_fid"])
    p.set_defaults(func=cmd_finetune_bad, resume=False)

    p = sub.add_parser("evaluate",
                       help="full temperature-sweep evaluation report")
    common(p)
    p.add_argument("--vae-checkpoint")
    p.add_argument("--bad-checkpoint")
    p.add_argument("--classifier-checkpoint")
    p.add_argument("--temperatures", help="comma-separated list")
    p.set_defaults(func=cmd_evaluate, resume=False)

    p = sub.add_parser("grid", help="PNG sample grids for checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True,
                   metavar="NAME=PATH")
    p.add_argument("--temperatures")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grid)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())

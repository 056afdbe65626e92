"""The three optimization procedures: VAE pretraining with KL warm-up,
classifier training with augmentation, and divergence fine-tuning of the
frozen-architecture decoder.

Stopping rule: "until convergence" means the monitored validation loss
improved by less than 0.1% (relative) over the last `patience` epochs, capped
at `max_epochs`.  For the VAE the monitor only engages once the KL warm-up is
complete, since the ramp itself inflates the total loss.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import data as D
from .autodiff import Adam, Tape, Tensor, finite_checks, no_grad
from .checkpoint import arch_hash, load_checkpoint, save_checkpoint
from .divergences import BadConfig, bad_loss_isfid, bad_loss_mmd
from .models import MnistClassifier, Vae, reparameterize, sample_prior

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "MetricsLog",
    "elbo_loss",
    "kl_weight",
    "train_vae",
    "train_classifier",
    "finetune_bad",
    "finetune_bad_loop",
    "config_hash_of",
]


class TrainingDiverged(RuntimeError):
    """Loss went NaN; carries the path of the last good checkpoint."""

    def __init__(self, message: str, last_good: Optional[str]):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    stage: str                      # "vae" | "classifier" | "bad"
    data_dir: str
    out_dir: str
    seed: int = 0
    lr: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 200
    warmup_steps: int = 10000       # vae only
    patience: int = 5
    min_rel_improvement: float = 1e-3
    augment: bool = True            # classifier only
    epochs: int = 180               # bad only
    batches_per_epoch: int = 40     # bad only
    checkpoint_every: int = 10      # bad only
    vae_checkpoint: str = ""        # bad only
    classifier_checkpoint: str = ""  # bad only
    bad: Optional[BadConfig] = None

    def __post_init__(self):
        if self.stage not in ("vae", "classifier", "bad"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warm-up horizon must be >= 0, "
                             f"got {self.warmup_steps}")
        if self.stage == "bad":
            if not self.vae_checkpoint or not self.classifier_checkpoint:
                raise ValueError("stage 'bad' requires vae_checkpoint and "
                                 "classifier_checkpoint")
            if self.bad is None:
                self.bad = BadConfig()


def config_hash_of(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    d.pop("out_dir")  # where a run lands does not change what it computes
    blob = json.dumps(d, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class MetricsLog:
    """Append-only CSV with strictly increasing step indices.

    Wall-clock timing deliberately goes to a sidecar .log file so the CSV is
    byte-identical across re-runs with the same config and seed.
    """

    def __init__(self, path, fields: list[str], config_hash: str,
                 append: bool = False):
        self.path = Path(path)
        self.fields = ["step"] + fields + ["config_hash"]
        self.config_hash = config_hash
        self._last_step = -1
        self._t0 = time.time()
        self.side = open(self.path.with_suffix(".log"), "a")
        if append and self.path.exists():
            self._f = open(self.path, "a")
        else:
            self._f = open(self.path, "w")
            self._f.write(",".join(self.fields) + "\n")

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def append(self, step: int, **values) -> None:
        if step < self._last_step:
            raise ValueError(f"metrics step went backwards: {step} after "
                             f"{self._last_step}")
        self._last_step = step
        row = [str(step)]
        row += [self._fmt(values.get(k, "")) for k in self.fields[1:-1]]
        row.append(self.config_hash)
        self._f.write(",".join(row) + "\n")
        self._f.flush()

    def note(self, msg: str) -> None:
        self.side.write(f"[{time.time() - self._t0:10.1f}s] {msg}\n")
        self.side.flush()

    def close(self) -> None:
        self._f.close()
        self.side.close()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def kl_weight(step: int, horizon: int) -> float:
    """Linear ramp 0 -> 1 over `horizon` optimizer steps, then 1."""
    if horizon <= 0:
        return 1.0
    return min(step / horizon, 1.0)


def elbo_loss(x, x_hat, mu, logvar, kl_weight: float):
    """Bernoulli reconstruction plus weighted KL to the unit prior.

    bce/kld are per-example sums (784 pixels / 16 latents), batch-averaged;
    total = bce + kl_weight * kld.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    lo, hi = float(x_hat.data.min()), float(x_hat.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"elbo_loss: x_hat outside (0, 1): [{lo}, {hi}]")
    xc = ad.clip(x_hat, 1e-6, 1.0 - 1e-6)
    ll = ad.add(ad.mul(x, ad.log(xc)),
                ad.mul(ad.sub(1.0, x), ad.log(ad.sub(1.0, xc))))
    bce = ad.tmean(ad.tsum(ad.neg(ll), axis=tuple(range(1, x.ndim))))
    kld_terms = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)),
                       ad.add(logvar, 1.0))
    kld = ad.tmean(ad.mul(ad.tsum(kld_terms, axis=1), 0.5))
    total = ad.add(bce, ad.mul(kld, float(kl_weight)))
    return total, bce, kld


def _mse_sum(x: np.ndarray, x_hat: np.ndarray) -> float:
    d = (x - x_hat).reshape(len(x), -1)
    return float((d * d).sum(axis=1).mean())


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2 ** 31)


# ---------------------------------------------------------------------------
# VAE pretraining
# ---------------------------------------------------------------------------

def _vae_arch(model: Vae) -> str:
    shapes = [(n, p.shape) for n, p in model.named_parameters()]
    shapes += [(n, b.shape) for n, b in model.named_buffers()]
    return arch_hash("vae-conv28-v1", shapes)


def _clf_arch(model: MnistClassifier) -> str:
    shapes = [(n, p.shape) for n, p in model.named_parameters()]
    return arch_hash("classifier-conv28-v1", shapes)


def _save_model(path, model, arch: str, chash: str, step: int,
                opt: Optional[Adam] = None) -> None:
    save_checkpoint(path, arch=arch, config_hash=chash, step=step,
                    tensors=model.state_dict(),
                    optimizer=opt.state_dict() if opt else None)


def _vae_eval_metrics(model: Vae, images: np.ndarray, batch: int,
                      seed: int) -> dict:
    rng = np.random.default_rng(seed)
    sums = np.zeros(3)
    n = 0
    model.eval()
    with no_grad():
        for start in range(0, len(images), batch):
            xb = images[start:start + batch]
            mu, logvar = model.encode(xb)
            z = reparameterize(mu, logvar, rng)
            xhat = model.decode(z)
            _, bce, kld = elbo_loss(xb, xhat, mu, logvar, 1.0)
            k = len(xb)
            sums += k * np.array([bce.item(), _mse_sum(xb, xhat.numpy()),
                                  kld.item()])
            n += k
    model.train()
    bce, mse, kld = sums / n
    return {"bce": bce, "mse": mse, "kld": kld, "total": bce + kld}


def train_vae(cfg: TrainConfig, resume: bool = False) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash_of(cfg)
    train = D.load_mnist_idx(Path(cfg.data_dir) / "train-images-idx3-ubyte",
                             Path(cfg.data_dir) / "train-labels-idx1-ubyte")
    val = D.load_mnist_idx(Path(cfg.data_dir) / "t10k-images-idx3-ubyte",
                           Path(cfg.data_dir) / "t10k-labels-idx1-ubyte")
    x_train = D.binarize(train.images)
    x_val = D.binarize(val.images)

    model = Vae(seed=cfg.seed)
    arch = _vae_arch(model)
    opt = Adam(list(model.named_parameters()), lr=cfg.lr)
    start_epoch = 0
    step = 0
    last_path = out / "last.ckpt"
    resumed = False
    if resume and last_path.exists():
        ck = load_checkpoint(last_path, expected_arch=arch)
        model.load_state_dict(ck.tensors)
        opt.load_state_dict(ck.optimizer)
        step = ck.step
        start_epoch = int(round(ck.optimizer["adam.epoch"][0])) + 1
        resumed = True

    log = MetricsLog(out / "metrics.csv",
                     ["epoch", "split", "bce", "mse", "kld", "total",
                      "kl_weight"], chash, append=resumed)
    best = np.inf
    stale = 0
    final_epoch = cfg.max_epochs - 1
    if not resumed:
        opt_state = opt.state_dict()
        opt_state["adam.epoch"] = np.array([-1], dtype=np.float32)
        save_checkpoint(last_path, arch=arch, config_hash=chash, step=step,
                        tensors=model.state_dict(), optimizer=opt_state)
    history = []
    for epoch in range(start_epoch, cfg.max_epochs):
        rng = np.random.default_rng(_epoch_seed(cfg.seed, epoch))
        train_sums = np.zeros(3)
        seen = 0
        with finite_checks(False):
            for (xb,) in D.batches((x_train,), cfg.batch_size,
                                   _epoch_seed(cfg.seed, epoch)):
                w = kl_weight(step, cfg.warmup_steps)
                with Tape() as tape:
                    mu, logvar = model.encode(Tensor(xb))
                    z = reparameterize(mu, logvar, rng)
                    xhat = model.decode(z)
                    total, bce, kld = elbo_loss(xb, xhat, mu, logvar, w)
                if not np.isfinite(total.item()):
                    log.note(f"NaN loss at step {step}; aborting")
                    raise TrainingDiverged(
                        f"loss diverged at step {step}", str(last_path))
                tape.backward(total)
                opt.step()
                opt.zero_grad()
                train_sums += len(xb) * np.array(
                    [bce.item(), _mse_sum(xb, xhat.numpy()), kld.item()])
                seen += len(xb)
                step += 1
        tb, tm, tk = train_sums / seen
        w_now = kl_weight(step, cfg.warmup_steps)
        log.append(step, epoch=epoch, split="train", bce=tb, mse=tm, kld=tk,
                   total=tb + tk, kl_weight=w_now)
        vm = _vae_eval_metrics(model, x_val, cfg.batch_size, cfg.seed)
        log.append(step, epoch=epoch, split="val", kl_weight=w_now, **vm)
        log.note(f"epoch {epoch}: step {step} train bce {tb:.2f} kld {tk:.2f} "
                 f"| val bce {vm['bce']:.2f} kld {vm['kld']:.2f} w {w_now:.3f}")
        history.append({"epoch": epoch, "step": step, "train_bce": tb,
                        "train_mse": tm, "train_kld": tk, **{
                            "val_" + k: v for k, v in vm.items()}})
        opt_state = opt.state_dict()
        opt_state["adam.epoch"] = np.array([epoch], dtype=np.float32)
        save_checkpoint(last_path, arch=arch, config_hash=chash, step=step,
                        tensors=model.state_dict(), optimizer=opt_state)
        warmed_up = step >= cfg.warmup_steps
        if warmed_up:
            if vm["total"] < best * (1.0 - cfg.min_rel_improvement):
                best = vm["total"]
                stale = 0
                _save_model(out / "best.ckpt", model, arch, chash, step)
            else:
                stale += 1
            if stale >= cfg.patience:
                final_epoch = epoch
                log.note(f"converged at epoch {epoch} (no val improvement "
                         f"over {cfg.patience} epochs)")
                break
    if not (out / "best.ckpt").exists():
        _save_model(out / "best.ckpt", model, arch, chash, step)
    _save_model(out / "final.ckpt", model, arch, chash, step)
    log.close()
    return {"arch": arch, "config_hash": chash, "steps": step,
            "final_epoch": final_epoch, "history": history,
            "best_val": best if best < np.inf else history[-1]["val_total"],
            "out_dir": str(out)}


# ---------------------------------------------------------------------------
# classifier training
# ---------------------------------------------------------------------------

def _xent_loss(logits, labels: np.ndarray):
    onehot = np.zeros(logits.shape, dtype=np.float32)
    onehot[np.arange(len(labels)), labels] = 1.0
    logp = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.tmean(ad.tsum(ad.mul(logp, Tensor(onehot)), axis=1)))


def _clf_eval(model: MnistClassifier, images, labels, batch: int,
              augment_rng: Optional[np.random.Generator]) -> dict:
    model.eval()
    ce_sum = 0.0
    correct = 0
    with no_grad():
        for start in range(0, len(images), batch):
            xb = images[start:start + batch]
            yb = labels[start:start + batch]
            if augment_rng is not None:
                xb = D.augment(xb, augment_rng)
            logits, probs, _ = model.forward(xb)
            ce_sum += _xent_loss(logits, yb).item() * len(xb)
            correct += int((probs.numpy().argmax(axis=1) == yb).sum())
    model.train()
    return {"ce": ce_sum / len(images), "accuracy": correct / len(images)}


def train_classifier(cfg: TrainConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash_of(cfg)
    train = D.load_mnist_idx(Path(cfg.data_dir) / "train-images-idx3-ubyte",
                             Path(cfg.data_dir) / "train-labels-idx1-ubyte")
    val = D.load_mnist_idx(Path(cfg.data_dir) / "t10k-images-idx3-ubyte",
                           Path(cfg.data_dir) / "t10k-labels-idx1-ubyte")

    model = MnistClassifier(seed=cfg.seed)
    arch = _clf_arch(model)
    opt = Adam(list(model.named_parameters()), lr=cfg.lr)
    log = MetricsLog(out / "metrics.csv",
                     ["epoch", "split", "ce", "accuracy"], chash)
    last_path = out / "last.ckpt"
    _save_model(last_path, model, arch, chash, 0, opt)
    step = 0
    best_acc = -1.0
    best_ce = np.inf
    stale = 0
    history = []
    for epoch in range(cfg.max_epochs):
        aug_rng = np.random.default_rng(_epoch_seed(cfg.seed + 77, epoch))
        ce_sum = 0.0
        correct = 0
        with finite_checks(False):
            for xb, yb in D.batches((train.images, train.labels),
                                    cfg.batch_size,
                                    _epoch_seed(cfg.seed, epoch)):
                if cfg.augment:
                    xb = D.augment(xb, aug_rng)
                with Tape() as tape:
                    logits, probs, _ = model.forward(Tensor(xb))
                    loss = _xent_loss(logits, yb)
                if not np.isfinite(loss.item()):
                    log.note(f"NaN loss at step {step}; aborting")
                    raise TrainingDiverged(
                        f"loss diverged at step {step}", str(last_path))
                tape.backward(loss)
                opt.step()
                opt.zero_grad()
                ce_sum += loss.item() * len(xb)
                correct += int((probs.numpy().argmax(axis=1) == yb).sum())
                step += 1
        tr = {"ce": ce_sum / len(train.images),
              "accuracy": correct / len(train.images)}
        log.append(step, epoch=epoch, split="train", **tr)
        clean = _clf_eval(model, val.images, val.labels, cfg.batch_size, None)
        log.append(step, epoch=epoch, split="val", **clean)
        row = {"epoch": epoch, "train": tr, "val": clean}
        if cfg.augment:
            vaug_rng = np.random.default_rng(_epoch_seed(cfg.seed + 99, epoch))
            vaug = _clf_eval(model, val.images, val.labels, cfg.batch_size,
                             vaug_rng)
            log.append(step, epoch=epoch, split="val_augmented", **vaug)
            row["val_augmented"] = vaug
            monitored = vaug
        else:
            monitored = clean
        history.append(row)
        log.note(f"epoch {epoch}: train acc {tr['accuracy']:.4f} "
                 f"val acc {clean['accuracy']:.4f}" +
                 (f" val_aug acc {row['val_augmented']['accuracy']:.4f}"
                  if cfg.augment else ""))
        _save_model(last_path, model, arch, chash, step, opt)
        if monitored["accuracy"] > best_acc:
            best_acc = monitored["accuracy"]
            _save_model(out / "best.ckpt", model, arch, chash, step)
        if monitored["ce"] < best_ce * (1.0 - cfg.min_rel_improvement):
            best_ce = monitored["ce"]
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience:
            log.note(f"converged at epoch {epoch}")
            break
    _save_model(out / "final.ckpt", model, arch, chash, step)
    log.close()
    return {"arch": arch, "config_hash": chash, "history": history,
            "best_accuracy": best_acc, "out_dir": str(out)}


# ---------------------------------------------------------------------------
# divergence fine-tuning
# ---------------------------------------------------------------------------

def _split_by_class(images: np.ndarray, labels: np.ndarray, k: int):
    return [images[labels == c] for c in range(k)]


def _draw_bad_batches(images, labels, batch_size: int, count: int,
                      seed: int, num_classes: int, max_redraws: int = 100):
    """Yield `count` (batch, by_class) pairs; batches come from reshuffled
    epoch passes (sequential slices, reshuffle when exhausted) and a batch
    missing a class is redrawn from the stream."""
    n = len(images)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pos = 0
    produced = 0
    redraws = 0
    while produced < count:
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        xb, yb = images[idx], labels[idx]
        counts = np.bincount(yb, minlength=num_classes)
        if counts.min() < 2:
            redraws += 1
            if redraws > max_redraws:
                missing = int(np.argmin(counts))
                raise ValueError(
                    f"could not draw a batch with >= 2 samples of class "
                    f"{missing} after {max_redraws} redraws; increase the "
                    f"batch size")
            continue
        produced += 1
        yield xb, _split_by_class(xb, yb, num_classes)


def finetune_bad_loop(generator, decode: Callable, embedder, images, labels,
                      cfg: TrainConfig, log: Optional[MetricsLog] = None,
                      on_epoch_end: Optional[Callable] = None) -> list[dict]:
    """Core ascent loop shared by the MNIST path and the mixture harness.

    `generator` holds the trainable parameters; `decode(z)` maps latents to
    samples; `embedder` provides forward()/(embed()) like the classifier.
    Only the generator's parameters receive gradients.  Returns per-step
    history rows.
    """
    bad = cfg.bad or BadConfig()
    opt = Adam(list(generator.named_parameters()), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 13)
    latent_dim = generator.latent_dim if hasattr(generator, "latent_dim") \
        else 16
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        batch_iter = _draw_bad_batches(images, labels, cfg.batch_size,
                                       cfg.batches_per_epoch,
                                       _epoch_seed(cfg.seed, epoch),
                                       bad.num_classes)
        with finite_checks(False):
            for xb, by_class in batch_iter:
                z = sample_prior(len(xb), 1.0, rng, latent_dim)
                with Tape() as tape:
                    gen = decode(z)
                    if bad.couple == "mmd":
                        total, l_div, l_reg = bad_loss_mmd(
                            gen, by_class, xb, embedder, bad)
                    else:
                        total, l_div, l_reg = bad_loss_isfid(
                            gen, xb, embedder, bad)
                    loss = ad.neg(total)  # Adam minimizes; objective ascends
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"objective diverged at step {step}", None)
                tape.backward(loss)
                opt.step()
                opt.zero_grad()
                with no_grad():
                    probs = embedder.forward(gen.detach())[1].numpy()
                max_prob = float(probs.max(axis=1).mean())
                row = {"step": step, "epoch": epoch,
                       "l_div": l_div.item(), "l_reg": l_reg.item(),
                       "total": total.item(), "max_prob_mean": max_prob}
                history.append(row)
                if log is not None:
                    log.append(step, epoch=epoch, l_div=row["l_div"],
                               l_reg=row["l_reg"], total=row["total"],
                               max_prob_mean=max_prob)
                step += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, history)
    return history


def finetune_bad(cfg: TrainConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash_of(cfg)
    train = D.load_mnist_idx(Path(cfg.data_dir) / "train-images-idx3-ubyte",
                             Path(cfg.data_dir) / "train-labels-idx1-ubyte")

    vae = Vae(seed=cfg.seed)
    vck = load_checkpoint(cfg.vae_checkpoint, expected_arch=_vae_arch(vae))
    vae.load_state_dict(vck.tensors)
    clf = MnistClassifier(seed=cfg.seed)
    cck = load_checkpoint(cfg.classifier_checkpoint,
                          expected_arch=_clf_arch(clf))
    clf.load_state_dict(cck.tensors)
    clf.eval()
    # freeze everything but the decoder; batch-norm stays in train mode in
    # the decoder so its statistics follow the drifting generations
    for _, p in vae.encoder_named_parameters():
        p.requires_grad = False
    for p in clf.parameters():
        p.requires_grad = False

    frozen_before = _frozen_checksum(vae, clf)
    log = MetricsLog(out / "metrics.csv",
                     ["epoch", "l_div", "l_reg", "total", "max_prob_mean"],
                     chash)
    arch = _vae_arch(vae)

    class _DecoderOnly:
        latent_dim = 16

        @staticmethod
        def named_parameters():
            return vae.decoder_named_parameters()

    def on_epoch_end(epoch, history):
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
            _save_model(out / f"epoch_{epoch + 1:04d}.ckpt", vae, arch, chash,
                        history[-1]["step"] + 1)
            log.note(f"epoch {epoch}: l_div {history[-1]['l_div']:.5f} "
                     f"l_reg {history[-1]['l_reg']:.5f} "
                     f"max_prob {history[-1]['max_prob_mean']:.4f}")

    history = finetune_bad_loop(_DecoderOnly(), vae.decode, clf,
                                train.images, train.labels, cfg, log,
                                on_epoch_end)
    _save_model(out / "final.ckpt", vae, arch, chash,
                history[-1]["step"] + 1 if history else 0)
    log.close()
    if _frozen_checksum(vae, clf) != frozen_before:
        raise RuntimeError("frozen encoder/classifier parameters changed "
                           "during fine-tuning")
    return {"arch": arch, "config_hash": chash, "history": history,
            "out_dir": str(out)}


def _frozen_checksum(vae: Vae, clf: MnistClassifier) -> str:
    h = hashlib.sha256()
    for name, p in vae.encoder_named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    for name, p in clf.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()

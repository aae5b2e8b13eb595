"""Desk-scale training loop on the synthetic glyph corpus."""
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .backbone import VariantConfig, build_model
from .checkpoint import save_checkpoint
from .ctc import ctc_loss_batch, greedy_decode
from .optim import AdamW, OptimHyper, clip_grad_norm, cosine_lr
from .synth import SynthSpec, make_dataset
from .tensor import NumericError, Tensor, no_grad


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    word_acc: float
    lr: float

    def line(self):
        # repr-free fixed formatting; Python float formatting ignores locale
        return f"{self.epoch},{self.loss:.6f},{self.word_acc:.6f},{self.lr:.6e}"


@dataclass
class TrainOptions:
    batch_size: int = 32
    n_train: int = 5000
    n_eval: int = 500
    shuffle: bool = True
    stop_at_acc: float = None
    max_epochs: int = None
    log_path: str = None
    ckpt_dir: str = None
    verbose: bool = False


def _three_channel(batch):
    return np.repeat(batch, 3, axis=1)


def evaluate(model, images, labels, alphabet, batch_size=64):
    """Fraction of samples whose greedy transcription equals the label exactly."""
    if not labels:
        return 0.0
    was_training = model.training
    model.eval()
    hits = 0
    with no_grad():
        for i in range(0, len(labels), batch_size):
            x = images[i:i + batch_size]
            if x.shape[1] == 1:
                x = _three_channel(x)
            preds = greedy_decode(model.logits(x, check=False).data, alphabet)
            hits += sum(p == t for p, t in zip(preds, labels[i:i + batch_size]))
    model.train(was_training)
    return hits / len(labels)


def accuracy_from_logits(logits, labels, alphabet):
    """Exact-match accuracy of precomputed ``[B, T, N]`` logits."""
    if not labels:
        return 0.0
    preds = greedy_decode(np.asarray(logits), alphabet)
    return sum(p == t for p, t in zip(preds, labels)) / len(labels)


def train(model_cfg: VariantConfig, synth_spec: SynthSpec, hyper: OptimHyper, seed=0,
          options: TrainOptions = None):
    """Train from scratch and return the per-epoch metrics.

    Every source of randomness (weights, dropout, both datasets and the
    shuffling order) derives from ``seed``, so equal seeds give equal logs.
    The metrics log is appended to after every epoch and a checkpoint is
    written each time held-out accuracy improves. ``stop_at_acc`` and
    ``max_epochs`` end the run early without changing the learning-rate
    schedule, which always spans ``hyper.total_epochs``.
    """
    opt = options or TrainOptions()
    if model_cfg.num_classes != synth_spec.alphabet.size:
        raise ValueError(f"model has {model_cfg.num_classes} classes, alphabet needs "
                         f"{synth_spec.alphabet.size}")
    model_seed, train_seed, eval_seed, order_seed = np.random.SeedSequence(seed).generate_state(4)
    model = build_model(model_cfg, seed=int(model_seed))
    model.train()
    params = model.parameters()
    optim = AdamW(params, hyper)
    x_train, y_train = make_dataset(synth_spec, opt.n_train, int(train_seed))
    x_eval, y_eval = make_dataset(synth_spec, opt.n_eval, int(eval_seed))
    targets = [synth_spec.alphabet.encode(t) for t in y_train]
    order_rng = np.random.Generator(np.random.Philox(int(order_seed)))

    steps_per_epoch = math.ceil(opt.n_train / opt.batch_size)
    total = hyper.total_epochs * steps_per_epoch
    warmup = hyper.warmup_epochs * steps_per_epoch
    if opt.log_path:
        os.makedirs(os.path.dirname(os.path.abspath(opt.log_path)), exist_ok=True)
    history, best, step = [], -1.0, 0
    for epoch in range(1, hyper.total_epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(opt.n_train) if opt.shuffle else np.arange(opt.n_train)
        losses, lr = [], 0.0
        for b in range(steps_per_epoch):
            idx = order[b * opt.batch_size:(b + 1) * opt.batch_size]
            x = Tensor(_three_channel(x_train[idx]))
            logits = model.logits(x)
            loss = ctc_loss_batch(logits, [targets[i] for i in idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            model.zero_grad()
            loss.backward()
            clip_grad_norm(params, hyper.clip_norm)
            lr = cosine_lr(step, total, warmup, hyper.lr_base)
            optim.step(lr)
            losses.append(value)
            step += 1
        acc = evaluate(model, x_eval, y_eval, synth_spec.alphabet)
        m = EpochMetrics(epoch, float(np.mean(losses)), acc, lr)
        history.append(m)
        if opt.log_path:
            with open(opt.log_path, "a", encoding="utf-8", newline="\n") as f:
                f.write(m.line() + "\n")
        if opt.verbose:
            print(f"{m.line()} ({time.perf_counter() - t0:.1f}s)", file=sys.stderr, flush=True)
        if acc > best:
            best = acc
            if opt.ckpt_dir:
                save_checkpoint(model, opt.ckpt_dir, synth_spec.alphabet,
                                extra={"epoch": epoch, "word_acc": acc})
        if opt.stop_at_acc is not None and acc >= opt.stop_at_acc:
            break
        if opt.max_epochs is not None and epoch >= opt.max_epochs:
            break
    return history, model

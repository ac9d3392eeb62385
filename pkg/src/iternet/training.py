"""Patch-sampling training loop: sample, augment, crop, forward,
multi-output loss, backward, Adam."""

from __future__ import annotations

import csv
import os

import numpy as np

from . import engine as eng
from .data import AugmentConfig, augment, load_sample, sample_training_patch
from .model import (build_iternet, iternet_forward, iternet_loss,
                    per_output_losses, validate_patch_size)
from .optim import OptimizerConfig, adam_step, save_checkpoint
from .synth import read_manifest


def augment_config_from(train_sec):
    return AugmentConfig(flip_prob=train_sec.flip_prob,
                         rotation_degrees=train_sec.rotation_degrees,
                         brightness_range=train_sec.brightness_range,
                         gamma_range=train_sec.gamma_range,
                         color_shift=train_sec.color_shift,
                         affine=train_sec.affine)


def load_split(corpus_dir, split):
    entries = [e for e in read_manifest(corpus_dir) if e[0] == split]
    if not entries:
        raise ValueError(f"corpus {corpus_dir} has no {split!r} images")
    return [load_sample(*e[1:]) for e in entries]


def make_batch(samples, aug_cfg, patch_size, batch_size, rng):
    imgs, golds = [], []
    for _ in range(batch_size):
        s = samples[int(rng.integers(0, len(samples)))]
        s = augment(s, aug_cfg, rng)
        p = sample_training_patch(s, patch_size, rng)
        imgs.append(p.image[0])
        golds.append(p.gold[0])
    return np.stack(imgs), np.stack(golds)


def train_step(store, cfg, opt, image_batch, gold_batch, weights=None):
    """One forward/backward/Adam update; returns (total, per-output) losses."""
    tape = eng.Tape()
    result = iternet_forward(store, image_batch, cfg, tape=tape)
    loss = iternet_loss(result, gold_batch, weights)
    parts = per_output_losses(result, gold_batch)
    eng.backward(tape, loss)
    adam_step(store, opt)
    return float(loss.value), parts


def train(run_cfg, corpus_dir, out_dir, log_every=0):
    """Train per the run config; writes checkpoint.itnt and loss_log.csv
    under out_dir and returns their paths plus the final store."""
    tr = run_cfg.train
    cfg = run_cfg.model_config()
    validate_patch_size(cfg, tr.patch_size)
    samples = load_split(corpus_dir, "train")
    for s in samples:
        if s.image.shape[1] != cfg.base.in_channels:
            raise ValueError(
                f"corpus images have {s.image.shape[1]} channels, model "
                f"expects {cfg.base.in_channels}")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.itnt")
    log_path = os.path.join(out_dir, "loss_log.csv")

    store = build_iternet(cfg, seed=tr.seed)
    opt = OptimizerConfig(learning_rate=tr.learning_rate)
    aug_cfg = augment_config_from(tr)
    rng = np.random.default_rng(tr.seed)
    rows = []
    for step in range(1, tr.steps + 1):
        xb, yb = make_batch(samples, aug_cfg, tr.patch_size, tr.batch_size, rng)
        total, parts = train_step(store, cfg, opt, xb, yb)
        rows.append([step, total] + parts)
        if log_every and step % log_every == 0:
            print(f"step {step}/{tr.steps}  loss {total:.4f}")
        if tr.checkpoint_interval and step % tr.checkpoint_interval == 0:
            save_checkpoint(store, ckpt_path)
    save_checkpoint(store, ckpt_path)

    with open(log_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "total_loss"]
                    + [f"loss_out_{i + 1}" for i in range(cfg.iterations)])
        for row in rows:
            wr.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])
    return {"checkpoint": ckpt_path, "log": log_path, "store": store,
            "rows": rows}

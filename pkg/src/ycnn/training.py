"""Two-stage training: still-image pairs first, then sequence pairs."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import (AugConfig, admissible_pairs, sample_image_pair, sample_negative_pair, sample_sequence_pair,
                   stack_pairs)
from .loss import LossConfig, batch_loss
from .model import backward, forward, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    lr: float = 1e-4
    batch_size: int = 256
    steps: int = 0
    sampler: str = "image"
    loss: LossConfig = field(default_factory=LossConfig)
    loss_kind: str = "masked"
    aug: AugConfig = field(default_factory=AugConfig)
    checkpoint_every: int = 0
    seed: int = 0
    clip_norm: float | None = None
    # share of still-image pairs whose search window misses the object (all-zero label)
    negative_frac: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.sampler not in ("image", "sequence"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.loss_kind not in ("masked", "naive"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if not 0 <= self.negative_frac < 1:
            raise ValueError("negative_frac must lie in [0, 1)")

    @classmethod
    def stage1(cls, **kw):
        """Full-scale still-image stage: lr 1e-4, batch 256."""
        return cls(**{"lr": 1e-4, "batch_size": 256, "sampler": "image", **kw})

    @classmethod
    def stage2(cls, **kw):
        """Full-scale fine-tuning stage: lr 1e-5, batch 128, translation only."""
        return cls(**{"lr": 1e-5, "batch_size": 128, "sampler": "sequence",
                      "aug": AugConfig.translation_only(), **kw})

    @classmethod
    def desk_stage1(cls, **kw):
        return cls.stage1(**{"steps": 5000, "batch_size": 32, **kw})

    @classmethod
    def desk_stage2(cls, **kw):
        return cls.stage2(**{"steps": 2000, "batch_size": 16, **kw})


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def write_jsonl(self, path, timing=False):
        """One JSON record per step; wall-clock fields only with ``timing`` so reruns compare byte for byte."""
        with open(path, "w") as fh:
            for r in self.records:
                if not timing:
                    r = {k: v for k, v in r.items() if k != "seconds"}
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def step_rng(seed, step):
    """Per-step generator; batches depend only on (seed, step) so runs can resume anywhere."""
    return np.random.default_rng([seed, step])


def make_batch(cfg, corpus, arch, step, pair_index=None):
    rng = step_rng(cfg.seed, step)
    pairs = []
    for _ in range(cfg.batch_size):
        if cfg.sampler == "image":
            k = int(rng.integers(len(corpus)))
            image, box = corpus[k]
            if cfg.negative_frac and rng.random() < cfg.negative_frac:
                pairs.append(sample_negative_pair(image, box, arch, rng, cfg.aug, source=k))
            else:
                pairs.append(sample_image_pair(image, box, arch, rng, cfg.aug, cfg.loss.sigma_frac, source=k))
        else:
            k = int(rng.choice(len(corpus), p=pair_index["weights"]))
            pairs.append(sample_sequence_pair(corpus[k], arch, rng, cfg.loss.sigma_frac, cfg.aug,
                                              pairs=pair_index["pairs"][k]))
    return pairs


def train_step(model, state, pairs, cfg):
    """One Adam update on the mean loss over ``pairs``; returns ``(model, state, stats)``."""
    if not pairs:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    obj, search, labels = stack_pairs(pairs)
    maps, cache = forward(model, obj, search, keep_intermediates=True)
    loss, per_pair, grad = batch_loss(maps, labels, cfg.loss, cfg.loss_kind)
    if not np.all(np.isfinite(per_pair)):
        bad = [pairs[i].provenance for i in np.flatnonzero(~np.isfinite(per_pair))]
        raise TrainingError(f"non-finite loss; offending pairs: {bad}")
    if cfg.loss_kind == "masked":
        masked = loss
    else:
        masked = batch_loss(maps, labels, cfg.loss, "masked")[0]
    grads = backward(model, cache, grad)
    if cfg.clip_norm:
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        if norm > cfg.clip_norm:
            grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
    try:
        params, state = nn.adam_step(model.params, grads, state, cfg.lr)
    except nn.NonFiniteError as exc:
        raise TrainingError(f"{exc}; batch sources: {[p.provenance for p in pairs]}") from exc
    model = type(model)(model.config, params)
    pos = np.array([i for i, p in enumerate(pairs) if p.peak is not None], dtype=int)
    neg = np.array([i for i, p in enumerate(pairs) if p.peak is None], dtype=int)
    stats = {"loss": loss, "masked_loss": masked}
    if len(pos):
        peaks = np.array([pairs[i].peak for i in pos])
        peak_pred = maps[pos, peaks[:, 0], peaks[:, 1]]
        hit_r, hit_c = np.unravel_index(maps[pos].reshape(len(pos), -1).argmax(axis=1), maps.shape[1:])
        stats.update(peak_pred=float(peak_pred.mean()), peak_err=float(np.abs(1.0 - peak_pred).mean()),
                     argmax_dist=float(np.hypot(hit_r - peaks[:, 0], hit_c - peaks[:, 1]).mean()))
    if len(neg):
        stats["negative_max"] = float(maps[neg].max(axis=(1, 2)).mean())
    stats["seconds"] = time.perf_counter() - t0
    return model, state, stats


def save_adam(state, path):
    arrays = {f"m:{k}": v for k, v in state.m.items()}
    arrays.update({f"v:{k}": v for k, v in state.v.items()})
    np.savez(path, t=np.array(state.t), hyper=np.array([state.beta1, state.beta2, state.eps]), **arrays)


def load_adam(path):
    with np.load(path) as z:
        m = {k[2:]: z[k] for k in z.files if k.startswith("m:")}
        v = {k[2:]: z[k] for k in z.files if k.startswith("v:")}
        b1, b2, eps = (float(x) for x in z["hyper"])
        return nn.AdamState(m, v, int(z["t"]), b1, b2, eps)


def _pair_index(corpus):
    pairs = [admissible_pairs(seq) for seq in corpus]
    counts = np.array([len(p) for p in pairs], dtype=np.float64)
    if counts.sum() == 0:
        raise ValueError("no sequence in the corpus has an admissible frame pair")
    return {"pairs": pairs, "weights": counts / counts.sum()}


def run_stage(model, cfg, corpus, state=None, start_step=0, checkpoint_dir=None, prefix="stage",
              threads=1, on_step=None):
    """Run steps ``start_step .. cfg.steps - 1``; returns ``(model, state, report)``.

    ``corpus`` is a list of ``(image, box)`` stills for the image sampler or a
    list of sequences for the sequence sampler. With ``threads > 1`` the next
    batch is prepared while the current step runs; batches are a function of
    ``(seed, step)`` only, so the result is the same either way.
    """
    if cfg.steps > start_step and not corpus:
        raise ValueError("empty training corpus")
    arch = model.config
    state = state if state is not None else nn.AdamState()
    if model.dtype != nn.get_dtype():
        model = type(model)(arch, {k: v.astype(nn.get_dtype()) for k, v in model.params.items()})
    report = TrainReport()
    index = _pair_index(corpus) if cfg.sampler == "sequence" and cfg.steps > start_step else None
    pool = ThreadPoolExecutor(1) if threads > 1 else None
    try:
        pending = None
        for step in range(start_step, cfg.steps):
            if pool is not None:
                batch = (pending or pool.submit(make_batch, cfg, corpus, arch, step, index)).result()
                if step + 1 < cfg.steps:
                    pending = pool.submit(make_batch, cfg, corpus, arch, step + 1, index)
            else:
                batch = make_batch(cfg, corpus, arch, step, index)
            model, state, stats = train_step(model, state, batch, cfg)
            stats["step"] = step
            report.records.append(stats)
            if on_step is not None:
                on_step(stats)
            if step % 100 == 0 or step == cfg.steps - 1:
                log.info("%s step %d loss %.5f peak %.3f", prefix, step, stats["loss"], stats.get("peak_pred", np.nan))
            if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                path = os.path.join(checkpoint_dir, f"{prefix}-{step + 1:06d}.ycnn")
                save_checkpoint(model, path)
                save_adam(state, path + ".adam.npz")
                report.checkpoints.append(path)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return model, state, report


def resume(path):
    """Model and optimizer state from a mid-stage checkpoint written by :func:`run_stage`."""
    return load_checkpoint(path), load_adam(path + ".adam.npz")

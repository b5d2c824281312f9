"""Training loop: clip sampling around the response track, clip-consistent
augmentation, Adam with decoupled weight decay, linear warmup / linear decay
schedule, JSON-lines logging and checkpointing.

Single-threaded and fully deterministic given (seed, config): every random
draw comes from generators spawned off one seed sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import assign_labels
from .config import ExperimentConfig, TrainConfig
from .data import VideoSample
from .errors import ConfigurationError
from .losses import total_loss
from .model import QueryLocalizer
from .nn import save_checkpoint
from .nn.modules import Parameter


# ---------------------------------------------------------------------------
# clip sampling
# ---------------------------------------------------------------------------

@dataclass
class TrainingClip:
    frames: np.ndarray    # (T, S, S, 3) float32
    query: np.ndarray     # (S, S, 3) float32
    gt: np.ndarray        # (T, 4) cxcywh, pixels; rows without gt are zeros
    has_gt: np.ndarray    # (T,) bool


def sample_training_clip(sample: VideoSample, clip_len: int, rng) -> TrainingClip:
    """Uniformly choose a clip start so [start, start + T) intersects the
    response track; frames outside the track carry no box. Videos shorter
    than a clip are left-padded by replicating their first frame."""
    frames = sample.frames
    length = frames.shape[0]
    track = sample.track
    if length < clip_len:
        pad = clip_len - length
        frames = np.concatenate([np.repeat(frames[:1], pad, axis=0), frames])
        offsets = np.concatenate([np.zeros(pad, dtype=int),
                                  np.arange(length)])
        start = 0
    else:
        lo = max(0, track.s - clip_len + 1)
        hi = min(length - clip_len, track.e)
        start = int(rng.integers(lo, hi + 1))
        frames = frames[start:start + clip_len]
        offsets = np.arange(start, start + clip_len)
    gt = np.zeros((clip_len, 4))
    has_gt = np.zeros(clip_len, dtype=bool)
    for i, f in enumerate(offsets):
        box = track.box_at(int(f))
        if box is not None:
            gt[i] = box.as_array()
            has_gt[i] = True
    return TrainingClip(frames=frames.copy(), query=sample.query.copy(),
                        gt=gt, has_gt=has_gt)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def resize_bilinear(images: np.ndarray, out_side: int) -> np.ndarray:
    """(T, H, W, C) -> (T, out_side, out_side, C); half-pixel-centered
    sampling with edge clamping."""
    t, h, w, c = images.shape
    out = np.empty((t, out_side, out_side, c), dtype=images.dtype)

    def axis_coords(src):
        pos = (np.arange(out_side) + 0.5) * (src / out_side) - 0.5
        lo = np.clip(np.floor(pos).astype(int), 0, src - 1)
        hi = np.clip(lo + 1, 0, src - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        return lo, hi, frac.astype(images.dtype)

    y0, y1, fy = axis_coords(h)
    x0, x1, fx = axis_coords(w)
    top = (images[:, y0][:, :, x0] * (1 - fx[None, None, :, None])
           + images[:, y0][:, :, x1] * fx[None, None, :, None])
    bot = (images[:, y1][:, :, x0] * (1 - fx[None, None, :, None])
           + images[:, y1][:, :, x1] * fx[None, None, :, None])
    out[...] = top * (1 - fy[None, :, None, None]) + bot * fy[None, :, None, None]
    return out


def _jitter(images: np.ndarray, rng, strength: float) -> np.ndarray:
    brightness = 1.0 + rng.uniform(-strength, strength)
    contrast = 1.0 + rng.uniform(-strength, strength)
    return np.clip(((images - 0.5) * contrast + 0.5) * brightness, 0.0, 1.0)


def flip_boxes(gt: np.ndarray, side: float) -> np.ndarray:
    out = gt.copy()
    out[:, 0] = side - gt[:, 0]
    return out


def augment(clip: TrainingClip, rng, cfg: TrainConfig, side: int) -> TrainingClip:
    """Clip-consistent augmentation: one jitter/flip/crop decision for all
    frames of the clip; the query image draws its own jitter and flip (it
    originates outside the clip). The crop rescales boxes and turns frames
    whose box falls fully outside the crop into no-object frames."""
    frames, gt, has_gt = clip.frames, clip.gt.copy(), clip.has_gt.copy()
    if cfg.jitter_strength > 0:
        frames = _jitter(frames, rng, cfg.jitter_strength)
    if rng.uniform() < cfg.flip_prob:
        frames = frames[:, :, ::-1, :]
        gt = flip_boxes(gt, side)
    query = clip.query
    if cfg.jitter_strength > 0:
        query = _jitter(query, rng, cfg.jitter_strength)
    if rng.uniform() < cfg.flip_prob:
        query = query[:, ::-1, :]
    if cfg.crop_min_scale < 1.0:
        crop = int(round(side * rng.uniform(cfg.crop_min_scale, 1.0)))
        crop = max(8, min(side, crop))
        x0 = int(rng.integers(0, side - crop + 1))
        y0 = int(rng.integers(0, side - crop + 1))
        frames = resize_bilinear(
            np.ascontiguousarray(frames[:, y0:y0 + crop, x0:x0 + crop, :]), side)
        scale = side / crop
        for i in range(gt.shape[0]):
            if not has_gt[i]:
                continue
            cx, cy, w, h = gt[i]
            x1 = max(cx - w / 2, x0)
            y1 = max(cy - h / 2, y0)
            x2 = min(cx + w / 2, x0 + crop)
            y2 = min(cy + h / 2, y0 + crop)
            if x2 <= x1 or y2 <= y1:
                has_gt[i] = False
                gt[i] = 0.0
            else:
                gt[i] = [((x1 + x2) / 2 - x0) * scale, ((y1 + y2) / 2 - y0) * scale,
                         (x2 - x1) * scale, (y2 - y1) * scale]
    return TrainingClip(frames=np.ascontiguousarray(frames, dtype=np.float32),
                        query=np.ascontiguousarray(query, dtype=np.float32),
                        gt=gt, has_gt=has_gt)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Adam moments with bias correction plus decoupled weight decay
    (param -= lr * wd * param, applied separately from the adaptive step).
    A step with any non-finite gradient is skipped entirely and counted."""

    def __init__(self, named_params: list[tuple[str, Parameter]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = named_params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p.value) for name, p in named_params}
        self.v = {name: np.zeros_like(p.value) for name, p in named_params}
        self.t = 0
        self.skipped = 0

    def step(self, lr: float) -> bool:
        for _, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                self.skipped += 1
                return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= lr * update
            if self.weight_decay > 0:
                p.value -= lr * self.weight_decay * p.value
        return True


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over warmup_iters, then linear decay
    peak -> 0 at the final iteration."""
    if iteration < cfg.warmup_iters:
        return cfg.peak_lr * iteration / cfg.warmup_iters
    if iteration >= cfg.iterations:
        return 0.0
    span = cfg.iterations - cfg.warmup_iters
    return cfg.peak_lr * (1.0 - (iteration - cfg.warmup_iters) / span)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(cfg: ExperimentConfig, samples: list[VideoSample],
          out_dir=None, progress=None):
    """Run the full loop; returns (model, log records).

    With ``out_dir`` set, writes config.json (echo), train_log.jsonl, and
    checkpoints (ckpt_final plus periodic ckpt_<iter>).
    """
    cfg.validate()
    if not samples:
        raise ConfigurationError("empty training set")
    side = cfg.model.input_side
    if samples[0].frames.shape[1] != side:
        raise ConfigurationError(
            f"dataset canvas {samples[0].frames.shape[1]} != model input "
            f"side {side}")
    root = np.random.SeedSequence(cfg.train.seed)
    ss_model, ss_sample, ss_augment = root.spawn(3)
    model = QueryLocalizer(cfg.model, np.random.default_rng(ss_model))
    opt = AdamW(list(model.named_parameters()), beta1=cfg.train.adam_beta1,
                beta2=cfg.train.adam_beta2, eps=cfg.train.adam_eps,
                weight_decay=cfg.train.weight_decay)
    rng_sample = np.random.default_rng(ss_sample)
    rng_augment = np.random.default_rng(ss_augment)

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        log_fh = open(out / "train_log.jsonl", "w")
    records = []
    dtype = np.float32

    try:
        for it in range(cfg.train.iterations):
            if len(samples) >= cfg.train.batch_size:
                batch_idx = rng_sample.permutation(len(samples))[:cfg.train.batch_size]
            else:
                batch_idx = rng_sample.integers(0, len(samples),
                                                size=cfg.train.batch_size)
            clips = []
            for v in batch_idx:
                clip = sample_training_clip(samples[v], cfg.model.clip_len,
                                            rng_sample)
                if cfg.train.augment:
                    clip = augment(clip, rng_augment, cfg.train, side)
                clips.append(clip)
            batch_frames = np.stack([c.frames for c in clips])
            batch_queries = np.stack([c.query for c in clips])
            probs, deltas, cache = model.forward_batch(batch_frames, batch_queries)
            labels_list = [[assign_labels(model.grid,
                                          c.gt[t] if c.has_gt[t] else None,
                                          cfg.loss.iou_threshold)
                            for t in range(cfg.model.clip_len)] for c in clips]
            report, grads = total_loss(list(probs), list(deltas), labels_list,
                                       model.grid, image_side=side, cfg=cfg.loss)
            model.zero_grad()
            model.backward(np.stack([g[0] for g in grads]).astype(dtype),
                           np.stack([g[1] for g in grads]).astype(dtype), cache)
            lr = lr_at(it, cfg.train)
            opt.step(lr)

            if it % cfg.train.log_every == 0 or it == cfg.train.iterations - 1:
                rec = {"iter": it, "lr": lr, "total": report.total,
                       "l_bbox": report.l_bbox, "l_prob": report.l_prob,
                       "n_pos": report.n_pos, "n_neg": report.n_neg_sampled,
                       "skipped": opt.skipped}
                records.append(rec)
                if out is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if progress is not None:
                    progress(rec)
            if out is not None and cfg.train.checkpoint_every > 0 \
                    and (it + 1) % cfg.train.checkpoint_every == 0 \
                    and (it + 1) < cfg.train.iterations:
                save_checkpoint(out / f"ckpt_{it + 1:06d}", model.state_dict(),
                                extra={"config": cfg.to_dict(),
                                       "iterations": it + 1})
    finally:
        if out is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(out / "ckpt_final", model.state_dict(),
                        extra={"config": cfg.to_dict(),
                               "iterations": cfg.train.iterations})
    return model, records

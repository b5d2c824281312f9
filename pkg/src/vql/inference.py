"""Turn per-frame anchor outputs into the final response track.

Post-processing chain over a whole video: per-frame top-1 anchor selection,
optional absolute confidence pre-filter, median smoothing of the score
sequence, relative peak filtering (keep peaks >= 0.8 * highest peak), then
extraction of the temporally last kept peak's contiguous extent at
0.7 * peak score. All thresholds are relative, so scaling every score by a
positive constant leaves the extracted track unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorGrid, apply_refinement
from .config import InferenceConfig
from .errors import ShapeError
from .geometry import Box
from .model import FramePredictionRaw, QueryLocalizer


@dataclass
class FramePrediction:
    """Top-1 prediction for one frame: the refined anchor box with the
    highest occurrence probability."""

    frame_idx: int
    box: Box
    prob: float


@dataclass
class ResponseTrack:
    """Contiguous frame range [s, e] with one box per frame; ``score`` is the
    selected peak's smoothed score (None on ground-truth tracks)."""

    s: int
    e: int
    boxes: list[Box] = field(repr=False)
    score: float | None = None

    def __post_init__(self):
        if self.s > self.e:
            raise ShapeError(f"track start {self.s} after end {self.e}")
        if len(self.boxes) != self.e - self.s + 1:
            raise ShapeError(f"track [{self.s}, {self.e}] needs "
                             f"{self.e - self.s + 1} boxes, got {len(self.boxes)}")

    @property
    def n_frames(self) -> int:
        return self.e - self.s + 1

    def box_at(self, frame_idx: int) -> Box | None:
        if self.s <= frame_idx <= self.e:
            return self.boxes[frame_idx - self.s]
        return None


def select_top1(raw: FramePredictionRaw, grid: AnchorGrid,
                frame_idx: int) -> FramePrediction:
    """Argmax over anchor probabilities; ties go to the lowest anchor index."""
    k = int(np.argmax(raw.probs))
    refined = apply_refinement(grid, raw.deltas)
    return FramePrediction(frame_idx=frame_idx, box=Box(*refined[k]),
                           prob=float(raw.probs[k]))


def smooth_scores(scores, window: int = 5) -> np.ndarray:
    """Centered median filter; the window shrinks at the edges instead of
    inventing padding values."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ShapeError("cannot smooth an empty score sequence")
    half = window // 2
    n = scores.size
    return np.array([np.median(scores[max(0, i - half):min(n, i + half + 1)])
                     for i in range(n)])


def detect_peaks(smoothed, peak_ratio: float = 0.8):
    """Local maxima of the smoothed scores plus the confidence-filtered set.

    A peak is a maximal run of equal values strictly above both neighbors
    (sequence boundaries count as below); a plateau reports its first index.
    With s the highest peak value, peaks below peak_ratio * s are dropped.

    Returns (all peak indices, kept peak indices), both ascending.
    """
    x = np.asarray(smoothed, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("cannot detect peaks in an empty sequence")
    peaks = []
    i = 0
    n = x.size
    while i < n:
        j = i
        while j + 1 < n and x[j + 1] == x[i]:
            j += 1
        rising = i == 0 or x[i - 1] < x[i]
        falling = j == n - 1 or x[j + 1] < x[i]
        if rising and falling:
            peaks.append(i)
        i = j + 1
    top = max(x[p] for p in peaks)
    kept = [p for p in peaks if x[p] >= peak_ratio * top]
    return peaks, kept


def extract_last_track(frame_preds: list[FramePrediction], smoothed,
                       kept_peaks, extent_ratio: float = 0.7) -> ResponseTrack | None:
    """Expand the temporally last kept peak while the smoothed score stays
    >= extent_ratio * peak score; emit the per-frame top-1 boxes over that
    range. No kept peaks -> None (query not found)."""
    if not kept_peaks:
        return None
    x = np.asarray(smoothed, dtype=np.float64)
    t_peak = kept_peaks[-1]
    s_p = x[t_peak]
    thr = extent_ratio * s_p
    s = t_peak
    while s > 0 and x[s - 1] >= thr:
        s -= 1
    e = t_peak
    while e + 1 < x.size and x[e + 1] >= thr:
        e += 1
    return ResponseTrack(s=s, e=e,
                         boxes=[frame_preds[i].box for i in range(s, e + 1)],
                         score=float(s_p))


def chunk_spans(n_frames: int, clip_len: int):
    """Split [0, n_frames) into clip-length spans; the tail span reports how
    many padded frames it needs."""
    spans = []
    for start in range(0, n_frames, clip_len):
        end = min(start + clip_len, n_frames)
        spans.append((start, end, clip_len - (end - start)))
    return spans


def pad_clip_right(frames: np.ndarray, clip_len: int) -> np.ndarray:
    """Right-pad a short clip by replicating its final frame."""
    pad = clip_len - frames.shape[0]
    if pad <= 0:
        return frames
    return np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)], axis=0)


def predict_frames(video: np.ndarray, query: np.ndarray,
                   model: QueryLocalizer) -> list[FramePrediction]:
    """Forward every clip of the video (batched into one model call) and
    concatenate the per-frame top-1 stream; padded frames are excluded."""
    if video.shape[0] == 0:
        raise ShapeError("empty video")
    clip_len = model.cfg.clip_len
    spans = chunk_spans(video.shape[0], clip_len)
    clips = np.stack([pad_clip_right(video[s:e], clip_len) for s, e, _ in spans])
    queries = np.broadcast_to(query, (len(spans),) + query.shape)
    probs, deltas, _ = model.forward_batch(clips, np.ascontiguousarray(queries))
    preds: list[FramePrediction] = []
    for i, (start, end, _) in enumerate(spans):
        for t in range(end - start):
            raw = FramePredictionRaw(probs=probs[i, t], deltas=deltas[i, t])
            preds.append(select_top1(raw, model.grid, start + t))
    return preds


def run_video(video: np.ndarray, query: np.ndarray, model: QueryLocalizer,
              cfg: InferenceConfig) -> tuple[ResponseTrack | None, list[FramePrediction]]:
    """Full inference for one (video, query) pair.

    Returns (track or None, per-frame top-1 predictions). A peak score of
    zero (possible only when the phi pre-filter rejected everything) counts
    as not found.
    """
    preds = predict_frames(video, query, model)
    scores = np.array([p.prob for p in preds], dtype=np.float64)
    if cfg.phi > 0:
        scores = np.where(scores >= cfg.phi, scores, 0.0)
    smoothed = smooth_scores(scores, cfg.median_window)
    _, kept = detect_peaks(smoothed, cfg.peak_ratio)
    kept = [p for p in kept if smoothed[p] > 0]
    track = extract_last_track(preds, smoothed, kept, cfg.extent_ratio)
    return track, preds

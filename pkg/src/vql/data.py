"""Synthetic videos with exact ground truth, plus annotation / prediction /
feature file IO.

A scene is a set of moving shapes on a dark canvas; one of them is the query
object. Shapes are rendered by testing pixel centers against the analytic
shape region, so the ground-truth box (the bounding box of the rendered
object mask) is exact by construction. The query image shows the object
alone, centered, at a different scale than it appears in the video.
Occluders draw over the object and affect appearance only, never the
ground-truth box; frames where the object is scheduled invisible or fully
off-canvas carry no box, and the response track is the last contiguous run
of frames that do.

Raw frames are stored as a flat uint8 binary plus a JSON manifest; no codec
is involved. Annotations and predictions are JSON with boxes in corner form
[x1, y1, x2, y2].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigurationError, SchemaError
from .geometry import Box
from .inference import ResponseTrack

BACKGROUND = 0.08


# ---------------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------------

@dataclass
class SceneObject:
    kind: str                  # "rect" | "disc"
    color: np.ndarray          # (3,) in [0, 1]
    width: float
    height: float
    waypoints: np.ndarray      # (K, 2) pixel centers, piecewise-linear motion
    visible: np.ndarray        # (n_frames,) bool schedule

    def center_at(self, t: int, n_frames: int) -> np.ndarray:
        k = len(self.waypoints)
        if k == 1 or n_frames == 1:
            return np.asarray(self.waypoints[0], dtype=np.float64)
        pos = t / (n_frames - 1) * (k - 1)
        i = min(int(pos), k - 2)
        frac = pos - i
        return (1 - frac) * self.waypoints[i] + frac * self.waypoints[i + 1]


@dataclass
class SyntheticScene:
    canvas_side: int
    n_frames: int
    fps: int
    objects: list[SceneObject]   # draw order; the query object draws last
    query_index: int
    occluders: list[SceneObject] = field(default_factory=list)
    blur: bool = False


def shape_mask(kind: str, cx: float, cy: float, w: float, h: float,
               side: int) -> np.ndarray:
    """Boolean (side, side) mask of pixels whose centers fall inside the
    shape; pixel (row r, col c) has center (c + 0.5, r + 0.5)."""
    xs = np.arange(side) + 0.5
    ys = np.arange(side) + 0.5
    if kind == "rect":
        mx = np.abs(xs - cx) <= w / 2
        my = np.abs(ys - cy) <= h / 2
        return my[:, None] & mx[None, :]
    if kind == "disc":
        r = w / 2
        return ((ys - cy) ** 2)[:, None] + ((xs - cx) ** 2)[None, :] <= r * r
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def mask_bbox(mask: np.ndarray) -> Box | None:
    """Tight pixel bounding box of a mask in corner convention (pixel (r, c)
    spans [c, c+1] x [r, r+1]); None for an empty mask."""
    rows = np.nonzero(mask.any(axis=1))[0]
    if rows.size == 0:
        return None
    cols = np.nonzero(mask.any(axis=0))[0]
    return Box.from_corners(float(cols[0]), float(rows[0]),
                            float(cols[-1] + 1), float(rows[-1] + 1))


def _box_blur(frame: np.ndarray) -> np.ndarray:
    pad = np.pad(frame, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(frame)
    for di in range(3):
        for dj in range(3):
            out += pad[di:di + frame.shape[0], dj:dj + frame.shape[1]]
    return out / 9.0


def render_scene(scene: SyntheticScene):
    """Render all frames; returns (frames float32 (L, S, S, 3), per-frame
    ground-truth Box or None for the query object)."""
    side = scene.canvas_side
    frames = np.empty((scene.n_frames, side, side, 3), dtype=np.float32)
    gt_boxes: list[Box | None] = []
    for t in range(scene.n_frames):
        frame = np.full((side, side, 3), BACKGROUND, dtype=np.float32)
        query_box = None
        for i, obj in enumerate(scene.objects):
            if not obj.visible[t]:
                continue
            cx, cy = obj.center_at(t, scene.n_frames)
            mask = shape_mask(obj.kind, cx, cy, obj.width, obj.height, side)
            frame[mask] = obj.color.astype(np.float32)
            if i == scene.query_index:
                query_box = mask_bbox(mask)
        for occ in scene.occluders:
            if not occ.visible[t]:
                continue
            cx, cy = occ.center_at(t, scene.n_frames)
            mask = shape_mask(occ.kind, cx, cy, occ.width, occ.height, side)
            frame[mask] = occ.color.astype(np.float32)
        if scene.blur:
            frame = _box_blur(frame)
        frames[t] = frame
        gt_boxes.append(query_box)
    return frames, gt_boxes


def last_contiguous_track(gt_boxes: list[Box | None]) -> ResponseTrack:
    """The response track is the last contiguous run of frames with a box."""
    present = [i for i, b in enumerate(gt_boxes) if b is not None]
    if not present:
        raise ConfigurationError("query object never visible; scene rejected")
    e = present[-1]
    s = e
    while s > 0 and gt_boxes[s - 1] is not None:
        s -= 1
    return ResponseTrack(s=s, e=e, boxes=[gt_boxes[i] for i in range(s, e + 1)])


def render_query_image(scene: SyntheticScene, scale: float):
    """The query object alone, centered, rescaled; returns (image float32,
    analytic source box)."""
    side = scene.canvas_side
    obj = scene.objects[scene.query_index]
    image = np.full((side, side, 3), BACKGROUND, dtype=np.float32)
    w, h = obj.width * scale, obj.height * scale
    cx = cy = side / 2
    mask = shape_mask(obj.kind, cx, cy, w, h, side)
    image[mask] = obj.color.astype(np.float32)
    box = mask_bbox(mask)
    if box is None:
        raise ConfigurationError("query object renders empty in the query image")
    return image, box


# ---------------------------------------------------------------------------
# random scene generation
# ---------------------------------------------------------------------------

@dataclass
class DataGenConfig:
    canvas_side: int = 64
    n_frames: int = 48
    fps: int = 5
    query_size_range: tuple[float, float] = (11.0, 18.0)
    n_distractors: int = 2
    distractor_similarity: float = 0.5   # 1.0 = same color as the query
    match_query_shape: bool = False      # distractors share the query's kind
    n_occluders: int = 1
    occlusion: bool = True
    blur: bool = False
    visibility_intervals: int = 1        # 1 or 2; the last one is the track
    track_len_range: tuple[int, int] = (10, 20)
    early_len_range: tuple[int, int] = (6, 10)
    tail_range: tuple[int, int] | None = None  # frames after the track end;
                                               # None -> (0, max(2, n/8))
    query_scale: float = 1.4
    n_waypoints: int = 4

    def validate(self) -> None:
        if self.track_len_range[0] < 1:
            raise ConfigurationError("track length must be >= 1 frame "
                                     "(zero-visibility config rejected)")
        tail_hi = self.tail_range[1] if self.tail_range else max(2, self.n_frames // 8)
        if self.track_len_range[1] + tail_hi + 2 > self.n_frames:
            raise ConfigurationError("n_frames too small for track_len_range "
                                     "plus tail_range")
        if self.visibility_intervals not in (1, 2):
            raise ConfigurationError("visibility_intervals must be 1 or 2")
        if not 0.0 <= self.distractor_similarity <= 1.0:
            raise ConfigurationError("distractor_similarity must be in [0, 1]")
        if self.query_scale == 1.0:
            raise ConfigurationError("query_scale must differ from 1 (the query "
                                     "image must not match the in-video scale)")


def _random_waypoints(rng, cfg: DataGenConfig, margin: float) -> np.ndarray:
    lo, hi = margin, cfg.canvas_side - margin
    if lo >= hi:
        lo, hi = cfg.canvas_side * 0.4, cfg.canvas_side * 0.6
    return rng.uniform(lo, hi, size=(cfg.n_waypoints, 2))


def _bright_color(rng) -> np.ndarray:
    color = rng.uniform(0.35, 1.0, size=3)
    color[rng.integers(0, 3)] = rng.uniform(0.75, 1.0)
    return color


def _similar_color(rng, base: np.ndarray, similarity: float) -> np.ndarray:
    noise = rng.normal(0.0, 0.35, size=3) * (1.0 - similarity)
    return np.clip(base + noise, 0.25, 1.0)


def generate_scene(rng, cfg: DataGenConfig) -> SyntheticScene:
    cfg.validate()
    n = cfg.n_frames
    kind = "rect" if rng.uniform() < 0.5 else "disc"
    qw = rng.uniform(*cfg.query_size_range)
    qh = qw if kind == "disc" else qw * rng.uniform(0.7, 1.4)
    query_color = _bright_color(rng)

    # visibility: the last interval is the response track
    track_len = int(rng.integers(cfg.track_len_range[0], cfg.track_len_range[1] + 1))
    tail_lo, tail_hi = cfg.tail_range if cfg.tail_range else (0, max(2, n // 8))
    tail_slack = int(rng.integers(tail_lo, tail_hi + 1))
    e = n - 1 - tail_slack
    s = max(0, e - track_len + 1)
    visible = np.zeros(n, dtype=bool)
    visible[s:e + 1] = True
    if cfg.visibility_intervals == 2 and s > cfg.early_len_range[0] + 4:
        early_len = int(rng.integers(cfg.early_len_range[0],
                                     cfg.early_len_range[1] + 1))
        early_end = int(rng.integers(early_len - 1, s - 3))
        early_start = max(0, early_end - early_len + 1)
        visible[early_start:early_end + 1] = True

    margin = max(qw, qh) / 2 + 1.5
    query_obj = SceneObject(kind=kind, color=query_color, width=qw, height=qh,
                            waypoints=_random_waypoints(rng, cfg, margin),
                            visible=visible)

    objects = []
    for _ in range(cfg.n_distractors):
        d_kind = kind if cfg.match_query_shape else \
            ("rect" if rng.uniform() < 0.5 else "disc")
        dw = rng.uniform(*cfg.query_size_range) * rng.uniform(0.8, 1.2)
        dh = dw if d_kind == "disc" else dw * rng.uniform(0.7, 1.4)
        objects.append(SceneObject(
            kind=d_kind, color=_similar_color(rng, query_color,
                                              cfg.distractor_similarity),
            width=dw, height=dh,
            waypoints=_random_waypoints(rng, cfg, max(dw, dh) / 2 + 1.5),
            visible=np.ones(n, dtype=bool)))
    objects.append(query_obj)

    occluders = []
    if cfg.occlusion:
        for _ in range(cfg.n_occluders):
            ow = qw * rng.uniform(0.4, 0.7)
            occ_visible = np.zeros(n, dtype=bool)
            o_len = int(rng.integers(max(2, n // 8), max(3, n // 4)))
            o_start = int(rng.integers(0, max(1, n - o_len)))
            occ_visible[o_start:o_start + o_len] = True
            occluders.append(SceneObject(
                kind="rect", color=rng.uniform(0.12, 0.3, size=3),
                width=ow, height=ow * rng.uniform(0.8, 1.3),
                waypoints=_random_waypoints(rng, cfg, ow / 2 + 1.0),
                visible=occ_visible))

    return SyntheticScene(canvas_side=cfg.canvas_side, n_frames=n, fps=cfg.fps,
                          objects=objects, query_index=len(objects) - 1,
                          occluders=occluders, blur=cfg.blur)


# ---------------------------------------------------------------------------
# in-memory samples and dataset generation
# ---------------------------------------------------------------------------

@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray           # (L, S, S, 3) float32 in [0, 1]
    query: np.ndarray            # (S, S, 3) float32
    query_source_box: Box
    track: ResponseTrack
    fps: int


def generate_video(rng, cfg: DataGenConfig, video_id: str):
    """Returns (VideoSample, SyntheticScene)."""
    scene = generate_scene(rng, cfg)
    frames, gt_boxes = render_scene(scene)
    track = last_contiguous_track(gt_boxes)
    query, source_box = render_query_image(scene, cfg.query_scale)
    sample = VideoSample(video_id=video_id, frames=frames, query=query,
                         query_source_box=source_box, track=track, fps=cfg.fps)
    return sample, scene


def dataset_statistics(samples: list[VideoSample], small_max: float = 64.0,
                       medium_max: float = 192.0) -> dict:
    """Track-length distribution and object scale mix. Scale buckets follow
    the side-length thresholds used at full scale (area up to small_max^2 is
    small, up to medium_max^2 medium, larger is large); pass canvas-adjusted
    thresholds for toy data."""
    lengths = [s.track.n_frames for s in samples]
    sides = [float(np.sqrt(np.mean([b.area for b in s.track.boxes])))
             for s in samples]
    return {
        "n_videos": len(samples),
        "track_len_mean": float(np.mean(lengths)),
        "track_len_min": int(np.min(lengths)),
        "track_len_max": int(np.max(lengths)),
        "scale_mix": {
            "small": sum(1 for s in sides if s <= small_max),
            "medium": sum(1 for s in sides if small_max < s <= medium_max),
            "large": sum(1 for s in sides if s > medium_max)},
    }


def generate_dataset(seed: int, n_videos: int, cfg: DataGenConfig,
                     out_dir=None) -> list[VideoSample]:
    """Deterministic dataset: per-video generators spawned from the seed.
    When ``out_dir`` is given, frames, queries and annotations are written
    there in the documented formats."""
    streams = np.random.SeedSequence(seed).spawn(n_videos)
    samples = []
    for i, ss in enumerate(streams):
        sample, _ = generate_video(np.random.default_rng(ss), cfg,
                                   f"vid_{i:04d}")
        samples.append(sample)
    if out_dir is not None:
        save_dataset(Path(out_dir), samples)
    return samples


# ---------------------------------------------------------------------------
# raw frame container
# ---------------------------------------------------------------------------

def write_frames(prefix: Path, frames_u8: np.ndarray) -> None:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"side": frames_u8.shape[1], "frame_count": frames_u8.shape[0],
                "channels": frames_u8.shape[3], "dtype": "uint8"}
    prefix.with_suffix(".bin").write_bytes(np.ascontiguousarray(frames_u8).tobytes())
    prefix.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True))


def read_frames(prefix: Path) -> np.ndarray:
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("dtype") != "uint8":
        raise SchemaError(f"{prefix}: unsupported frame dtype {manifest.get('dtype')}")
    shape = (manifest["frame_count"], manifest["side"], manifest["side"],
             manifest["channels"])
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype=np.uint8)
    if raw.size != int(np.prod(shape)):
        raise SchemaError(f"{prefix}: frame payload size mismatch")
    return raw.reshape(shape).copy()


def _to_u8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def _box_to_json(box: Box) -> list[float]:
    return [float(v) for v in box.to_corners()]


def _box_from_json(value, where: str) -> Box:
    if (not isinstance(value, (list, tuple)) or len(value) != 4
            or not all(isinstance(v, (int, float)) for v in value)):
        raise SchemaError(f"{where}: expected [x1, y1, x2, y2]")
    return Box.from_corners(*[float(v) for v in value])


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise SchemaError(f"{where}: missing field {key!r}")
    return record[key]


def save_dataset(out_dir: Path, samples: list[VideoSample]) -> None:
    out_dir = Path(out_dir)
    records = []
    for s in samples:
        write_frames(out_dir / "videos" / s.video_id, _to_u8(s.frames))
        write_frames(out_dir / "queries" / s.video_id, _to_u8(s.query[None]))
        records.append({
            "video_id": s.video_id,
            "frame_count": int(s.frames.shape[0]),
            "fps": int(s.fps),
            "query": {"image": f"queries/{s.video_id}",
                      "source_box": _box_to_json(s.query_source_box)},
            "response_track": {"start": int(s.track.s), "end": int(s.track.e),
                               "boxes": [_box_to_json(b) for b in s.track.boxes]},
        })
    (out_dir / "annotations.json").write_text(
        json.dumps({"videos": records}, indent=2, sort_keys=True))


def read_annotations(path) -> list[dict]:
    """Parse and validate annotations.json; returns the raw record dicts with
    boxes decoded (key 'track' holds a ResponseTrack)."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or "videos" not in data:
        raise SchemaError("annotations: missing top-level 'videos'")
    out = []
    for i, rec in enumerate(data["videos"]):
        where = f"videos[{i}]"
        video_id = _require(rec, "video_id", where)
        frame_count = _require(rec, "frame_count", where)
        fps = _require(rec, "fps", where)
        query = _require(rec, "query", where)
        rt = _require(rec, "response_track", where)
        q_image = _require(query, "image", f"{where}.query")
        q_box = _box_from_json(_require(query, "source_box", f"{where}.query"),
                               f"{where}.query.source_box")
        start = _require(rt, "start", f"{where}.response_track")
        end = _require(rt, "end", f"{where}.response_track")
        boxes = [_box_from_json(b, f"{where}.response_track.boxes[{j}]")
                 for j, b in enumerate(_require(rt, "boxes",
                                                f"{where}.response_track"))]
        if not 0 <= start <= end < frame_count:
            raise SchemaError(f"{where}.response_track: range [{start}, {end}] "
                              f"outside video of {frame_count} frames")
        track = ResponseTrack(s=int(start), e=int(end), boxes=boxes)
        out.append({"video_id": video_id, "frame_count": int(frame_count),
                    "fps": int(fps), "query_image": q_image,
                    "query_source_box": q_box, "track": track})
    return out


def load_dataset(data_dir) -> list[VideoSample]:
    data_dir = Path(data_dir)
    samples = []
    for rec in read_annotations(data_dir / "annotations.json"):
        frames = read_frames(data_dir / "videos" / rec["video_id"])
        query = read_frames(data_dir / rec["query_image"])
        samples.append(VideoSample(
            video_id=rec["video_id"],
            frames=frames.astype(np.float32) / 255.0,
            query=(query.astype(np.float32) / 255.0)[0],
            query_source_box=rec["query_source_box"],
            track=rec["track"], fps=rec["fps"]))
    return samples


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------

def save_predictions(path, predictions: dict[str, ResponseTrack | None]) -> None:
    records = []
    for query_id in sorted(predictions):
        track = predictions[query_id]
        if track is None:
            records.append({"query_id": query_id, "s": None, "e": None,
                            "boxes": [], "score": None})
        else:
            records.append({"query_id": query_id, "s": int(track.s),
                            "e": int(track.e),
                            "boxes": [_box_to_json(b) for b in track.boxes],
                            "score": float(track.score)})
    Path(path).write_text(json.dumps({"predictions": records}, indent=2,
                                     sort_keys=True))


def read_predictions(path) -> dict[str, ResponseTrack | None]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or "predictions" not in data:
        raise SchemaError("predictions: missing top-level 'predictions'")
    out: dict[str, ResponseTrack | None] = {}
    for i, rec in enumerate(data["predictions"]):
        where = f"predictions[{i}]"
        query_id = _require(rec, "query_id", where)
        s = _require(rec, "s", where)
        if s is None:
            out[query_id] = None
            continue
        e = _require(rec, "e", where)
        score = _require(rec, "score", where)
        boxes = [_box_from_json(b, f"{where}.boxes[{j}]")
                 for j, b in enumerate(_require(rec, "boxes", where))]
        out[query_id] = ResponseTrack(s=int(s), e=int(e), boxes=boxes,
                                      score=float(score))
    return out


# ---------------------------------------------------------------------------
# precomputed features
# ---------------------------------------------------------------------------

def save_features(dir_path, video_id: str, frame_feats: np.ndarray,
                  query_feat: np.ndarray) -> None:
    """Flat little-endian float32 payload + JSON manifest; frame features
    (T, H, W, C), query features (H, W, C)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    frames = np.ascontiguousarray(frame_feats, dtype="<f4")
    query = np.ascontiguousarray(query_feat, dtype="<f4")
    manifest = {"dtype": "<f4",
                "frames": {"shape": list(frames.shape), "offset": 0},
                "query": {"shape": list(query.shape), "offset": frames.nbytes}}
    (dir_path / f"{video_id}.features.bin").write_bytes(
        frames.tobytes() + query.tobytes())
    (dir_path / f"{video_id}.features.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def load_features(dir_path, video_id: str, model_cfg: ModelConfig):
    """Load and validate precomputed features against the model contract:
    spatial side and channels must match; the frame count is free."""
    dir_path = Path(dir_path)
    manifest_path = dir_path / f"{video_id}.features.json"
    if not manifest_path.exists():
        raise SchemaError(f"no feature manifest for {video_id} in {dir_path}")
    manifest = json.loads(manifest_path.read_text())
    raw = (dir_path / f"{video_id}.features.bin").read_bytes()

    def read_block(meta, expected_tail, name):
        shape = tuple(meta["shape"])
        if tuple(shape[-3:]) != expected_tail:
            raise SchemaError(
                f"{video_id} {name} features: shape {list(shape)} does not "
                f"match model (H, W, C) = {list(expected_tail)}")
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=meta["offset"])
        if arr.size != count:
            raise SchemaError(f"{video_id} {name} features: payload truncated")
        return arr.reshape(shape).copy()

    tail = (model_cfg.feature_side, model_cfg.feature_side, model_cfg.channels)
    frames = read_block(manifest["frames"], tail, "frame")
    if len(manifest["frames"]["shape"]) != 4:
        raise SchemaError(f"{video_id} frame features must be 4-D (T, H, W, C)")
    query = read_block(manifest["query"], tail, "query")
    if len(manifest["query"]["shape"]) != 3:
        raise SchemaError(f"{video_id} query features must be 3-D (H, W, C)")
    return frames, query

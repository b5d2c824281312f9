import json
import math

import numpy as np
import pytest

from vql.config import ModelConfig
from vql.data import (DataGenConfig, SceneObject, SyntheticScene,
                      generate_dataset, generate_video, last_contiguous_track,
                      load_dataset, load_features, mask_bbox, read_annotations,
                      read_frames, read_predictions, render_scene,
                      save_features, save_predictions, shape_mask,
                      write_frames)
from vql.errors import ConfigurationError, SchemaError
from vql.geometry import Box
from vql.inference import ResponseTrack


def static_object(kind, cx, cy, w, h, visible, color=(0.9, 0.2, 0.2)):
    n = len(visible)
    return SceneObject(kind=kind, color=np.array(color), width=w, height=h,
                       waypoints=np.array([[cx, cy], [cx, cy]]),
                       visible=np.asarray(visible, dtype=bool))


def brute_force_query_bbox(scene, t):
    """Pixel-level oracle: scalar-loop membership test for the query object."""
    obj = scene.objects[scene.query_index]
    if not obj.visible[t]:
        return None
    cx, cy = obj.center_at(t, scene.n_frames)
    r_min = c_min = math.inf
    r_max = c_max = -math.inf
    for r in range(scene.canvas_side):
        for c in range(scene.canvas_side):
            px, py = c + 0.5, r + 0.5
            if obj.kind == "rect":
                inside = (abs(px - cx) <= obj.width / 2
                          and abs(py - cy) <= obj.height / 2)
            else:
                inside = (px - cx) ** 2 + (py - cy) ** 2 <= (obj.width / 2) ** 2
            if inside:
                r_min, r_max = min(r_min, r), max(r_max, r)
                c_min, c_max = min(c_min, c), max(c_max, c)
    if r_min is math.inf:
        return None
    return Box.from_corners(c_min, r_min, c_max + 1, r_max + 1)


class TestRendering:
    def test_gt_matches_pixel_oracle_exactly(self):
        rng = np.random.default_rng(0)
        cfg = DataGenConfig(n_frames=12, canvas_side=48,
                            track_len_range=(6, 8))
        for seed in range(3):
            _, scene = generate_video(np.random.default_rng(seed), cfg, "v")
            _, gt_boxes = render_scene(scene)
            for t in range(scene.n_frames):
                oracle = brute_force_query_bbox(scene, t)
                if oracle is None:
                    assert gt_boxes[t] is None
                else:
                    assert gt_boxes[t] is not None
                    assert gt_boxes[t].to_corners() == oracle.to_corners()

    def test_most_recent_interval_is_track(self):
        visible = np.zeros(30, dtype=bool)
        visible[3:8] = True
        visible[20:25] = True
        obj = static_object("rect", 16, 16, 8, 8, visible)
        scene = SyntheticScene(canvas_side=32, n_frames=30, fps=5,
                               objects=[obj], query_index=0)
        _, gt_boxes = render_scene(scene)
        track = last_contiguous_track(gt_boxes)
        assert (track.s, track.e) == (20, 24)

    def test_fully_offcanvas_frame_has_no_box(self):
        obj = SceneObject(kind="rect", color=np.array([1.0, 0, 0]), width=6,
                          height=6, waypoints=np.array([[-20.0, 16.0], [16.0, 16.0]]),
                          visible=np.ones(5, dtype=bool))
        scene = SyntheticScene(canvas_side=32, n_frames=5, fps=5,
                               objects=[obj], query_index=0)
        _, gt_boxes = render_scene(scene)
        assert gt_boxes[0] is None          # entirely off canvas
        assert gt_boxes[4] is not None      # fully on canvas

    def test_occluder_and_blur_do_not_move_gt(self):
        visible = np.ones(4, dtype=bool)
        obj = static_object("disc", 16, 16, 10, 10, visible)
        occ = static_object("rect", 16, 16, 6, 6, visible, color=(0.2, 0.2, 0.2))
        plain = SyntheticScene(canvas_side=32, n_frames=4, fps=5,
                               objects=[obj], query_index=0)
        occluded = SyntheticScene(canvas_side=32, n_frames=4, fps=5,
                                  objects=[obj], query_index=0,
                                  occluders=[occ], blur=True)
        _, gt_plain = render_scene(plain)
        frames_occ, gt_occ = render_scene(occluded)
        for a, b in zip(gt_plain, gt_occ):
            assert a.to_corners() == b.to_corners()
        # the occluder really covers the object center
        assert not np.allclose(frames_occ[0, 16, 16], obj.color)

    def test_never_visible_rejected(self):
        obj = static_object("rect", 16, 16, 8, 8, np.zeros(5, dtype=bool))
        scene = SyntheticScene(canvas_side=32, n_frames=5, fps=5,
                               objects=[obj], query_index=0)
        _, gt_boxes = render_scene(scene)
        with pytest.raises(ConfigurationError):
            last_contiguous_track(gt_boxes)

    def test_mask_bbox_empty(self):
        assert mask_bbox(np.zeros((4, 4), dtype=bool)) is None

    def test_shape_mask_rect_halfpixel(self):
        # rect [3, 7) x [3, 7): pixel centers 3.5..6.5 inside
        mask = shape_mask("rect", 5.0, 5.0, 4.0, 4.0, 10)
        box = mask_bbox(mask)
        assert box.to_corners() == (3.0, 3.0, 7.0, 7.0)


class TestGeneration:
    def test_determinism(self):
        cfg = DataGenConfig(n_frames=16, track_len_range=(6, 10))
        a = generate_dataset(seed=7, n_videos=3, cfg=cfg)
        b = generate_dataset(seed=7, n_videos=3, cfg=cfg)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.frames, sb.frames)
            np.testing.assert_array_equal(sa.query, sb.query)
            assert (sa.track.s, sa.track.e) == (sb.track.s, sb.track.e)

    def test_different_seeds_differ(self):
        cfg = DataGenConfig(n_frames=16, track_len_range=(6, 10))
        a = generate_dataset(seed=1, n_videos=1, cfg=cfg)
        b = generate_dataset(seed=2, n_videos=1, cfg=cfg)
        assert not np.array_equal(a[0].frames, b[0].frames)

    def test_query_rendered_at_different_scale(self):
        cfg = DataGenConfig(n_frames=16, track_len_range=(6, 10), query_scale=1.4)
        sample, scene = generate_video(np.random.default_rng(3), cfg, "v")
        obj = scene.objects[scene.query_index]
        qbox = sample.query_source_box
        # rendered query box is within a pixel of scale * object size
        assert qbox.w == pytest.approx(obj.width * 1.4, abs=1.5)
        assert qbox.h == pytest.approx(obj.height * 1.4, abs=1.5)

    def test_zero_visibility_config_rejected(self):
        with pytest.raises(ConfigurationError):
            DataGenConfig(track_len_range=(0, 0)).validate()

    def test_unit_scale_query_rejected(self):
        with pytest.raises(ConfigurationError):
            DataGenConfig(query_scale=1.0).validate()

    def test_two_interval_visibility_track_is_last(self):
        cfg = DataGenConfig(n_frames=48, visibility_intervals=2,
                            track_len_range=(8, 10))
        found_early = False
        for seed in range(12):
            sample, scene = generate_video(np.random.default_rng(seed), cfg, "v")
            visible = scene.objects[scene.query_index].visible
            if visible[:max(0, sample.track.s - 1)].any():
                found_early = True
                # the early interval is disjoint from the response track
                assert not visible[sample.track.s - 1]
            assert visible[sample.track.s:sample.track.e + 1].all()
        assert found_early

    def test_statistics_reproducible_from_seed(self):
        from vql.data import dataset_statistics
        cfg = DataGenConfig(n_frames=24, track_len_range=(6, 12))
        a = dataset_statistics(generate_dataset(seed=8, n_videos=6, cfg=cfg),
                               small_max=8.0, medium_max=14.0)
        b = dataset_statistics(generate_dataset(seed=8, n_videos=6, cfg=cfg),
                               small_max=8.0, medium_max=14.0)
        assert a == b
        assert a["n_videos"] == 6
        assert 6 <= a["track_len_min"] <= a["track_len_max"] <= 12
        assert sum(a["scale_mix"].values()) == 6

    def test_track_boxes_inside_canvas(self):
        cfg = DataGenConfig(n_frames=24, track_len_range=(8, 12))
        for sample in generate_dataset(seed=5, n_videos=4, cfg=cfg):
            for b in sample.track.boxes:
                x1, y1, x2, y2 = b.to_corners()
                assert 0 <= x1 < x2 <= cfg.canvas_side
                assert 0 <= y1 < y2 <= cfg.canvas_side


class TestContainers:
    def test_frames_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        frames = rng.integers(0, 256, (5, 8, 8, 3), dtype=np.uint8)
        write_frames(tmp_path / "vid", frames)
        np.testing.assert_array_equal(read_frames(tmp_path / "vid"), frames)

    def test_truncated_payload_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        frames = rng.integers(0, 256, (5, 8, 8, 3), dtype=np.uint8)
        write_frames(tmp_path / "vid", frames)
        payload = (tmp_path / "vid.bin").read_bytes()
        (tmp_path / "vid.bin").write_bytes(payload[:-10])
        with pytest.raises(SchemaError):
            read_frames(tmp_path / "vid")


class TestAnnotationsIO:
    def make_dataset(self, tmp_path):
        cfg = DataGenConfig(n_frames=16, track_len_range=(6, 10))
        return generate_dataset(seed=9, n_videos=2, cfg=cfg, out_dir=tmp_path)

    def test_save_load_round_trip(self, tmp_path):
        samples = self.make_dataset(tmp_path)
        loaded = load_dataset(tmp_path)
        assert [s.video_id for s in loaded] == [s.video_id for s in samples]
        for orig, got in zip(samples, loaded):
            assert (got.track.s, got.track.e) == (orig.track.s, orig.track.e)
            for a, b in zip(got.track.boxes, orig.track.boxes):
                assert a.to_corners() == b.to_corners()  # boxes exact via JSON
            np.testing.assert_allclose(got.frames, orig.frames, atol=1 / 255 + 1e-6)

    def test_missing_response_track_named(self, tmp_path):
        self.make_dataset(tmp_path)
        data = json.loads((tmp_path / "annotations.json").read_text())
        del data["videos"][1]["response_track"]
        (tmp_path / "annotations.json").write_text(json.dumps(data))
        with pytest.raises(SchemaError, match=r"videos\[1\].*response_track"):
            read_annotations(tmp_path / "annotations.json")

    def test_bad_box_named(self, tmp_path):
        self.make_dataset(tmp_path)
        data = json.loads((tmp_path / "annotations.json").read_text())
        data["videos"][0]["response_track"]["boxes"][2] = [1, 2, 3]
        (tmp_path / "annotations.json").write_text(json.dumps(data))
        with pytest.raises(SchemaError, match=r"boxes\[2\]"):
            read_annotations(tmp_path / "annotations.json")

    def test_out_of_range_track_rejected(self, tmp_path):
        self.make_dataset(tmp_path)
        data = json.loads((tmp_path / "annotations.json").read_text())
        data["videos"][0]["response_track"]["end"] = 99
        (tmp_path / "annotations.json").write_text(json.dumps(data))
        with pytest.raises(SchemaError, match="outside video"):
            read_annotations(tmp_path / "annotations.json")


class TestPredictionsIO:
    def test_round_trip_with_missing(self, tmp_path):
        track = ResponseTrack(s=3, e=5, boxes=[Box(1, 2, 3, 4)] * 3, score=0.8)
        preds = {"vid_0000": track, "vid_0001": None}
        save_predictions(tmp_path / "p.json", preds)
        got = read_predictions(tmp_path / "p.json")
        assert got["vid_0001"] is None
        assert (got["vid_0000"].s, got["vid_0000"].e) == (3, 5)
        assert got["vid_0000"].score == pytest.approx(0.8)
        assert got["vid_0000"].boxes[0].to_corners() == track.boxes[0].to_corners()

    def test_missing_field_named(self, tmp_path):
        (tmp_path / "p.json").write_text(json.dumps(
            {"predictions": [{"query_id": "q", "s": 1, "e": 2, "boxes": []}]}))
        with pytest.raises(SchemaError, match=r"predictions\[0\].*score"):
            read_predictions(tmp_path / "p.json")


class TestFeaturesIO:
    def test_accept_matching_config(self, tmp_path):
        cfg = ModelConfig()  # feature side 8, channels 64
        rng = np.random.default_rng(6)
        frames = rng.standard_normal((5, 8, 8, 64)).astype(np.float32)
        query = rng.standard_normal((8, 8, 64)).astype(np.float32)
        save_features(tmp_path, "vid", frames, query)
        got_f, got_q = load_features(tmp_path, "vid", cfg)
        np.testing.assert_array_equal(got_f, frames)
        np.testing.assert_array_equal(got_q, query)

    def test_wrong_channels_rejected_with_expected_actual(self, tmp_path):
        cfg = ModelConfig()
        rng = np.random.default_rng(7)
        save_features(tmp_path, "vid",
                      rng.standard_normal((5, 8, 8, 32)).astype(np.float32),
                      rng.standard_normal((8, 8, 32)).astype(np.float32))
        with pytest.raises(SchemaError, match=r"8, 8, 32.*8, 8, 64"):
            load_features(tmp_path, "vid", cfg)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SchemaError):
            load_features(tmp_path, "nope", ModelConfig())

    def test_loaded_features_drive_the_model(self, tmp_path):
        # precomputed features bypass the encoder and enter the correspondence
        # stages directly
        from vql.model import QueryLocalizer
        cfg = ModelConfig(input_side=16, clip_len=4, channels=8, patch_stride=8,
                          encoder_blocks=0, n_heads=2, ffn_mult=2,
                          spatial_layers=1, temporal_layers=1, window_half=1,
                          downsample_strides=[1], downsample_channels=8,
                          head_width=8, head_blocks=2, anchor_base_sizes=[6],
                          anchor_aspect_ratios=[1.0])
        rng = np.random.default_rng(8)
        frames = rng.standard_normal((4, 2, 2, 8)).astype(np.float32)
        query = rng.standard_normal((2, 2, 8)).astype(np.float32)
        save_features(tmp_path, "vid", frames, query)
        got_f, got_q = load_features(tmp_path, "vid", cfg)
        model = QueryLocalizer(cfg, rng)
        probs, deltas, _ = model.forward_from_features(got_f, got_q)
        assert probs.shape == (4, cfg.n_anchors)
        assert deltas.shape == (4, cfg.n_anchors, 4)

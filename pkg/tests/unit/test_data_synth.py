"""Tests for the synthetic video generator, clip splitting and on-disk formats"""

import json

import numpy as np
import pytest

from data_synth import (
    CLIP_HEADER, CLIP_MAGIC, SynthConfig, decode_clip, encode_clip, generate, generate_video,
    ground_truth_records, load_annotations, load_clip, load_split, save_annotations, save_clip,
    split_clips, write_split,
)
from errors import ClipFormatError, ClipTruncatedError, ConfigError
from linking_eval import read_records


@pytest.fixture
def cfg():
    return SynthConfig(num_videos=3, frames_per_video=8, image_size=32, num_classes=2,
                       min_size=6, max_size=10, clip_length=4, rng_seed=5)


class TestSynthConfig:
    @pytest.mark.parametrize("overrides", [
        {"frames_per_video": 10},
        {"min_actors": 3, "max_actors": 2},
        {"max_size": 32},
        {"min_speed": 2.0, "max_speed": 1.0},
        {"partial_presence_prob": 1.5},
        {"num_classes": 0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            SynthConfig(**{**dict(frames_per_video=8, image_size=32, clip_length=4), **overrides})


class TestGenerator:
    def test_deterministic(self, cfg):
        a, b = generate(cfg), generate(cfg)
        assert [v.video_id for v in a] == ["video_0000", "video_0001", "video_0002"]
        for va, vb in zip(a, b):
            np.testing.assert_array_equal(va.frames, vb.frames)

    def test_videos_do_not_depend_on_dataset_size(self, cfg):
        small = generate(SynthConfig(**{**cfg.__dict__, "num_videos": 1}))
        np.testing.assert_array_equal(small[0].frames, generate(cfg)[0].frames)

    def test_frames_and_boxes(self, cfg):
        video = generate_video(cfg, 0)
        assert video.frames.shape == (8, 32, 32, 3)
        assert np.all((video.frames >= 0) & (video.frames <= 1))
        assert 1 <= len(video.tracks) <= 2
        for track in video.tracks:
            assert 0 <= track.label < 2
            assert np.all(track.boxes[:, 0] >= 0) and np.all(track.boxes[:, 2] <= 32)
            assert np.all(track.boxes[:, 1] >= 0) and np.all(track.boxes[:, 3] <= 32)
            widths = track.boxes[:, 2] - track.boxes[:, 0]
            assert np.all(widths == widths[0])
            assert track.present.all()

    def test_actor_is_painted_in_its_box(self, cfg):
        video = generate_video(cfg, 1)
        track = video.tracks[-1]
        x1, y1, x2, y2 = (int(v) for v in track.boxes[0])
        patch = video.frames[0, y1:y2, x1:x2]
        np.testing.assert_allclose(patch, np.broadcast_to(patch[0, 0], patch.shape))

    def test_partial_presence(self, cfg):
        partial = SynthConfig(**{**cfg.__dict__, "partial_presence_prob": 1.0, "num_videos": 4})
        tracks = [t for v in generate(partial) for t in v.tracks]
        assert all(0 < t.present.sum() < 8 for t in tracks)


class TestSplitClips:
    def test_clip_count_and_boxes(self, cfg):
        video = generate_video(cfg, 0)
        clips = split_clips(video, 4)
        assert [c.start_frame for c in clips] == [0, 4]
        for clip in clips:
            assert clip.frames.shape == (4, 32, 32, 3)
            assert len(clip.tubelets) == len(video.tracks)
            for tub, actor in zip(clip.tubelets, clip.actor_ids):
                np.testing.assert_array_equal(tub.boxes, video.tracks[actor].boxes[clip.start_frame:clip.start_frame + 4])
                assert tub.label == video.tracks[actor].label

    def test_last_frame_is_repeated(self, cfg):
        video = generate_video(SynthConfig(**{**cfg.__dict__, "frames_per_video": 4, "clip_length": 2}), 0)
        video.frames = video.frames[:3]
        for track in video.tracks:
            track.boxes, track.present = track.boxes[:3], track.present[:3]
        clips = split_clips(video, 2)
        assert len(clips) == 2
        np.testing.assert_array_equal(clips[1].frames[1], video.frames[2])

    def test_training_filter_requires_full_presence(self, cfg):
        video = generate_video(cfg, 0)
        video.tracks[0].present[5] = False
        training = split_clips(video, 4, training=True)
        evaluation = split_clips(video, 4, training=False)
        assert 0 not in training[1].actor_ids
        assert 0 in evaluation[1].actor_ids

    def test_stride(self, cfg):
        clips = split_clips(generate_video(cfg, 0), 4, stride=2)
        assert [c.start_frame for c in clips] == [0, 2, 4]

    def test_ground_truth_records(self, cfg):
        video = generate_video(cfg, 0)
        records = ground_truth_records(video, 4)
        assert len(records) == 8 * len(video.tracks)
        assert {r.track_id for r in records} == {t.actor_id for t in video.tracks}
        assert all(r.clip_index == r.frame_index // 4 for r in records)


class TestClipFormat:
    def test_encode_decode(self, rng):
        frames = rng.random((2, 4, 4, 3)).astype(np.float32).astype(np.float64)
        data = encode_clip(frames)
        assert data.startswith(CLIP_MAGIC)
        assert len(data) == len(CLIP_MAGIC) + CLIP_HEADER.size + frames.size * 4
        np.testing.assert_array_equal(decode_clip(data), frames)

    def test_bad_magic(self):
        with pytest.raises(ClipFormatError):
            decode_clip(b"NOTACLIP" + bytes(16))

    def test_truncated_payload(self, rng):
        data = encode_clip(rng.random((1, 2, 2, 3)))
        with pytest.raises(ClipTruncatedError):
            decode_clip(data[:-4])
        with pytest.raises(ClipTruncatedError):
            decode_clip(data[:len(CLIP_MAGIC) + 3])

    def test_overflowing_dims(self):
        data = CLIP_MAGIC + CLIP_HEADER.pack(65535, 65535, 65535, 3)
        with pytest.raises(ClipFormatError):
            decode_clip(data)

    def test_dims_product_that_wraps_64_bits(self):
        with pytest.raises(ClipFormatError):
            decode_clip(CLIP_MAGIC + CLIP_HEADER.pack(65536, 65536, 65536, 65536))

    def test_save_and_load(self, tmp_path, rng):
        frames = rng.random((2, 4, 4, 3)).astype(np.float32).astype(np.float64)
        path = save_clip(tmp_path / "clip_0000.clipbin", frames)
        np.testing.assert_array_equal(load_clip(path), frames)

    def test_annotations(self, tmp_path, cfg):
        clip = split_clips(generate_video(cfg, 0), 4)[1]
        path = tmp_path / "clip_0001.json"
        save_annotations(path, clip)
        doc = json.loads(path.read_text())
        assert doc["clip_index"] == 1 and doc["start_frame"] == 4
        loaded = load_annotations(path, clip.frames)
        assert loaded.actor_ids == clip.actor_ids
        for a, b in zip(loaded.tubelets, clip.tubelets):
            np.testing.assert_array_equal(a.boxes, b.boxes)
            assert a.label == b.label

    def test_malformed_annotation(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"video_id": "v"}))
        with pytest.raises(ClipFormatError):
            load_annotations(path)


class TestDatasetLayout:
    def test_write_and_load_split(self, tmp_path, cfg):
        videos = generate(cfg)
        manifest = write_split(videos, tmp_path, "train", 4)
        lines = manifest.read_text().splitlines()
        assert len(lines) == 6
        assert lines[0] == "train/video_0000/clip_0000.clipbin"
        assert (tmp_path / "train" / "video_0000" / "clip_0000.json").is_file()
        loaded = load_split(tmp_path, "train")
        assert sorted(loaded) == [v.video_id for v in videos]
        assert [c.clip_index for c in loaded["video_0001"]] == [0, 1]
        np.testing.assert_allclose(loaded["video_0000"][0].frames, videos[0].frames[:4], atol=1e-6)
        truth = read_records(tmp_path / "ground_truth_train.txt")
        assert len(truth) == sum(8 * len(v.tracks) for v in videos)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_split(tmp_path, "heldout")

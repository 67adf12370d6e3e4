#!/usr/bin/env python3
"""
Synthetic Data Module
Deterministic moving-actor videos with ground-truth tubelets, clip
splitting, and the on-disk clip / annotation / manifest formats
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from errors import ClipFormatError, ClipTruncatedError, ConfigError
from file_manager import FileManager
from linking_eval import DetectionRecord, write_records
from tubelet_geometry import Tubelet
from utils import load_json, save_json

MODULE = "data-synth"

CLIP_MAGIC = b"LSTRCLP1"
CLIP_HEADER = struct.Struct("<4I")
MAX_PAYLOAD_BYTES = 1 << 31
CONTEXT_SIZE = 8
CONTEXT_BRIGHTNESS = 0.6


@dataclass
class SynthConfig:
    """Generator settings; every video is a pure function of these and its index"""

    num_videos: int = 20
    frames_per_video: int = 16
    image_size: int = 64
    num_classes: int = 3
    min_actors: int = 1
    max_actors: int = 2
    min_size: int = 10
    max_size: int = 20
    min_speed: float = 0.5
    max_speed: float = 2.0
    noise: float = 0.02
    clip_length: int = 8
    partial_presence_prob: float = 0.0
    rng_seed: int = 0
    video_prefix: str = "video"

    def __post_init__(self):
        if self.num_videos < 0 or self.frames_per_video < 1 or self.clip_length < 1:
            raise ConfigError("video and clip counts must be positive", MODULE)
        if self.frames_per_video % self.clip_length != 0:
            raise ConfigError(
                f"frames_per_video {self.frames_per_video} not divisible by clip length {self.clip_length}",
                MODULE)
        if self.num_classes < 1:
            raise ConfigError("need at least one class", MODULE)
        if not 1 <= self.min_actors <= self.max_actors:
            raise ConfigError("actor range must satisfy 1 <= min <= max", MODULE)
        if not 2 <= self.min_size <= self.max_size < self.image_size:
            raise ConfigError("actor sizes must satisfy 2 <= min <= max < image_size", MODULE)
        if not 0.0 <= self.min_speed <= self.max_speed:
            raise ConfigError("speed range must satisfy 0 <= min <= max", MODULE)
        if not 0.0 <= self.partial_presence_prob <= 1.0:
            raise ConfigError("partial_presence_prob must be in [0, 1]", MODULE)


@dataclass
class ActorTrack:
    """Per-frame boxes of one actor; present[f] is False where the actor is off screen"""

    actor_id: int
    label: int
    boxes: np.ndarray
    present: np.ndarray


@dataclass
class SyntheticVideo:
    video_id: str
    frames: np.ndarray
    tracks: List[ActorTrack] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ClipSample:
    """One T-frame clip with its ground-truth tubelets (label set) and their actor ids"""

    video_id: str
    clip_index: int
    start_frame: int
    frames: np.ndarray
    tubelets: List[Tubelet] = field(default_factory=list)
    actor_ids: List[int] = field(default_factory=list)

    @property
    def image_size(self):
        return self.frames.shape[1], self.frames.shape[2]


def class_color(label: int, num_classes: int) -> np.ndarray:
    """Evenly spaced hues so every class has its own colour"""
    phase = 2.0 * np.pi * (label / max(num_classes, 1) + np.array([0.0, 1.0 / 3.0, 2.0 / 3.0]))
    return 0.55 + 0.45 * np.cos(phase)


def _bounce(position: float, velocity: float, limit: float):
    position += velocity
    if position < 0.0:
        position, velocity = -position, -velocity
    if position > limit:
        position, velocity = 2.0 * limit - position, -velocity
    return min(max(position, 0.0), limit), velocity


def generate_video(cfg: SynthConfig, index: int) -> SyntheticVideo:
    """One video: noisy background, one stationary context square per actor, moving actors on top"""
    rng = np.random.default_rng([cfg.rng_seed, index])
    F, S = cfg.frames_per_video, cfg.image_size
    frames = np.clip(0.1 + cfg.noise * rng.standard_normal((F, S, S, 3)), 0.0, 1.0)

    n_actors = int(rng.integers(cfg.min_actors, cfg.max_actors + 1))
    tracks = []
    for actor_id in range(n_actors):
        label = int(rng.integers(0, cfg.num_classes))
        w, h = (int(v) for v in rng.integers(cfg.min_size, cfg.max_size + 1, size=2))
        x, y = rng.uniform(0, S - w), rng.uniform(0, S - h)
        speed = rng.uniform(cfg.min_speed, cfg.max_speed, size=2)
        vx, vy = speed * rng.choice([-1.0, 1.0], size=2)
        boxes = np.zeros((F, 4))
        for f in range(F):
            x1, y1 = int(round(x)), int(round(y))
            boxes[f] = (x1, y1, x1 + w, y1 + h)
            x, vx = _bounce(x, vx, S - w)
            y, vy = _bounce(y, vy, S - h)
        present = np.ones(F, dtype=bool)
        if F > 1 and rng.random() < cfg.partial_presence_prob:
            keep = int(rng.integers(1, F))
            start = int(rng.integers(0, F - keep + 1))
            present[:] = False
            present[start:start + keep] = True
        cx, cy = (int(v) for v in rng.integers(0, S - CONTEXT_SIZE + 1, size=2))
        color = class_color(label, cfg.num_classes)
        frames[:, cy:cy + CONTEXT_SIZE, cx:cx + CONTEXT_SIZE, :] = CONTEXT_BRIGHTNESS * color
        tracks.append(ActorTrack(actor_id, label, boxes, present))

    for track in tracks:
        color = class_color(track.label, cfg.num_classes)
        for f in np.flatnonzero(track.present):
            x1, y1, x2, y2 = (int(v) for v in track.boxes[f])
            frames[f, y1:y2, x1:x2, :] = color
    return SyntheticVideo(f"{cfg.video_prefix}_{index:04d}", frames, tracks)


def generate(cfg: SynthConfig) -> List[SyntheticVideo]:
    """Deterministic dataset; identical configs give identical videos"""
    return [generate_video(cfg, i) for i in range(cfg.num_videos)]


def split_clips(video: SyntheticVideo, T: int, training: bool = True,
                stride: Optional[int] = None) -> List[ClipSample]:
    """
    Cut a video into T-frame clips with per-clip ground-truth tubelets

    The last frame is repeated when the video length is not a multiple of
    T. With training=True an actor yields a tubelet only for clips where it
    is present in every frame; otherwise any presence suffices.

    Args:
        video: source video
        T: clip length
        training: apply the all-frames-present filter
        stride: frame step between clip starts (T when None)

    Returns:
        list of ClipSample in temporal order
    """
    if T < 1:
        raise ConfigError("clip length must be positive", MODULE)
    step = stride or T
    if step < 1:
        raise ConfigError("clip stride must be positive", MODULE)
    F = video.num_frames
    padded = -(-F // T) * T
    pad = padded - F
    frames = video.frames
    if pad:
        frames = np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)])
    tracks = []
    for track in video.tracks:
        boxes, present = track.boxes, track.present
        if pad:
            boxes = np.concatenate([boxes, np.repeat(boxes[-1:], pad, axis=0)])
            present = np.concatenate([present, np.repeat(present[-1:], pad)])
        tracks.append((track, boxes, present))

    clips = []
    for clip_index, start in enumerate(range(0, padded - T + 1, step)):
        sample = ClipSample(video.video_id, clip_index, start, frames[start:start + T].copy())
        for track, boxes, present in tracks:
            window = present[start:start + T]
            keep = window.all() if training else window.any()
            if keep:
                sample.tubelets.append(Tubelet(boxes[start:start + T].copy(), 1.0,
                                               clip_index=clip_index, label=track.label))
                sample.actor_ids.append(track.actor_id)
        clips.append(sample)
    return clips


def ground_truth_records(video: SyntheticVideo, clip_stride: int) -> List[DetectionRecord]:
    """Per-frame records of every present actor; the actor id goes in the track column"""
    records = []
    for track in video.tracks:
        for f in np.flatnonzero(track.present):
            records.append(DetectionRecord(video.video_id, int(f) // clip_stride, int(f), track.label, 1.0,
                                           track.boxes[f], track.actor_id))
    return records


# ---------------------------------------------------------------------------
# Clip binary format
# ---------------------------------------------------------------------------

def encode_clip(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ClipFormatError(f"clip must be T x H x W x C, got {frames.shape}", MODULE)
    return CLIP_MAGIC + CLIP_HEADER.pack(*frames.shape) + frames.astype("<f4").tobytes()


def decode_clip(data: bytes) -> np.ndarray:
    if len(data) < len(CLIP_MAGIC) or data[:len(CLIP_MAGIC)] != CLIP_MAGIC:
        raise ClipFormatError("bad magic, not an LSTRCLP1 clip", MODULE)
    offset = len(CLIP_MAGIC)
    if len(data) < offset + CLIP_HEADER.size:
        raise ClipTruncatedError("clip header is truncated", MODULE)
    dims = CLIP_HEADER.unpack_from(data, offset)
    declared = 4 * math.prod(dims)
    if declared > MAX_PAYLOAD_BYTES:
        raise ClipFormatError(f"declared dims {dims} overflow the payload limit", MODULE)
    payload = data[offset + CLIP_HEADER.size:]
    if len(payload) != declared:
        raise ClipTruncatedError(f"header declares {declared} payload bytes, found {len(payload)}", MODULE)
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def save_clip(path, frames: np.ndarray):
    return FileManager.atomic_write_bytes(path, encode_clip(frames))


def load_clip(path) -> np.ndarray:
    return decode_clip(Path(path).read_bytes())


def annotation_document(sample: ClipSample) -> dict:
    return {
        "video_id": sample.video_id,
        "clip_index": sample.clip_index,
        "start_frame": sample.start_frame,
        "tubelets": [
            {"class": int(t.label), "actor": int(a), "boxes": t.boxes.tolist()}
            for t, a in zip(sample.tubelets, sample.actor_ids)
        ],
    }


def save_annotations(path, sample: ClipSample):
    save_json(annotation_document(sample), path)


def load_annotations(path, frames: Optional[np.ndarray] = None) -> ClipSample:
    doc = load_json(path)
    try:
        sample = ClipSample(doc["video_id"], int(doc["clip_index"]), int(doc.get("start_frame", 0)),
                            frames if frames is not None else np.zeros((0, 0, 0, 3)))
        for entry in doc["tubelets"]:
            sample.tubelets.append(Tubelet(entry["boxes"], 1.0, clip_index=sample.clip_index,
                                           label=int(entry["class"])))
            sample.actor_ids.append(int(entry.get("actor", len(sample.actor_ids))))
    except (KeyError, TypeError) as e:
        raise ClipFormatError(f"malformed annotation {path}: {e}", MODULE) from e
    return sample


# ---------------------------------------------------------------------------
# Dataset layout
# ---------------------------------------------------------------------------

def write_split(videos: Sequence[SyntheticVideo], root, split: str, T: int,
                stride: Optional[int] = None, training: bool = True) -> Path:
    """
    Write clips, sidecars, manifest and ground truth for one split

    Returns:
        Path of manifest_<split>.txt
    """
    root = Path(root)
    split_dir = FileManager.ensure_directory(root / split)
    entries = []
    records: List[DetectionRecord] = []
    for video in videos:
        video_dir = FileManager.ensure_directory(split_dir / video.video_id)
        for sample in split_clips(video, T, training, stride):
            clip_path = video_dir / f"clip_{sample.clip_index:04d}.clipbin"
            save_clip(clip_path, sample.frames)
            save_annotations(clip_path.with_suffix(".json"), sample)
            entries.append(clip_path.relative_to(root).as_posix())
        records.extend(ground_truth_records(video, stride or T))
    manifest = root / f"manifest_{split}.txt"
    FileManager.atomic_write_text(manifest, "\n".join(entries) + ("\n" if entries else ""))
    write_records(root / f"ground_truth_{split}.txt", records)
    return manifest


def load_split(root, split: str) -> Dict[str, List[ClipSample]]:
    """Clips of one split grouped by video, in manifest order"""
    root = Path(root)
    manifest = FileManager.require_file(root / f"manifest_{split}.txt", "manifest")
    videos: Dict[str, List[ClipSample]] = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        clip_path = root / line
        sample = load_annotations(clip_path.with_suffix(".json"), load_clip(clip_path))
        videos.setdefault(sample.video_id, []).append(sample)
    for clips in videos.values():
        clips.sort(key=lambda s: s.clip_index)
    return videos

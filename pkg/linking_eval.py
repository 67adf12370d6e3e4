#!/usr/bin/env python3
"""
Linking and Evaluation Module
Per-class dynamic-programming linking of clip tubelets into video tracks,
frame-mAP / video-mAP scoring, late fusion and the plain-text record
interchange used between commands
"""

import csv
import io
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DimensionError, RecordFormatError
from file_manager import FileManager
from tubelet_geometry import Tubelet, box_iou, pairwise_box_iou, pairwise_tubelet_iou

MODULE = "linking-eval"

EVAL_MODES = ("frame", "video")


@dataclass
class EvalConfig:
    """IoU threshold delta (strict) and evaluation granularity"""

    iou_threshold: float = 0.5
    mode: str = "video"

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"IoU threshold must be in (0, 1), got {self.iou_threshold}")
        if self.mode not in EVAL_MODES:
            raise ValueError(f"evaluation mode must be one of {EVAL_MODES}, got '{self.mode}'")


@dataclass
class VideoTrack:
    """
    Clip tubelets of consecutive clips linked for one class

    members are ordered by clip; member_refs holds (clip, tubelet index)
    pairs into the per-clip detections the track was linked from.
    """

    members: List[Tubelet]
    member_refs: List[Tuple[int, int]]
    label: int
    video_id: str = ""
    clip_stride: Optional[int] = None
    track_id: int = 0

    @property
    def score(self) -> float:
        """Mean class score of the members for the track's class"""
        return float(np.mean([m.class_scores[self.label] for m in self.members]))

    @property
    def clip_indices(self) -> List[int]:
        return [c for c, _ in self.member_refs]

    def to_tube(self) -> "VideoTube":
        """Per-frame boxes; frames covered by overlapping clips average their boxes"""
        stride = self.clip_stride or self.members[0].T
        boxes: Dict[int, List[np.ndarray]] = defaultdict(list)
        for member, (clip, _) in zip(self.members, self.member_refs):
            start = clip * stride
            for t in range(member.T):
                boxes[start + t].append(member.boxes[t])
        frames = sorted(boxes)
        return VideoTube(self.video_id, self.label, self.score, np.array(frames, dtype=np.int64),
                         np.array([np.mean(boxes[f], axis=0) for f in frames]), self.track_id)


@dataclass
class VideoTube:
    """Video-level box sequence over (possibly non-contiguous) frames"""

    video_id: str
    label: int
    score: float
    frames: np.ndarray
    boxes: np.ndarray
    track_id: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.frames.shape[0] != self.boxes.shape[0]:
            raise DimensionError(f"{self.frames.shape[0]} frames but {self.boxes.shape[0]} boxes", MODULE)


@dataclass
class DetectionRecord:
    """One line of the record interchange: a scored box on one frame"""

    video_id: str
    clip_index: int
    frame_index: int
    label: int
    score: float
    box: np.ndarray
    track_id: Optional[int] = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)


@dataclass
class MapResult:
    """Per-class AP and their mean over classes with at least one ground truth"""

    per_class: Dict[int, float] = field(default_factory=dict)
    mean: float = 0.0


# ---------------------------------------------------------------------------
# Linking
# ---------------------------------------------------------------------------

def _best_path(per_clip_boxes: List[np.ndarray], per_clip_scores: List[np.ndarray],
               alive: List[np.ndarray], link_iou_weight: float):
    """
    Highest-value chain of alive nodes over consecutive clips

    V[c][i] = s_ci + max(0, max_j V[c-1][j] + w * iou(j, i)); a zero gain
    still links, so the path may start and end at any clip. Equal values
    prefer the longer chain, then the earliest clip and the lower index.
    """
    values: List[np.ndarray] = []
    lengths: List[np.ndarray] = []
    back: List[np.ndarray] = []
    best = (-math.inf, 0, -1, -1)
    for c, (boxes, scores) in enumerate(zip(per_clip_boxes, per_clip_scores)):
        v = np.where(alive[c], scores, -np.inf)
        prev = np.full(len(scores), -1, dtype=np.int64)
        length = np.ones(len(scores), dtype=np.int64)
        if c > 0 and len(scores) and np.any(alive[c - 1]):
            iou = pairwise_tubelet_iou(per_clip_boxes[c - 1], boxes)
            cand = values[c - 1][:, None] + link_iou_weight * iou
            j = np.argmax(cand, axis=0)
            gain = cand[j, np.arange(len(scores))]
            take = alive[c] & (gain >= 0)
            v = np.where(take, v + gain, v)
            prev = np.where(take, j, -1)
            length = np.where(take, lengths[c - 1][j] + 1, 1)
        values.append(v)
        lengths.append(length)
        back.append(prev)
        for i in range(len(scores)):
            if alive[c][i] and (v[i], length[i]) > best[:2]:
                best = (float(v[i]), int(length[i]), c, i)
    if best[2] < 0:
        return None, 0.0
    path = []
    c, i = best[2], best[3]
    while i >= 0:
        path.append((c, int(i)))
        i = back[c][i]
        c -= 1
    path.reverse()
    return path, best[0]


def link_tubelets(per_clip_detections: Sequence[Sequence[Tubelet]], link_iou_weight: float = 1.0,
                  score_threshold: float = 0.0, video_id: str = "",
                  clip_stride: Optional[int] = None) -> List[VideoTrack]:
    """
    Link clip-level tubelets into class-specific video tracks

    For every class, repeatedly take the chain over consecutive clips that
    maximizes summed member score plus link_iou_weight times the summed
    positional IoU of adjacent members, then remove its members.

    Args:
        per_clip_detections: tubelets (with class_scores) for each clip
        link_iou_weight: weight of the overlap term
        score_threshold: tubelets whose class score is below this do not join that class
        video_id: stamped onto every track
        clip_stride: frame offset between consecutive clips (T when None)

    Returns:
        list of VideoTrack, per class in extraction order
    """
    if len(per_clip_detections) == 0:
        raise DimensionError("linking needs at least one clip", MODULE)
    all_tubelets = [t for clip in per_clip_detections for t in clip]
    if not all_tubelets:
        return []
    num_classes = len(all_tubelets[0].class_scores)
    T = all_tubelets[0].T
    per_clip_boxes = [np.stack([t.boxes for t in clip]) if len(clip) else np.zeros((0, T, 4))
                      for clip in per_clip_detections]

    tracks: List[VideoTrack] = []
    for k in range(num_classes):
        scores = [np.array([t.class_scores[k] for t in clip], dtype=np.float64)
                  for clip in per_clip_detections]
        alive = [s >= score_threshold for s in scores]
        while any(a.any() for a in alive):
            path, _ = _best_path(per_clip_boxes, scores, alive, link_iou_weight)
            if path is None:
                break
            for c, i in path:
                alive[c][i] = False
            tracks.append(VideoTrack(
                members=[per_clip_detections[c][i] for c, i in path],
                member_refs=path,
                label=k,
                video_id=video_id,
                clip_stride=clip_stride,
                track_id=len(tracks),
            ))
    return tracks


def path_value(track: VideoTrack, link_iou_weight: float = 1.0) -> float:
    """Summed member class score plus weighted adjacent positional IoU"""
    value = sum(float(m.class_scores[track.label]) for m in track.members)
    for a, b in zip(track.members, track.members[1:]):
        value += link_iou_weight * float(pairwise_tubelet_iou(a.boxes[None], b.boxes[None])[0, 0])
    return value


# ---------------------------------------------------------------------------
# Matching and average precision
# ---------------------------------------------------------------------------

def spatio_temporal_iou(a: VideoTube, b: VideoTube) -> float:
    """Mean per-frame box IoU over the union of frames; frames in one tube only count 0"""
    if a.video_id != b.video_id:
        return 0.0
    union = np.union1d(a.frames, b.frames)
    if union.size == 0:
        return 0.0
    common, ia, ib = np.intersect1d(a.frames, b.frames, return_indices=True)
    if common.size == 0:
        return 0.0
    per_frame = pairwise_box_iou(a.boxes[ia][:, None, :], b.boxes[ib][:, None, :])[:, 0, 0]
    return float(per_frame.sum() / union.size)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the all-point interpolated precision-recall curve"""
    mrec = np.concatenate(([0.0], np.asarray(recall, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precision, dtype=np.float64), [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    i = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[i] - mrec[i - 1]) * mpre[i]))


def match_ranked(scores: Sequence[float], iou: np.ndarray, iou_threshold: float) -> np.ndarray:
    """
    Greedy one-to-one matching in descending score order

    Each detection takes the unmatched ground truth with the highest IoU
    (lower index on ties) when that IoU is strictly above iou_threshold.

    Args:
        scores: n detection scores
        iou: n x g overlap matrix
        iou_threshold: delta

    Returns:
        n booleans in ranked order: True for a true positive
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(iou.shape[1], dtype=bool)
    tp = np.zeros(order.size, dtype=bool)
    for rank, d in enumerate(order):
        if iou.shape[1] == 0:
            break
        row = np.where(taken, -1.0, iou[d])
        g = int(np.argmax(row))
        if row[g] > iou_threshold:
            taken[g] = True
            tp[rank] = True
    return tp


def ap_from_matches(tp: np.ndarray, num_gt: int) -> float:
    if num_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    hits = np.cumsum(tp)
    recall = hits / num_gt
    precision = hits / np.arange(1, tp.size + 1)
    return average_precision(recall, precision)


def _mean_ap(per_class: Dict[int, float]) -> MapResult:
    valid = {k: v for k, v in per_class.items() if not math.isnan(v)}
    mean = float(np.mean(list(valid.values()))) if valid else 0.0
    return MapResult(OrderedDict(sorted(valid.items())), mean)


def video_map(tracks: Sequence, gts: Sequence[VideoTube], cfg: EvalConfig) -> MapResult:
    """
    Video-mAP of linked tracks against ground-truth video tubes

    Args:
        tracks: VideoTrack or VideoTube detections
        gts: ground-truth tubes (score ignored)
        cfg: EvalConfig with mode 'video'

    Returns:
        MapResult over classes with at least one ground truth
    """
    if cfg.mode != "video":
        raise ValueError("video_map needs an EvalConfig in video mode")
    tubes = [t.to_tube() if isinstance(t, VideoTrack) else t for t in tracks]
    per_class: Dict[int, float] = {}
    for k in sorted({g.label for g in gts} | {t.label for t in tubes}):
        dets = [t for t in tubes if t.label == k]
        truth = [g for g in gts if g.label == k]
        iou = np.array([[spatio_temporal_iou(d, g) for g in truth] for d in dets]).reshape(len(dets), len(truth))
        tp = match_ranked([d.score for d in dets], iou, cfg.iou_threshold)
        per_class[k] = ap_from_matches(tp, len(truth))
    return _mean_ap(per_class)


def frame_map(per_frame_detections: Sequence[DetectionRecord],
              per_frame_gts: Sequence[DetectionRecord], cfg: EvalConfig) -> MapResult:
    """Frame-mAP: the same ranked matching over 2D boxes of the same video frame"""
    if cfg.mode != "frame":
        raise ValueError("frame_map needs an EvalConfig in frame mode")
    per_class: Dict[int, float] = {}
    labels = sorted({g.label for g in per_frame_gts} | {d.label for d in per_frame_detections})
    for k in labels:
        dets = [d for d in per_frame_detections if d.label == k]
        truth = [g for g in per_frame_gts if g.label == k]
        iou = np.zeros((len(dets), len(truth)))
        for i, d in enumerate(dets):
            for j, g in enumerate(truth):
                if d.video_id == g.video_id and d.frame_index == g.frame_index:
                    iou[i, j] = box_iou(d.box, g.box)
        tp = match_ranked([d.score for d in dets], iou, cfg.iou_threshold)
        per_class[k] = ap_from_matches(tp, len(truth))
    return _mean_ap(per_class)


def late_fuse(scores_a: np.ndarray, scores_b: np.ndarray) -> np.ndarray:
    """Elementwise mean of two score streams"""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot fuse scores of shape {a.shape} and {b.shape}", MODULE)
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Record interchange
# ---------------------------------------------------------------------------

def format_record(record: DetectionRecord) -> str:
    x1, y1, x2, y2 = record.box
    line = (f"{record.video_id} {record.clip_index} {record.frame_index} {record.label} "
            f"{record.score:.6f} {x1:.3f} {y1:.3f} {x2:.3f} {y2:.3f}")
    if record.track_id is not None:
        line += f" {record.track_id}"
    return line


def parse_record(line: str, line_number: int = 0) -> DetectionRecord:
    parts = line.split()
    if len(parts) not in (9, 10):
        raise RecordFormatError(f"line {line_number}: expected 9 or 10 fields, got {len(parts)}", MODULE)
    try:
        return DetectionRecord(
            video_id=parts[0],
            clip_index=int(parts[1]),
            frame_index=int(parts[2]),
            label=int(parts[3]),
            score=float(parts[4]),
            box=[float(v) for v in parts[5:9]],
            track_id=int(parts[9]) if len(parts) == 10 else None,
        )
    except ValueError as e:
        raise RecordFormatError(f"line {line_number}: {e}", MODULE) from e


def write_records(path, records: Iterable[DetectionRecord]):
    lines = ["# video_id clip_index frame_index class score x1 y1 x2 y2 [track_id]"]
    lines.extend(format_record(r) for r in records)
    return FileManager.atomic_write_text(path, "\n".join(lines) + "\n")


def read_records(path) -> List[DetectionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            records.append(parse_record(line, n))
    return records


def track_records(track: VideoTrack) -> List[DetectionRecord]:
    """Per-frame records of a linked track; the track id goes in the last column"""
    tube = track.to_tube()
    stride = track.clip_stride or track.members[0].T
    return [DetectionRecord(track.video_id, int(f) // stride, int(f), track.label, tube.score,
                            box, track.track_id)
            for f, box in zip(tube.frames, tube.boxes)]


def tubes_from_records(records: Sequence[DetectionRecord]) -> List[VideoTube]:
    """
    Group records carrying a track id into video tubes

    Records of one (video, track, class) form one tube; a frame listed
    more than once keeps its first box. The tube score is the mean record score.
    """
    groups: "OrderedDict[tuple, List[DetectionRecord]]" = OrderedDict()
    for r in records:
        if r.track_id is None:
            raise RecordFormatError(f"record for {r.video_id} frame {r.frame_index} has no track id", MODULE)
        groups.setdefault((r.video_id, r.track_id, r.label), []).append(r)
    tubes = []
    for (video_id, track_id, label), rows in groups.items():
        by_frame: "OrderedDict[int, DetectionRecord]" = OrderedDict()
        for r in sorted(rows, key=lambda r: r.frame_index):
            by_frame.setdefault(r.frame_index, r)
        frames = list(by_frame)
        tubes.append(VideoTube(video_id, label, float(np.mean([r.score for r in rows])),
                               np.array(frames, dtype=np.int64),
                               np.array([by_frame[f].box for f in frames]), track_id))
    return tubes


def write_ap_csv(path, result: MapResult):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["class", "ap"])
    for k, v in result.per_class.items():
        writer.writerow([k, f"{v:.6f}"])
    writer.writerow(["mean", f"{result.mean:.6f}"])
    return FileManager.atomic_write_text(path, buffer.getvalue())


def parse_iou_thresholds(text: str) -> List[float]:
    """
    IoU thresholds from '0.5', '0.2,0.5,0.75' or a 'lo:hi[:step]' range

    A range includes both ends and steps by 0.05 unless a step is given.
    """
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError(text)
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 0.05
            if step <= 0 or hi < lo:
                raise ValueError(text)
            count = int(round((hi - lo) / step)) + 1
            thresholds = [round(lo + i * step, 6) for i in range(count)]
        else:
            thresholds = [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot read IoU thresholds from '{text}'", MODULE) from exc
    if not thresholds or not all(0.0 < d < 1.0 for d in thresholds):
        raise ConfigError(f"IoU thresholds must lie in (0, 1), got '{text}'", MODULE)
    return thresholds


def write_threshold_csv(path, results: "OrderedDict[float, MapResult]"):
    """One 'iou,map' row per threshold, then their mean"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["iou", "map"])
    for delta, result in results.items():
        writer.writerow([f"{delta:.2f}", f"{result.mean:.6f}"])
    mean = float(np.mean([r.mean for r in results.values()])) if results else 0.0
    writer.writerow(["mean", f"{mean:.6f}"])
    return FileManager.atomic_write_text(path, buffer.getvalue())

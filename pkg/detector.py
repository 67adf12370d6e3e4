#!/usr/bin/env python3
"""
Detection engine for the LSTR detector
propose -> short-term relation -> temporal window -> relation graph ->
classify -> link, per video
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from data_synth import ClipSample
from linking_eval import DetectionRecord, VideoTrack, link_tubelets, track_records
from long_term_relation import RelationGraph, TemporalWindow, top_neighbors
from lstr_model import LSTRModel
from short_term_relation import AttentionMap
from tpn import ClipFeature
from tubelet_geometry import Tubelet


@dataclass
class VideoDetections:
    """Scored clip tubelets and linked tracks of one video"""

    video_id: str
    per_clip: List[List[Tubelet]] = field(default_factory=list)
    tracks: List[VideoTrack] = field(default_factory=list)

    def frame_records(self, clip_stride: int) -> List[DetectionRecord]:
        """One record per tubelet, frame and class"""
        records = []
        for c, tubelets in enumerate(self.per_clip):
            for tub in tubelets:
                for t in range(tub.T):
                    frame = c * clip_stride + t
                    for k, score in enumerate(tub.class_scores):
                        records.append(DetectionRecord(self.video_id, c, frame, k, float(score), tub.boxes[t]))
        return records

    def track_records(self) -> List[DetectionRecord]:
        return [r for track in self.tracks for r in track_records(track)]


class LSTRDetector:
    """Runs a trained model over whole videos"""

    def __init__(self, model: LSTRModel):
        self.model = model
        self.cfg = model.cfg

    def clip_proposals(self, clips: Sequence[ClipSample]):
        """Per clip: (feature, proposals, fused N x d features)"""
        features: List[ClipFeature] = []
        proposals: List[List[Tubelet]] = []
        vectors: List[np.ndarray] = []
        for c, clip in enumerate(clips):
            feature = self.model.clip_feature(clip.frames)
            tubelets = self.model.proposals(self.model.tpn(feature), c)
            features.append(feature)
            proposals.append(tubelets)
            vectors.append(self.model.tubelet_features(feature, tubelets))
        return features, proposals, vectors

    def detect_video(self, clips: Sequence[ClipSample]) -> VideoDetections:
        video_id = clips[0].video_id if clips else ""
        _, proposals, vectors = self.clip_proposals(clips)
        result = VideoDetections(video_id)
        for m in range(len(clips)):
            window = self.model.window(proposals, vectors, m)
            scores = self.model.class_scores(window)
            result.per_clip.append([t.with_scores(class_scores=scores[i]) for i, t in enumerate(proposals[m])])
        if result.per_clip:
            result.tracks = link_tubelets(result.per_clip,
                                          link_iou_weight=float(self.cfg["link.iou_weight"]),
                                          score_threshold=float(self.cfg["link.score_threshold"]),
                                          video_id=video_id,
                                          clip_stride=self.cfg.clip_stride)
        return result

    def detect(self, videos: Dict[str, List[ClipSample]], progress=None, task=None) -> List[VideoDetections]:
        results = []
        for video_id in sorted(videos):
            results.append(self.detect_video(videos[video_id]))
            if progress is not None:
                progress.update(task, advance=1, status=video_id)
        return results

    # -- diagnostics ------------------------------------------------------

    def attention(self, clips: Sequence[ClipSample], clip_index: int, tubelet_index: int) -> AttentionMap:
        """Short-term attention map of one proposal"""
        clip = clips[clip_index]
        feature = self.model.clip_feature(clip.frames)
        tubelets = self.model.proposals(self.model.tpn(feature), clip_index)
        if not 0 <= tubelet_index < len(tubelets):
            raise IndexError(f"clip {clip_index} has {len(tubelets)} proposals, asked for {tubelet_index}")
        return self.model.short_term.attention(feature, tubelets[tubelet_index])

    def neighbors(self, clips: Sequence[ClipSample], clip_index: int, tubelet_index: int,
                  k: Optional[int] = None):
        """Top-k relation-graph neighbours (clip, tubelet, weight) of one center-clip proposal"""
        _, proposals, vectors = self.clip_proposals(clips)
        window: TemporalWindow = self.model.window(proposals, vectors, clip_index)
        if not 0 <= tubelet_index < window.center_size:
            raise IndexError(f"clip {clip_index} has {window.center_size} proposals, asked for {tubelet_index}")
        graph: RelationGraph = self.model.long_term.graph(window)
        return top_neighbors(graph, window, tubelet_index, k or int(self.cfg["long_term.neighbors_k"]))

#!/usr/bin/env python3
"""
LSTR model assembly
Builds every trainable stage over one shared parameter registry
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from long_term_relation import LongTermRelation, TemporalWindow, build_window
from numerics import ParameterSet
from run_config import RunConfig
from short_term_relation import ShortTermRelation
from tpn import Backbone, ClipFeature, TpnHeads, TpnOutput, propose
from tubelet_geometry import Tubelet, anchor_tubelet_boxes


class LSTRModel:
    """
    Backbone, TPN heads, short-term relation and long-term relation

    Parameter names: backbone.*, tpn.*, short_term.*, long_term.*, classifier.*
    """

    def __init__(self, cfg: RunConfig, rng_seed: Optional[int] = None):
        self.cfg = cfg
        self.params = ParameterSet()
        rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
        size = int(cfg["data.image_size"])
        self.image_size: Tuple[int, int] = (size, size)
        self.backbone_cfg = cfg.backbone_config()
        self.grid = cfg.anchor_grid()
        self.anchors = anchor_tubelet_boxes(self.grid)
        channels = self.backbone_cfg.out_channels

        self.backbone = Backbone(self.backbone_cfg, self.params, rng)
        self.heads = TpnHeads(self.grid, channels, self.params, rng)
        self.short_term = ShortTermRelation(
            cfg.clip_length, channels, self.params, rng,
            embed_dim=int(cfg["short_term.embed_dim"]),
            use_context=bool(cfg["short_term.use_context"]),
            use_erasing=bool(cfg["short_term.use_erasing"]),
        )
        self.long_term = LongTermRelation(
            self.short_term.output_dim, cfg.num_outputs, self.params, rng,
            gamma=float(cfg["long_term.gamma"]),
            enabled=bool(cfg["long_term.enabled"]),
            edge_terms=str(cfg["long_term.edge_terms"]),
            dropout=float(cfg["classifier.dropout"]),
            multi_label=cfg.multi_label,
        )

    @property
    def num_classes(self) -> int:
        return int(self.cfg["data.num_classes"])

    @property
    def feature_dim(self) -> int:
        return self.short_term.output_dim

    def clip_feature(self, frames: np.ndarray) -> ClipFeature:
        return self.backbone.forward(frames)[0]

    def tpn(self, feature: ClipFeature) -> TpnOutput:
        return self.heads.forward(feature)[0]

    def proposals(self, out: TpnOutput, clip_index: int, keep_top: Optional[int] = None) -> List[Tubelet]:
        return propose(out, self.grid, self.image_size,
                       iou_threshold=float(self.cfg["tpn.nms_threshold"]),
                       keep_top=int(keep_top or self.cfg["tpn.proposal_cap"]),
                       clip_index=clip_index, anchors=self.anchors)

    def tubelet_features(self, feature: ClipFeature, tubelets: Sequence[Tubelet]) -> np.ndarray:
        """N x d fused short-term features of one clip's tubelets"""
        if not tubelets:
            return np.zeros((0, self.feature_dim))
        return np.stack([self.short_term.forward(feature, t)[0].values for t in tubelets])

    def window(self, per_clip_tubelets: Sequence[Sequence[Tubelet]], per_clip_features: Sequence[np.ndarray],
               m: int, radius: Optional[int] = None) -> TemporalWindow:
        w = int(self.cfg["long_term.radius"]) if radius is None else radius
        return build_window(per_clip_tubelets, m, w, per_clip_features, self.feature_dim)

    def class_scores(self, window: TemporalWindow) -> np.ndarray:
        """Center-member scores over the K action classes (background column dropped)"""
        scores = self.long_term.predict(window)
        return scores[:, :self.num_classes]

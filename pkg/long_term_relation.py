#!/usr/bin/env python3
"""
Long-Term Relation Module
Cross-clip relation graph over the tubelets of a temporal window, one
graph convolution and the final action classifier
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError
from numerics import (
    ParameterSet, as_tensor, sigmoid, softmax_rows, softmax_rows_backward,
)
from tubelet_geometry import Tubelet, pairwise_tubelet_iou

MODULE = "long-term-relation"

EDGE_TERMS = ("both", "similarity", "overlap")


@dataclass
class TemporalWindow:
    """
    Tubelets of clips m-w..m+w stacked into one member list

    features:       N x d member features (X)
    boxes:          N x T x 4 member box sequences (zeros for padding)
    clip_offsets:   N clip offsets relative to the center clip, in -w..w
    source_indices: N tubelet indices inside their clip (-1 for padding)
    center_rows:    rows of the center clip's members (X_m)
    """

    center_clip: int
    radius: int
    features: np.ndarray
    boxes: np.ndarray
    clip_offsets: np.ndarray
    source_indices: np.ndarray
    center_rows: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def center_size(self) -> int:
        return int(self.center_rows.size)

    @property
    def padding_mask(self) -> np.ndarray:
        return self.source_indices < 0

    @property
    def clip_indices(self) -> np.ndarray:
        return self.center_clip + self.clip_offsets


@dataclass
class RelationGraph:
    """Row-stochastic N_m x N edge weights"""

    weights: np.ndarray


@dataclass
class RelationParams:
    """phi(f) = f @ phi_weight + phi_bias, gamma weighs the overlap term, gcn_weight is W"""

    phi_weight: np.ndarray
    phi_bias: np.ndarray
    gamma: float = 1.0
    gcn_weight: Optional[np.ndarray] = None

    def __post_init__(self):
        self.phi_weight = as_tensor(self.phi_weight)
        self.phi_bias = as_tensor(self.phi_bias)
        d = self.phi_weight.shape[0]
        if self.phi_weight.shape != (d, d) or self.phi_bias.shape != (d,):
            raise DimensionError("phi must be a square d x d map with a d-wide bias", MODULE)
        if self.gcn_weight is None:
            self.gcn_weight = np.eye(d)
        self.gcn_weight = as_tensor(self.gcn_weight)
        if self.gcn_weight.shape != (d, d):
            raise DimensionError(f"gcn weight must be {d} x {d}, got {self.gcn_weight.shape}", MODULE)

    @property
    def dim(self) -> int:
        return self.phi_weight.shape[0]


# ---------------------------------------------------------------------------
# Window, edges, graph convolution
# ---------------------------------------------------------------------------

def build_window(per_clip_tubelets: Sequence[Sequence[Tubelet]], m: int, w: int,
                 per_clip_features: Optional[Sequence[np.ndarray]] = None,
                 feature_dim: Optional[int] = None) -> TemporalWindow:
    """
    Concatenate the members of clips m-w..m+w

    Clip slots outside the video are filled by one zero-feature, zero-box
    placeholder each.

    Args:
        per_clip_tubelets: tubelet lists, one per clip of the video
        m: center clip index
        w: window radius (>= 0)
        per_clip_features: per clip an N_c x d feature matrix aligned with its tubelets
        feature_dim: member feature width when no features are given

    Returns:
        TemporalWindow
    """
    if w < 0:
        raise DimensionError(f"window radius must be >= 0, got {w}", MODULE)
    n_clips = len(per_clip_tubelets)
    if not 0 <= m < n_clips:
        raise DimensionError(f"center clip {m} outside 0..{n_clips - 1}", MODULE)
    if per_clip_features is not None:
        if len(per_clip_features) != n_clips:
            raise DimensionError("one feature matrix per clip is required", MODULE)
        widths = {np.asarray(f).shape[1] for f in per_clip_features if np.asarray(f).ndim == 2}
        if len(widths) > 1:
            raise DimensionError(f"inconsistent feature widths {sorted(widths)}", MODULE)
        d = widths.pop() if widths else (feature_dim or 0)
    else:
        d = feature_dim or 0
    T = next((tub.T for clip in per_clip_tubelets for tub in clip), 1)

    features: List[np.ndarray] = []
    boxes: List[np.ndarray] = []
    offsets: List[int] = []
    sources: List[int] = []
    center_rows: List[int] = []
    for offset in range(-w, w + 1):
        c = m + offset
        if c < 0 or c >= n_clips:
            features.append(np.zeros(d))
            boxes.append(np.zeros((T, 4)))
            offsets.append(offset)
            sources.append(-1)
            continue
        clip = per_clip_tubelets[c]
        mat = None
        if per_clip_features is not None:
            mat = as_tensor(per_clip_features[c]).reshape(len(clip), d)
        for i, tub in enumerate(clip):
            if tub.T != T:
                raise DimensionError(f"tubelet length {tub.T} differs from {T}", MODULE)
            if offset == 0:
                center_rows.append(len(features))
            features.append(mat[i] if mat is not None else np.zeros(d))
            boxes.append(tub.boxes)
            offsets.append(offset)
            sources.append(i)

    return TemporalWindow(
        center_clip=m,
        radius=w,
        features=np.array(features, dtype=np.float64).reshape(len(features), d),
        boxes=np.array(boxes, dtype=np.float64).reshape(len(boxes), T, 4),
        clip_offsets=np.array(offsets, dtype=np.int64),
        source_indices=np.array(sources, dtype=np.int64),
        center_rows=np.array(center_rows, dtype=np.int64),
    )


def phi(features: np.ndarray, params: RelationParams) -> np.ndarray:
    return features @ params.phi_weight + params.phi_bias


def overlap_matrix(window: TemporalWindow) -> np.ndarray:
    """Positional box-sequence IoU of center members against all members; padding gets 0"""
    iou = pairwise_tubelet_iou(window.boxes[window.center_rows], window.boxes)
    iou[:, window.padding_mask] = 0.0
    return iou


def edge_scores(window: TemporalWindow, params: RelationParams,
                use_similarity: bool = True, use_overlap: bool = True) -> np.ndarray:
    """e_ij = phi(f_i) . phi(f_j) + gamma * iou(h_i, h_j) for center members i"""
    if window.features.shape[1] != params.dim:
        raise DimensionError(
            f"member features have width {window.features.shape[1]}, phi expects {params.dim}", MODULE)
    scores = np.zeros((window.center_size, window.size))
    if use_similarity:
        transformed = phi(window.features, params)
        scores += transformed[window.center_rows] @ transformed.T
    if use_overlap:
        scores += params.gamma * overlap_matrix(window)
    return scores


def normalize_graph(scores: np.ndarray) -> RelationGraph:
    scores = as_tensor(scores)
    if scores.ndim != 2 or scores.shape[1] < 1:
        raise DimensionError(f"edge scores must be N_m x N with N >= 1, got {scores.shape}", MODULE)
    if scores.shape[0] == 0:
        return RelationGraph(np.zeros_like(scores))
    return RelationGraph(softmax_rows(scores))


def gcn_forward(graph: RelationGraph, window: TemporalWindow, params: RelationParams) -> np.ndarray:
    """Z_m = G X W"""
    G, X = graph.weights, window.features
    if G.shape[1] != X.shape[0]:
        raise DimensionError(f"graph {G.shape} does not match {X.shape[0]} members", MODULE)
    if X.shape[1] != params.gcn_weight.shape[0]:
        raise DimensionError(f"features of width {X.shape[1]} vs W {params.gcn_weight.shape}", MODULE)
    return G @ X @ params.gcn_weight


def top_neighbors(graph: RelationGraph, window: TemporalWindow, row: int,
                  k: int = 10) -> List[Tuple[int, int, float]]:
    """(clip index, tubelet index, weight) of the k heaviest edges of one center member"""
    weights = graph.weights[row]
    order = np.argsort(-weights, kind="stable")[:k]
    clips = window.clip_indices
    return [(int(clips[j]), int(window.source_indices[j]), float(weights[j])) for j in order]


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout mask (kept entries scaled by 1/(1-p))"""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {p}")
    return (rng.random(shape) >= p) / (1.0 - p)


def classifier_logits(z: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                      training: bool = False, rng_seed: int = 0,
                      dropout: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Affine scores after optional dropout; returns (logits, dropout mask)"""
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != weight.shape[0]:
        raise DimensionError(f"classifier expects width {weight.shape[0]}, got {z.shape}", MODULE)
    if training and dropout > 0.0:
        mask = dropout_mask(z.shape, dropout, np.random.default_rng(rng_seed))
    else:
        mask = np.ones_like(z)
    return (z * mask) @ weight + bias, mask


def scores_from_logits(logits: np.ndarray, multi_label: bool = False) -> np.ndarray:
    if logits.shape[0] == 0:
        return logits.copy()
    return sigmoid(logits) if multi_label else softmax_rows(logits)


def classify(z: np.ndarray, weight: np.ndarray, bias: np.ndarray, multi_label: bool = False,
             training: bool = False, rng_seed: int = 0, dropout: float = 0.5) -> np.ndarray:
    """
    Dropout (training only), affine d -> K, then softmax rows or elementwise sigmoid

    Args:
        z: N_m x d relation-aware features
        weight: d x K classifier weight (K >= 2)
        bias: K classifier bias
        multi_label: sigmoid instead of softmax
        training: enable dropout
        rng_seed: dropout mask seed
        dropout: dropout ratio

    Returns:
        N_m x K class scores
    """
    if weight.shape[1] < 2:
        raise DimensionError("classifier needs K >= 2 outputs", MODULE)
    logits, _ = classifier_logits(z, weight, bias, training, rng_seed, dropout)
    return scores_from_logits(logits, multi_label)


# ---------------------------------------------------------------------------
# Trainable stage
# ---------------------------------------------------------------------------

class LongTermRelation:
    """
    Relation graph, GCN and classifier with parameters registered under
    'long_term.*' and 'classifier.*'
    """

    def __init__(self, dim: int, num_outputs: int, params: ParameterSet,
                 rng: Optional[np.random.Generator] = None, gamma: float = 1.0,
                 enabled: bool = True, edge_terms: str = "both", dropout: float = 0.5,
                 multi_label: bool = False):
        if edge_terms not in EDGE_TERMS:
            raise ValueError(f"edge_terms must be one of {EDGE_TERMS}, got '{edge_terms}'")
        self.dim = dim
        self.num_outputs = num_outputs
        self.params = params
        self.gamma = gamma
        self.enabled = enabled
        self.edge_terms = edge_terms
        self.dropout = dropout
        self.multi_label = multi_label
        if rng is None:
            return
        params.add("long_term.phi.weight", rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim)))
        params.add("long_term.phi.bias", np.zeros(dim))
        params.add("long_term.gcn.weight", np.eye(dim))
        params.add("classifier.weight", rng.normal(0.0, 0.01, (dim, num_outputs)))
        params.add("classifier.bias", np.zeros(num_outputs))

    @property
    def use_similarity(self) -> bool:
        return self.edge_terms in ("both", "similarity")

    @property
    def use_overlap(self) -> bool:
        return self.edge_terms in ("both", "overlap")

    def relation_params(self) -> RelationParams:
        return RelationParams(self.params["long_term.phi.weight"].value,
                              self.params["long_term.phi.bias"].value,
                              self.gamma,
                              self.params["long_term.gcn.weight"].value)

    def graph(self, window: TemporalWindow) -> RelationGraph:
        rp = self.relation_params()
        return normalize_graph(edge_scores(window, rp, self.use_similarity, self.use_overlap))

    def forward(self, window: TemporalWindow, training: bool = False,
                rng_seed: int = 0) -> Tuple[np.ndarray, dict]:
        """Classifier logits for the center members of the window"""
        X = window.features
        rows = window.center_rows
        cache = {"X": X, "rows": rows}
        if self.enabled and rows.size:
            rp = self.relation_params()
            P = phi(X, rp)
            scores = np.zeros((rows.size, X.shape[0]))
            if self.use_similarity:
                scores += P[rows] @ P.T
            if self.use_overlap:
                scores += rp.gamma * overlap_matrix(window)
            G = normalize_graph(scores).weights
            H = G @ X
            Z = H @ rp.gcn_weight
            cache.update(P=P, G=G, H=H)
        else:
            Z = X[rows]
        logits, mask = classifier_logits(Z, self.params["classifier.weight"].value,
                                         self.params["classifier.bias"].value,
                                         training, rng_seed, self.dropout)
        cache.update(Z=Z, mask=mask)
        return logits, cache

    def predict(self, window: TemporalWindow) -> np.ndarray:
        logits, _ = self.forward(window)
        return scores_from_logits(logits, self.multi_label)

    def backward(self, dlogits: np.ndarray, cache: dict) -> np.ndarray:
        """Accumulate parameter gradients; returns dL/dX for every window member"""
        X, rows, Z, mask = cache["X"], cache["rows"], cache["Z"], cache["mask"]
        cw = self.params["classifier.weight"]
        cw.accumulate((Z * mask).T @ dlogits)
        self.params["classifier.bias"].accumulate(dlogits.sum(axis=0))
        dZ = (dlogits @ cw.value.T) * mask
        dX = np.zeros_like(X)
        if "G" not in cache:
            np.add.at(dX, rows, dZ)
            return dX

        gw = self.params["long_term.gcn.weight"]
        G, H, P = cache["G"], cache["H"], cache["P"]
        gw.accumulate(H.T @ dZ)
        dH = dZ @ gw.value.T
        dG = dH @ X.T
        dX += G.T @ dH
        if self.use_similarity:
            dS = softmax_rows_backward(G, dG)
            dP = dS.T @ P[rows]
            np.add.at(dP, rows, dS @ P)
            pw = self.params["long_term.phi.weight"]
            pw.accumulate(X.T @ dP)
            self.params["long_term.phi.bias"].accumulate(dP.sum(axis=0))
            dX += dP @ pw.value.T
        return dX

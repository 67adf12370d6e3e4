#!/usr/bin/env python3
"""
Short-Term Relation Module
Human-context relation inside one clip: 3D RoI pooling, adaptive kernel
prediction, adversarial erasing, spatio-temporal attention, attention
pooling and human/context feature fusion
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from errors import DimensionError
from numerics import (
    ParameterSet, as_tensor, conv2d_same, conv2d_same_backward, sigmoid,
    sigmoid_backward,
)
from tpn import ClipFeature
from tubelet_geometry import Tubelet

MODULE = "short-term-relation"
POOL_SIZE = 7


@dataclass
class HumanRepresentation:
    """RoI-pooled T x 7 x 7 x C block of one tubelet"""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[1:3] != (POOL_SIZE, POOL_SIZE):
            raise DimensionError(f"human representation must be T x 7 x 7 x C, got {self.values.shape}", MODULE)


@dataclass
class AdaptiveKernel:
    """Tubelet-specific T x 3 x 3 convolution kernel"""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != (3, 3):
            raise DimensionError(f"adaptive kernel must be T x 3 x 3, got {self.values.shape}", MODULE)


@dataclass
class AttentionMap:
    """Sigmoid attention over the T x H' x W' feature lattice"""

    values: np.ndarray


@dataclass
class FusedTubeletFeature:
    """[human embedding (d_h); attention-pooled context (C)]"""

    values: np.ndarray
    d_h: int

    @property
    def human(self) -> np.ndarray:
        return self.values[:self.d_h]

    @property
    def context(self) -> np.ndarray:
        return self.values[self.d_h:]


# ---------------------------------------------------------------------------
# 3D RoI pooling
# ---------------------------------------------------------------------------

def _bin_edges(lo: float, hi: float, size: int, pool: int) -> List[Tuple[int, int]]:
    """Integer cell ranges [a, b) of each pooling bin along one axis"""
    edges = []
    span = hi - lo
    for p in range(pool):
        start = lo + span * p / pool
        end = lo + span * (p + 1) / pool
        a = int(math.floor(start + 1e-9))
        b = int(math.ceil(end - 1e-9))
        if b <= a:
            b = a + 1
        a, b = max(a, 0), min(b, size)
        if b <= a:
            # bin fell off the grid: nearest single cell
            c = min(max(int(math.floor(0.5 * (start + end))), 0), size - 1)
            a, b = c, c + 1
        edges.append((a, b))
    return edges


def roi_pool_3d_with_indices(feature: ClipFeature, tubelet: Tubelet,
                             pool: int = POOL_SIZE) -> Tuple[HumanRepresentation, np.ndarray]:
    """
    RoI max pooling frame by frame

    Returns:
        (HumanRepresentation, argmax) where argmax[t, p, q, c] is the flat
        spatial index (row * W + col) that produced each output value
    """
    F = feature.values
    T, H, W, C = F.shape
    if tubelet.T != T:
        raise DimensionError(f"tubelet has {tubelet.T} frames, feature has {T}", MODULE)
    out = np.zeros((T, pool, pool, C))
    arg = np.zeros((T, pool, pool, C), dtype=np.int64)
    channels = np.arange(C)
    for t in range(T):
        x1, y1, x2, y2 = tubelet.boxes[t] / feature.stride
        rows = _bin_edges(y1, y2, H, pool)
        cols = _bin_edges(x1, x2, W, pool)
        for p, (r0, r1) in enumerate(rows):
            for q, (c0, c1) in enumerate(cols):
                region = F[t, r0:r1, c0:c1, :].reshape(-1, C)
                local = region.argmax(axis=0)
                out[t, p, q] = region[local, channels]
                width = c1 - c0
                arg[t, p, q] = (r0 + local // width) * W + (c0 + local % width)
    return HumanRepresentation(out), arg


def roi_pool_3d(feature: ClipFeature, tubelet: Tubelet) -> HumanRepresentation:
    """Project each box onto the feature grid and max-pool a 7 x 7 cell grid"""
    return roi_pool_3d_with_indices(feature, tubelet)[0]


def roi_pool_3d_backward(dhuman: np.ndarray, arg: np.ndarray, feature_shape) -> np.ndarray:
    T, H, W, C = feature_shape
    dF = np.zeros((T, H * W, C))
    pool = arg.shape[1]
    channels = np.broadcast_to(np.arange(C), (pool * pool, C))
    for t in range(T):
        np.add.at(dF[t], (arg[t].reshape(-1, C), channels), dhuman[t].reshape(-1, C))
    return dF.reshape(T, H, W, C)


# ---------------------------------------------------------------------------
# Erasing, attention, pooling, fusion
# ---------------------------------------------------------------------------

def erase_mask(feature: ClipFeature, tubelet: Tubelet) -> np.ndarray:
    """T x H' x W' boolean mask of cells whose centres lie inside the tubelet box of their frame"""
    T, H, W, _ = feature.shape
    cy = (np.arange(H) + 0.5) * feature.stride
    cx = (np.arange(W) + 0.5) * feature.stride
    b = tubelet.boxes
    inside_y = (cy[None, :] >= b[:, 1:2]) & (cy[None, :] <= b[:, 3:4])
    inside_x = (cx[None, :] >= b[:, 0:1]) & (cx[None, :] <= b[:, 2:3])
    return inside_y[:, :, None] & inside_x[:, None, :]


def erase_tubelet(feature: ClipFeature, tubelet: Tubelet) -> ClipFeature:
    """F^e: zero every channel of the cells covered by the tubelet"""
    mask = erase_mask(feature, tubelet)
    return ClipFeature(np.where(mask[..., None], 0.0, feature.values), feature.stride)


def reduce_channels(feature: ClipFeature, weight: np.ndarray, bias: float = 0.0) -> np.ndarray:
    """Shared 1x1x1 projection of C channels to one response per cell"""
    if weight.shape != (feature.shape[3],):
        raise DimensionError(f"projection weight {weight.shape} vs {feature.shape[3]} channels", MODULE)
    return feature.values @ weight + bias


def attention_map(erased: ClipFeature, kernel: AdaptiveKernel,
                  projection_weight: Optional[np.ndarray] = None,
                  projection_bias: float = 0.0) -> AttentionMap:
    """
    A = sigmoid(K * R) frame by frame, R the channel-reduced erased feature

    Args:
        erased: clip feature (F^e)
        kernel: adaptive T x 3 x 3 kernel
        projection_weight: C-vector of the shared channel reduction (ones if None)
        projection_bias: scalar added after the reduction

    Returns:
        AttentionMap of shape T x H' x W'
    """
    T = erased.T
    if kernel.values.shape[0] != T:
        raise DimensionError(f"kernel has {kernel.values.shape[0]} frames, feature has {T}", MODULE)
    if projection_weight is None:
        projection_weight = np.ones(erased.shape[3])
    reduced = reduce_channels(erased, as_tensor(projection_weight), projection_bias)
    scores = np.stack([conv2d_same(reduced[t], kernel.values[t]) for t in range(T)])
    return AttentionMap(sigmoid(scores))


def attention_pool_3d(feature: ClipFeature, attn: AttentionMap) -> np.ndarray:
    """Context vector: attention-weighted sum of feature vectors over all locations"""
    if attn.values.shape != feature.shape[:3]:
        raise DimensionError(f"attention {attn.values.shape} vs feature {feature.shape[:3]}", MODULE)
    return np.einsum("thw,thwc->c", attn.values, feature.values)


def fuse_features(human: HumanRepresentation, context: np.ndarray,
                  embed_weight: np.ndarray, embed_bias: np.ndarray) -> FusedTubeletFeature:
    """f = [affine(flatten(F^h)); context]"""
    flat = human.values.reshape(-1)
    if embed_weight.shape[0] != flat.size:
        raise DimensionError(f"embedding expects {embed_weight.shape[0]} inputs, got {flat.size}", MODULE)
    embedded = flat @ embed_weight + embed_bias
    return FusedTubeletFeature(np.concatenate([embedded, np.asarray(context, dtype=np.float64)]),
                               embedded.size)


# ---------------------------------------------------------------------------
# Trainable stage
# ---------------------------------------------------------------------------

class ShortTermRelation:
    """
    Per-tubelet short-term relation with parameters

    theta: fully-connected map from flatten(F^h) to the T x 3 x 3 kernel
    proj:  shared channel reduction used before the frame-wise convolution
    embed: projection of F^h to the d_h-wide human embedding
    """

    def __init__(self, T: int, channels: int, params: ParameterSet,
                 rng: Optional[np.random.Generator] = None, embed_dim: int = 32,
                 use_context: bool = True, use_erasing: bool = True,
                 prefix: str = "short_term"):
        self.T = T
        self.channels = channels
        self.embed_dim = embed_dim
        self.use_context = use_context
        self.use_erasing = use_erasing
        self.params = params
        self.prefix = prefix
        if rng is None:
            return
        fan_in = T * POOL_SIZE * POOL_SIZE * channels
        params.add(f"{prefix}.theta.weight", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, T * 9)))
        params.add(f"{prefix}.theta.bias", np.zeros(T * 9))
        params.add(f"{prefix}.proj.weight", rng.normal(0.0, 1.0 / math.sqrt(channels), channels))
        params.add(f"{prefix}.proj.bias", np.zeros(1))
        params.add(f"{prefix}.embed.weight", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, embed_dim)))
        params.add(f"{prefix}.embed.bias", np.zeros(embed_dim))

    @property
    def output_dim(self) -> int:
        return self.embed_dim + self.channels

    def _p(self, name: str):
        return self.params[f"{self.prefix}.{name}"]

    def kernel(self, human: HumanRepresentation) -> AdaptiveKernel:
        return adaptive_kernel(human, self._p("theta.weight").value, self._p("theta.bias").value)

    def forward(self, feature: ClipFeature, tubelet: Tubelet,
                keep_attention: bool = False) -> Tuple[FusedTubeletFeature, dict]:
        """Fused feature of one tubelet plus the cache needed by backward"""
        human, arg = roi_pool_3d_with_indices(feature, tubelet)
        flat = human.values.reshape(-1)
        cache = {"arg": arg, "flat": flat, "shape": feature.shape}
        if not self.use_context:
            context = np.zeros(self.channels)
        else:
            if self.use_erasing:
                keep = ~erase_mask(feature, tubelet)
                source = ClipFeature(feature.values * keep[..., None], feature.stride)
            else:
                keep = None
                source = feature
            kernel = self.kernel(human)
            reduced = reduce_channels(source, self._p("proj.weight").value, self._p("proj.bias").value[0])
            scores = np.stack([conv2d_same(reduced[t], kernel.values[t]) for t in range(self.T)])
            attn = AttentionMap(sigmoid(scores))
            context = attention_pool_3d(source, attn)
            cache.update(keep=keep, source=source.values, kernel=kernel.values,
                         reduced=reduced, attn=attn.values)
        fused = fuse_features(human, context, self._p("embed.weight").value, self._p("embed.bias").value)
        if keep_attention and self.use_context:
            cache["attention_map"] = attn
        return fused, cache

    def backward(self, dfused: np.ndarray, cache: dict) -> np.ndarray:
        """Accumulate parameter gradients; returns dL/dF for the clip feature"""
        d_h = self.embed_dim
        flat = cache["flat"]
        dhuman_embed, dcontext = dfused[:d_h], dfused[d_h:]
        ew = self._p("embed.weight")
        ew.accumulate(np.outer(flat, dhuman_embed))
        self._p("embed.bias").accumulate(dhuman_embed)
        dflat = ew.value @ dhuman_embed
        dF = np.zeros(cache["shape"])

        if self.use_context:
            source, attn = cache["source"], cache["attn"]
            dsource = attn[..., None] * dcontext
            dattn = source @ dcontext
            dscores = sigmoid_backward(attn, dattn)
            kernel, reduced = cache["kernel"], cache["reduced"]
            dkernel = np.zeros_like(kernel)
            dreduced = np.zeros_like(reduced)
            for t in range(self.T):
                dreduced[t], dkernel[t] = conv2d_same_backward(reduced[t], kernel[t], dscores[t])
            pw = self._p("proj.weight")
            pw.accumulate(np.einsum("thw,thwc->c", dreduced, source))
            self._p("proj.bias").accumulate(np.array([dreduced.sum()]))
            dsource += dreduced[..., None] * pw.value
            tw = self._p("theta.weight")
            tw.accumulate(np.outer(flat, dkernel.reshape(-1)))
            self._p("theta.bias").accumulate(dkernel.reshape(-1))
            dflat = dflat + tw.value @ dkernel.reshape(-1)
            keep = cache["keep"]
            dF += dsource if keep is None else dsource * keep[..., None]

        pool = cache["arg"].shape[1]
        dhuman = dflat.reshape(self.T, pool, pool, -1)
        dF += roi_pool_3d_backward(dhuman, cache["arg"], cache["shape"])
        return dF

    def attention(self, feature: ClipFeature, tubelet: Tubelet) -> AttentionMap:
        """Attention map of one tubelet (for diagnostics)"""
        _, cache = self.forward(feature, tubelet, keep_attention=True)
        if "attention_map" not in cache:
            return AttentionMap(np.zeros(feature.shape[:3]))
        return cache["attention_map"]


def adaptive_kernel(human: HumanRepresentation, theta_weight: np.ndarray,
                    theta_bias: np.ndarray) -> AdaptiveKernel:
    """K^h = reshape(flatten(F^h) @ theta + b) to T x 3 x 3"""
    flat = human.values.reshape(-1)
    if theta_weight.shape[0] != flat.size:
        raise DimensionError(f"kernel map expects {theta_weight.shape[0]} inputs, got {flat.size}", MODULE)
    T = human.values.shape[0]
    return AdaptiveKernel((flat @ theta_weight + theta_bias).reshape(T, 3, 3))

#!/usr/bin/env python3
"""
Tubelet Proposal Network
Factorized spatio-temporal backbone (1 x k x k then l x 1 x 1 per stage,
no temporal downsampling), sibling regression/actionness heads, the
proposal objective and proposal extraction
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError
from numerics import (
    ParameterSet, as_tensor, classification_loss_with_grad, relu, relu_backward,
    smooth_l1, smooth_l1_backward, softmax_rows,
)
from tubelet_geometry import (
    POSITIVE, AnchorAssignment, AnchorGrid, Tubelet, anchor_tubelet_boxes,
    decode_deltas, nms_indices,
)

MODULE = "tpn"


@dataclass
class BackboneConfig:
    """Shape of the desk-scale factorized backbone"""

    T: int = 8
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    channels: Sequence[int] = (8, 16, 32)
    in_channels: int = 3
    pool: int = 2

    @property
    def total_stride(self) -> int:
        return self.pool ** len(self.channels)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


@dataclass
class ClipFeature:
    """Backbone output F of shape T x H' x W' x C"""

    values: np.ndarray
    stride: int

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.values.shape

    @property
    def T(self) -> int:
        return self.values.shape[0]


@dataclass
class TpnOutput:
    """Per-anchor 4T regression values and 2 actionness logits"""

    regression: np.ndarray
    actionness_logits: np.ndarray

    def actionness(self) -> np.ndarray:
        return softmax_rows(self.actionness_logits)[:, 1]


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

def _spatial_columns(x: np.ndarray, k: int) -> np.ndarray:
    """im2col for a 1 x k x k convolution with 'same' zero padding"""
    T, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # T, H, W, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(T * H * W, k * k * C)


def _spatial_columns_backward(dcols: np.ndarray, shape, k: int) -> np.ndarray:
    T, H, W, C = shape
    p = k // 2
    d = dcols.reshape(T, H, W, k, k, C)
    dxp = np.zeros((T, H + 2 * p, W + 2 * p, C))
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + H, dj:dj + W, :] += d[:, :, :, di, dj, :]
    return dxp[:, p:p + H, p:p + W, :]


def _temporal_columns(x: np.ndarray, l: int) -> np.ndarray:
    """im2col for an l x 1 x 1 convolution, zero-padded in time"""
    T, H, W, C = x.shape
    p = l // 2
    xp = np.pad(x, ((p, p), (0, 0), (0, 0), (0, 0)))
    cols = np.stack([xp[dt:dt + T] for dt in range(l)], axis=3)  # T, H, W, l, C
    return cols.reshape(T * H * W, l * C)


def _temporal_columns_backward(dcols: np.ndarray, shape, l: int) -> np.ndarray:
    T, H, W, C = shape
    p = l // 2
    d = dcols.reshape(T, H, W, l, C)
    dxp = np.zeros((T + 2 * p, H, W, C))
    for dt in range(l):
        dxp[dt:dt + T] += d[:, :, :, dt, :]
    return dxp[p:p + T]


def _max_pool(x: np.ndarray, s: int) -> Tuple[np.ndarray, np.ndarray]:
    T, H, W, C = x.shape
    blocks = x.reshape(T, H // s, s, W // s, s, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(T, H // s, W // s, C, s * s)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _max_pool_backward(dout: np.ndarray, arg: np.ndarray, s: int) -> np.ndarray:
    T, Hp, Wp, C = dout.shape
    d = np.zeros((T, Hp, Wp, C, s * s))
    np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
    d = d.reshape(T, Hp, Wp, C, s, s).transpose(0, 1, 4, 2, 5, 3)
    return d.reshape(T, Hp * s, Wp * s, C)


class Backbone:
    """Stack of factorized convolution stages with spatial max pooling"""

    def __init__(self, cfg: BackboneConfig, params: ParameterSet,
                 rng: Optional[np.random.Generator] = None, prefix: str = "backbone"):
        """Register stage weights in params; with rng=None the weights must already exist"""
        self.cfg = cfg
        self.params = params
        self.names = [f"{prefix}.stage{s}" for s in range(len(cfg.channels))]
        if rng is None:
            return
        c_in = cfg.in_channels
        k, l = cfg.spatial_kernel, cfg.temporal_kernel
        for base, c_out in zip(self.names, cfg.channels):
            fan_in = k * k * c_in
            params.add(f"{base}.spatial.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, c_out)))
            params.add(f"{base}.spatial.bias", np.zeros(c_out))
            # temporal filter starts near identity on the centre tap
            temporal = rng.normal(0.0, 0.1 * np.sqrt(2.0 / (l * c_out)), (l, c_out, c_out))
            temporal[l // 2] += np.eye(c_out)
            params.add(f"{base}.temporal.weight", temporal.reshape(l * c_out, c_out))
            params.add(f"{base}.temporal.bias", np.zeros(c_out))
            c_in = c_out

    def forward(self, clip: np.ndarray) -> Tuple[ClipFeature, list]:
        """
        Run the backbone on one clip

        Args:
            clip: T x H x W x 3 array

        Returns:
            (ClipFeature, cache for backward)
        """
        x = as_tensor(clip)
        if x.ndim != 4 or x.shape[3] != self.cfg.in_channels:
            raise DimensionError(f"clip must be T x H x W x {self.cfg.in_channels}, got {x.shape}", MODULE)
        stride = self.cfg.total_stride
        if x.shape[1] % stride or x.shape[2] % stride:
            raise DimensionError(f"frame size {x.shape[1]}x{x.shape[2]} not divisible by {stride}", MODULE)
        k, l, s = self.cfg.spatial_kernel, self.cfg.temporal_kernel, self.cfg.pool
        cache = []
        for base in self.names:
            T, H, W, _ = x.shape
            ws, bs = self.params[f"{base}.spatial.weight"].value, self.params[f"{base}.spatial.bias"].value
            wt, bt = self.params[f"{base}.temporal.weight"].value, self.params[f"{base}.temporal.bias"].value
            cols_s = _spatial_columns(x, k)
            pre_s = (cols_s @ ws + bs).reshape(T, H, W, -1)
            act_s = relu(pre_s)
            cols_t = _temporal_columns(act_s, l)
            pre_t = (cols_t @ wt + bt).reshape(T, H, W, -1)
            act_t = relu(pre_t)
            pooled, arg = _max_pool(act_t, s)
            cache.append((base, x.shape, cols_s, pre_s, cols_t, pre_t, arg))
            x = pooled
        return ClipFeature(x, stride), cache

    def backward(self, dfeature: np.ndarray, cache: list):
        """Accumulate parameter gradients from dL/dF"""
        k, l, s = self.cfg.spatial_kernel, self.cfg.temporal_kernel, self.cfg.pool
        d = dfeature
        for base, in_shape, cols_s, pre_s, cols_t, pre_t, arg in reversed(cache):
            ws = self.params[f"{base}.spatial.weight"]
            wt = self.params[f"{base}.temporal.weight"]
            d = _max_pool_backward(d, arg, s)
            d = relu_backward(pre_t, d).reshape(-1, pre_t.shape[-1])
            wt.accumulate(cols_t.T @ d)
            self.params[f"{base}.temporal.bias"].accumulate(d.sum(axis=0))
            d = _temporal_columns_backward(d @ wt.value.T, pre_s.shape, l)
            d = relu_backward(pre_s, d).reshape(-1, pre_s.shape[-1])
            ws.accumulate(cols_s.T @ d)
            self.params[f"{base}.spatial.bias"].accumulate(d.sum(axis=0))
            if base == self.names[0]:
                break
            d = _spatial_columns_backward(d @ ws.value.T, in_shape, k)


def backbone_forward(clip: np.ndarray, cfg: BackboneConfig, params: Optional[ParameterSet] = None,
                     rng_seed: int = 0) -> ClipFeature:
    """Functional entry point: builds a backbone (fresh weights unless params given) and runs it"""
    if params is None:
        params = ParameterSet()
        return Backbone(cfg, params, np.random.default_rng(rng_seed)).forward(clip)[0]
    return Backbone(cfg, params).forward(clip)[0]


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

class TpnHeads:
    """1x1x1 regression and actionness layers over the time-flattened feature"""

    def __init__(self, grid: AnchorGrid, channels: int, params: ParameterSet,
                 rng: Optional[np.random.Generator] = None, prefix: str = "tpn"):
        self.grid = grid
        self.params = params
        self.prefix = prefix
        if rng is None:
            return
        fan_in = grid.T * channels
        a = grid.anchors_per_cell
        params.add(f"{prefix}.reg.weight", rng.normal(0.0, 0.001, (fan_in, a * 4 * grid.T)))
        params.add(f"{prefix}.reg.bias", np.zeros(a * 4 * grid.T))
        params.add(f"{prefix}.cls.weight", rng.normal(0.0, 0.01, (fan_in, a * 2)))
        params.add(f"{prefix}.cls.bias", np.zeros(a * 2))

    def _flatten(self, feature: ClipFeature) -> np.ndarray:
        T, H, W, C = feature.shape
        g = self.grid
        if (H, W) != (g.feature_height, g.feature_width) or T != g.T:
            raise DimensionError(
                f"feature {T}x{H}x{W} does not match anchor grid {g.T}x{g.feature_height}x{g.feature_width}",
                MODULE)
        if T * C != self.params[f"{self.prefix}.reg.weight"].shape[0]:
            raise DimensionError(f"feature channels {C} do not match head input", MODULE)
        return feature.values.transpose(1, 2, 0, 3).reshape(H * W, T * C)

    def forward(self, feature: ClipFeature) -> Tuple[TpnOutput, tuple]:
        x = self._flatten(feature)
        p = self.params
        reg = x @ p[f"{self.prefix}.reg.weight"].value + p[f"{self.prefix}.reg.bias"].value
        cls = x @ p[f"{self.prefix}.cls.weight"].value + p[f"{self.prefix}.cls.bias"].value
        out = TpnOutput(reg.reshape(-1, 4 * self.grid.T), cls.reshape(-1, 2))
        return out, (x, feature.shape)

    def backward(self, dreg: np.ndarray, dlogits: np.ndarray, cache: tuple) -> np.ndarray:
        """Accumulate head gradients; returns dL/dF"""
        x, shape = cache
        T, H, W, C = shape
        p = self.params
        dreg = dreg.reshape(H * W, -1)
        dcls = dlogits.reshape(H * W, -1)
        p[f"{self.prefix}.reg.weight"].accumulate(x.T @ dreg)
        p[f"{self.prefix}.reg.bias"].accumulate(dreg.sum(axis=0))
        p[f"{self.prefix}.cls.weight"].accumulate(x.T @ dcls)
        p[f"{self.prefix}.cls.bias"].accumulate(dcls.sum(axis=0))
        dx = dreg @ p[f"{self.prefix}.reg.weight"].value.T + dcls @ p[f"{self.prefix}.cls.weight"].value.T
        return dx.reshape(H, W, T, C).transpose(2, 0, 1, 3)


def tpn_heads(feature: ClipFeature, grid: AnchorGrid, params: ParameterSet) -> TpnOutput:
    """Functional entry point over an existing parameter set"""
    return TpnHeads(grid, feature.shape[3], params).forward(feature)[0]


# ---------------------------------------------------------------------------
# Objective, sampling, proposals
# ---------------------------------------------------------------------------

def tpn_loss_with_grad(out: TpnOutput, assignment: AnchorAssignment, sampled,
                       lam: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Proposal objective and its gradients

    Classification is the softmax loss averaged over the sampled anchors;
    regression is smooth L1 over the sampled positives divided by their
    count (zero when there are none), weighted by lam.

    Returns:
        (loss, dL/dregression, dL/dlogits)
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    sampled = np.asarray(sampled, dtype=np.int64)
    dreg = np.zeros_like(out.regression)
    dlogits = np.zeros_like(out.actionness_logits)
    if sampled.size == 0:
        return 0.0, dreg, dlogits
    targets = (assignment.labels[sampled] == POSITIVE).astype(np.int64)
    cls_loss, dcls = classification_loss_with_grad(out.actionness_logits[sampled], targets)
    dlogits[sampled] = dcls

    positives = sampled[targets == 1]
    reg_loss = 0.0
    if positives.size and lam > 0:
        n_reg = positives.size
        for a in positives:
            target = assignment.regression_targets[int(a)]
            reg_loss += smooth_l1(out.regression[a], target)
            dreg[a] = lam * smooth_l1_backward(out.regression[a], target) / n_reg
        reg_loss /= n_reg
    return cls_loss + lam * reg_loss, dreg, dlogits


def tpn_loss(out: TpnOutput, assignment: AnchorAssignment, sampled, lam: float = 1.0) -> float:
    """Value of the proposal objective (see tpn_loss_with_grad)"""
    return tpn_loss_with_grad(out, assignment, sampled, lam)[0]


def sample_minibatch(assignment: AnchorAssignment, size: int = 32, pos_fraction: float = 0.5,
                     rng_seed: int = 0) -> np.ndarray:
    """Sample up to size * pos_fraction positives, fill the rest with negatives; sorted indices"""
    if size < 1:
        raise ValueError("mini-batch size must be >= 1")
    rng = np.random.default_rng(rng_seed)
    pos = assignment.positive_indices
    neg = assignment.negative_indices
    n_pos = min(pos.size, int(size * pos_fraction))
    n_neg = min(neg.size, size - n_pos)
    chosen_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64)
    chosen_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([chosen_pos, chosen_neg]).astype(np.int64))


def propose(out: TpnOutput, grid: AnchorGrid, image_size: Tuple[int, int],
            iou_threshold: float = 0.7, keep_top: int = 300, clip_index: int = 0,
            anchors: Optional[np.ndarray] = None) -> List[Tubelet]:
    """Decode every anchor, score by actionness, NMS, keep the top survivors"""
    if anchors is None:
        anchors = anchor_tubelet_boxes(grid)
    boxes = decode_deltas(anchors, out.regression, image_size)
    scores = out.actionness()
    keep = nms_indices(boxes, scores, iou_threshold, keep_top)
    return [Tubelet(boxes[i], float(scores[i]), clip_index=clip_index) for i in keep]

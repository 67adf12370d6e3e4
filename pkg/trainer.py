#!/usr/bin/env python3
"""
Training engine for the LSTR detector
Per-video SGD steps over the proposal objective and the relation
classification objective, with gradients flowing back into the backbone
"""

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import save_checkpoint
from data_synth import ClipSample
from errors import NonFiniteError
from file_manager import FileManager
from logger import RunLogger
from long_term_relation import build_window
from lstr_model import LSTRModel
from numerics import classification_loss_with_grad, clip_grad_norm, sgd_step
from tpn import sample_minibatch, tpn_loss_with_grad
from tubelet_geometry import Tubelet, assign_labels, pairwise_tubelet_iou, stack_boxes

LOSS_COLUMNS = ("epoch", "tpn_loss", "relation_loss", "total_loss", "lr")


@dataclass
class StepStats:
    tpn_loss: float
    relation_loss: float
    lr: float

    @property
    def total_loss(self) -> float:
        return self.tpn_loss + self.relation_loss


@dataclass
class EpochStats:
    epoch: int
    tpn_loss: float
    relation_loss: float
    lr: float

    @property
    def total_loss(self) -> float:
        return self.tpn_loss + self.relation_loss

    def row(self) -> List[str]:
        return [str(self.epoch), f"{self.tpn_loss:.8f}", f"{self.relation_loss:.8f}",
                f"{self.total_loss:.8f}", f"{self.lr:.8f}"]


def roi_targets(rois: Sequence[Tubelet], gts: Sequence[Tubelet], num_classes: int,
                positive_iou: float = 0.5, multi_label: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Classification targets of training RoIs

    A RoI takes the class of its best-overlapping ground truth when that
    tubelet IoU reaches positive_iou; otherwise it is background.

    Returns:
        (is_positive, labels) where labels are class indices (background = num_classes)
        or, in multi-label mode, an n x K binary matrix with all-zero background rows
    """
    n = len(rois)
    labels = np.full(n, num_classes, dtype=np.int64)
    positive = np.zeros(n, dtype=bool)
    if n and len(gts):
        iou = pairwise_tubelet_iou(stack_boxes(rois), stack_boxes(gts))
        best = iou.argmax(axis=1)
        positive = iou[np.arange(n), best] >= positive_iou
        gt_labels = np.array([g.label for g in gts], dtype=np.int64)
        labels = np.where(positive, gt_labels[best], num_classes)
    if multi_label:
        matrix = np.zeros((n, num_classes))
        matrix[np.flatnonzero(positive), labels[positive]] = 1.0
        return positive, matrix
    return positive, labels


def sample_rois(positive: np.ndarray, num_gt: int, size: int, pos_fraction: float,
                rng: np.random.Generator, allow_negatives: bool = True) -> np.ndarray:
    """Ground truths (the first num_gt candidates) first, then random positives and negatives; sorted"""
    pos = np.flatnonzero(positive)
    gt_pos = pos[pos < num_gt]
    other_pos = pos[pos >= num_gt]
    n_pos = min(pos.size, max(int(size * pos_fraction), min(gt_pos.size, size)))
    chosen = list(gt_pos[:n_pos])
    extra = n_pos - len(chosen)
    if extra > 0:
        chosen.extend(rng.choice(other_pos, size=extra, replace=False))
    if allow_negatives:
        neg = np.flatnonzero(~positive)
        n_neg = min(neg.size, size - len(chosen))
        if n_neg > 0:
            chosen.extend(rng.choice(neg, size=n_neg, replace=False))
    return np.sort(np.asarray(chosen, dtype=np.int64))


class LSTRTrainer:
    """Runs the training schedule over a clip dataset"""

    def __init__(self, model: LSTRModel, logger: Optional[RunLogger] = None):
        self.model = model
        self.cfg = model.cfg
        self.logger = logger or RunLogger(quiet=True)
        self.schedule = self.cfg.lr_schedule()

    def _relation_active(self, epoch: int) -> bool:
        if self.cfg["train.schedule"] == "joint":
            return True
        return epoch >= int(self.cfg["train.tpn_pretrain_epochs"])

    def train_step(self, clips: Sequence[ClipSample], epoch_progress: float, step_seed: int,
                   relation: bool = True) -> StepStats:
        """One SGD step on one video"""
        model, cfg = self.model, self.cfg
        params = model.params
        params.zero_grad()
        rng = np.random.default_rng(step_seed)
        n_clips = len(clips)
        K = model.num_classes
        multi_label = cfg.multi_label
        background = not multi_label and bool(cfg["classifier.background_class"])

        features, backbone_caches, dF = [], [], []
        rois_per_clip: List[List[Tubelet]] = []
        roi_caches: List[list] = []
        roi_features: List[np.ndarray] = []
        roi_labels: List[np.ndarray] = []
        tpn_total = 0.0
        for c, clip in enumerate(clips):
            feature, bcache = model.backbone.forward(clip.frames)
            out, hcache = model.heads.forward(feature)
            assignment = assign_labels(model.anchors, clip.tubelets,
                                       positive_iou=float(cfg["tpn.positive_iou"]),
                                       negative_iou_ceiling=cfg["tpn.negative_iou_ceiling"])
            sampled = sample_minibatch(assignment, int(cfg["tpn.minibatch"]),
                                       float(cfg["tpn.positive_fraction"]), int(rng.integers(2 ** 31)))
            loss, dreg, dlogits = tpn_loss_with_grad(out, assignment, sampled, float(cfg["tpn.lambda"]))
            tpn_total += loss
            grad = model.heads.backward(dreg / n_clips, dlogits / n_clips, hcache)
            features.append(feature)
            backbone_caches.append(bcache)
            dF.append(grad)

            if not relation:
                continue
            proposals = model.proposals(out, c, keep_top=int(cfg["tpn.train_proposal_cap"]))
            candidates = [Tubelet(g.boxes, 1.0, clip_index=c, label=g.label) for g in clip.tubelets] + proposals
            positive, labels = roi_targets(candidates, clip.tubelets, K,
                                           float(cfg["classifier.positive_iou"]), multi_label)
            keep = sample_rois(positive, len(clip.tubelets), int(cfg["classifier.rois_per_clip"]),
                               float(cfg["classifier.positive_fraction"]), rng,
                               allow_negatives=background or multi_label)
            rois = [candidates[i] for i in keep]
            caches, vectors = [], []
            for roi in rois:
                fused, scache = model.short_term.forward(feature, roi)
                caches.append(scache)
                vectors.append(fused.values)
            rois_per_clip.append(rois)
            roi_caches.append(caches)
            roi_features.append(np.array(vectors).reshape(len(rois), model.feature_dim))
            roi_labels.append(labels[keep])

        relation_total = 0.0
        if relation:
            windows = [m for m in range(n_clips) if rois_per_clip[m]]
            dX = [np.zeros_like(x) for x in roi_features]
            w = int(cfg["long_term.radius"])
            for m in windows:
                window = build_window(rois_per_clip, m, w, roi_features, model.feature_dim)
                logits, lcache = model.long_term.forward(window, training=True,
                                                         rng_seed=int(rng.integers(2 ** 31)))
                loss, dlogits = classification_loss_with_grad(logits, roi_labels[m], multi_label)
                relation_total += loss
                dwindow = model.long_term.backward(dlogits / len(windows), lcache)
                for row, (offset, source) in enumerate(zip(window.clip_offsets, window.source_indices)):
                    if source >= 0:
                        dX[m + offset][source] += dwindow[row]
            if windows:
                relation_total /= len(windows)
            for c in range(n_clips):
                for i, scache in enumerate(roi_caches[c]):
                    dF[c] += model.short_term.backward(dX[c][i], scache)

        for c in range(n_clips):
            model.backbone.backward(dF[c], backbone_caches[c])

        tpn_mean = tpn_total / max(n_clips, 1)
        if not (math.isfinite(tpn_mean) and math.isfinite(relation_total)):
            raise NonFiniteError(f"loss diverged (tpn {tpn_mean}, relation {relation_total})", "train")
        clip_grad_norm(params, cfg["train.grad_clip"])
        lr = sgd_step(params, self.schedule, epoch_progress,
                      momentum=float(cfg["train.momentum"]),
                      weight_decay=float(cfg["train.weight_decay"]))
        return StepStats(tpn_mean, relation_total, lr)

    def train(self, videos: Dict[str, List[ClipSample]], loss_csv_path=None,
              checkpoint_dir=None) -> List[EpochStats]:
        """
        Full schedule over the dataset

        Args:
            videos: clips grouped by video id
            loss_csv_path: rewritten after every epoch when given
            checkpoint_dir: receives checkpoint_epoch<n>.lstrckp after every epoch when given

        Returns:
            list of EpochStats
        """
        cfg = self.cfg
        epochs = int(cfg["train.epochs"])
        video_ids = sorted(videos)
        history: List[EpochStats] = []
        progress = self.logger.ui.create_training_progress() if cfg["ui.progress"] and not cfg["ui.quiet"] else None
        total_steps = epochs * len(video_ids)
        task = None
        if progress is not None:
            progress.start()
            task = progress.add_task("training", total=total_steps, status="")
        try:
            for epoch in range(epochs):
                order = np.random.default_rng([cfg.seed, epoch]).permutation(len(video_ids))
                relation = self._relation_active(epoch)
                steps: List[StepStats] = []
                for n, v in enumerate(order):
                    seed = int(np.random.SeedSequence([cfg.seed, epoch, n]).generate_state(1)[0])
                    stats = self.train_step(videos[video_ids[v]], epoch + n / max(len(video_ids), 1),
                                            seed, relation)
                    steps.append(stats)
                    if progress is not None:
                        progress.update(task, advance=1,
                                        status=f"epoch {epoch + 1}/{epochs} loss {stats.total_loss:.4f}")
                record = EpochStats(
                    epoch=epoch + 1,
                    tpn_loss=float(np.mean([s.tpn_loss for s in steps])) if steps else 0.0,
                    relation_loss=float(np.mean([s.relation_loss for s in steps])) if steps else 0.0,
                    lr=steps[-1].lr if steps else self.schedule.lr(epoch),
                )
                history.append(record)
                self.logger.debug(f"epoch {record.epoch}: tpn {record.tpn_loss:.4f} "
                                  f"relation {record.relation_loss:.4f} lr {record.lr:.6f}")
                if loss_csv_path is not None:
                    write_loss_csv(loss_csv_path, history)
                if checkpoint_dir is not None:
                    save_checkpoint(Path(checkpoint_dir) / f"checkpoint_epoch{record.epoch}.lstrckp",
                                    self.model.params)
        finally:
            if progress is not None:
                progress.stop()
        return history


def write_loss_csv(path, history: Sequence[EpochStats]):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LOSS_COLUMNS)
    for record in history:
        writer.writerow(record.row())
    return FileManager.atomic_write_text(path, buffer.getvalue())

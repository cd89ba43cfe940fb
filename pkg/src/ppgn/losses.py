"""Confidence and coordinate losses for anchor-based proposal training.

The confidence target is a smooth label: every anchor whose IoU with the
ground-truth box exceeds a threshold keeps its IoU as raw score, and the
raw vector is L1-normalized into a distribution. Training minimizes the
KL divergence between that distribution and the L1-normalized sigmoid
confidences. A one-hot softmax cross-entropy variant serves as the
baseline. Box offsets are penalized with a masked squared error over the
same matched anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .anchors import AnchorSet
from .errors import ConsistencyError, InvalidInputError, ShapeError
from .geometry import Box, OffsetTarget
from .tensor import Tensor

KL_EPS = 1e-12


@dataclass(frozen=True)
class SmoothLabel:
    """Normalized confidence target over all located anchors."""

    s_star: np.ndarray  # (N,), sums to 1
    support: np.ndarray  # indices with positive mass


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss terms for one logging step."""

    conf: float
    coord: float
    total: float
    matched_anchor_count: int

    def log_line(self, step: int, lr: float) -> str:
        return (
            f"step={step} lr={lr:.8g} conf={self.conf:.6f} "
            f"coord={self.coord:.6f} total={self.total:.6f} "
            f"matched={self.matched_anchor_count}"
        )


def argmax_iou_anchor(gt: Box, anchors: AnchorSet) -> int:
    """Index of the located anchor with the highest IoU (lowest index on ties)."""
    return int(np.argmax(anchors.iou_with(gt)))


def build_smooth_label(gt: Box, anchors: AnchorSet, eta: float) -> SmoothLabel:
    """IoU-above-threshold scores, L1-normalized; one-hot fallback when no
    anchor clears the threshold."""
    if not 0.0 < eta < 1.0:
        raise InvalidInputError(f"eta must lie in (0, 1), got {eta}")
    ious = anchors.iou_with(gt)
    raw = np.where(ious > eta, ious, 0.0)
    total = raw.sum()
    if total == 0.0:
        raw[int(np.argmax(ious))] = 1.0
        total = 1.0
    s_star = raw / total
    return SmoothLabel(s_star=s_star, support=np.flatnonzero(s_star))


def _rows(logits) -> Tensor:
    logits = T.as_tensor(logits)
    if logits.data.ndim == 1:
        return logits.reshape(1, -1)
    if logits.data.ndim == 2:
        return logits
    raise ShapeError(f"expected (N,) or (B, N) logits, got {logits.shape}")


def kld_conf_loss(pred_logits, s_star) -> Tensor:
    """Mean over the batch of (1/N) * KL(s' || normalized sigmoid scores).

    Accepts one sample (N,) with its (N,) label or a batch (B, N) with
    (B, N) labels. Zero-mass label entries contribute exactly zero.
    """
    logits = _rows(pred_logits)
    labels = np.atleast_2d(np.asarray(s_star, dtype=np.float64))
    if labels.shape != logits.shape:
        raise ShapeError(
            f"labels of shape {labels.shape} do not match logits {logits.shape}"
        )
    n = logits.shape[1]
    with np.errstate(divide="ignore"):
        entropy = np.where(labels > 0, labels * np.log(np.maximum(labels, KL_EPS)), 0.0)
    entropy_term = entropy.sum(axis=1)  # constant: sum of s* log s*

    scores = T.l1_normalize(T.sigmoid(logits), axis=-1)
    cross = T.tensor_sum(
        T.log(T.clamp_min(scores, KL_EPS)) * Tensor(labels), axis=-1
    )
    per_sample = (Tensor(entropy_term) - cross) * (1.0 / n)
    return per_sample.mean()


def softmax_ce(pred_logits, target_index) -> Tensor:
    """Cross-entropy of softmax(logits) against integer target indices."""
    logits = _rows(pred_logits)
    targets = np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    b, n = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"expected {b} target indices, got shape {targets.shape}")
    if np.any((targets < 0) | (targets >= n)):
        raise InvalidInputError("target index outside the anchor range")
    shift = logits.data.max(axis=1, keepdims=True)  # detached for stability
    lse = T.log(T.tensor_sum(T.exp(logits - Tensor(shift)), axis=-1)) + Tensor(
        shift.reshape(-1)
    )
    onehot = np.zeros((b, n), dtype=np.float64)
    onehot[np.arange(b), targets] = 1.0
    picked = T.tensor_sum(logits * Tensor(onehot), axis=-1)
    return (lse - picked).mean()


def softmax_conf_loss(pred_logits, gt: Box, anchors: AnchorSet) -> Tensor:
    """One-hot cross-entropy against the highest-IoU anchor."""
    return softmax_ce(pred_logits, argmax_iou_anchor(gt, anchors))


def coord_loss_masked(raw, mask: np.ndarray, targets: np.ndarray) -> Tensor:
    """Masked squared offset error, summed per sample, averaged over batch.

    ``raw`` is (B, N, 5); ``targets`` holds (sx, sy, tw, th) per anchor and
    ``mask`` selects the matched anchors. Center targets compare in sigmoid
    space, size targets in log-ratio space.
    """
    raw = T.as_tensor(raw)
    if raw.data.ndim == 2:
        raw = raw.reshape(1, *raw.shape)
    if raw.data.ndim != 3 or raw.shape[2] != 5:
        raise ShapeError(f"expected (B, N, 5) predictions, got {raw.shape}")
    mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 2:
        targets = targets[None]
    if mask.shape != raw.shape[:2] or targets.shape != (*raw.shape[:2], 4):
        raise ShapeError(
            f"mask {mask.shape} / targets {targets.shape} do not match "
            f"predictions {raw.shape}"
        )
    sx = T.sigmoid(raw[:, :, 0])
    sy = T.sigmoid(raw[:, :, 1])
    err = (
        (sx - Tensor(targets[:, :, 0])) ** 2
        + (sy - Tensor(targets[:, :, 1])) ** 2
        + (raw[:, :, 2] - Tensor(targets[:, :, 2])) ** 2
        + (raw[:, :, 3] - Tensor(targets[:, :, 3])) ** 2
    )
    return T.tensor_sum(err * Tensor(mask), axis=-1).mean()


def coord_loss(raw, offset_targets: list[OffsetTarget], matched,
               anchors: AnchorSet) -> Tensor:
    """Single-sample coordinate loss from explicit offset targets.

    ``matched`` must be exactly the anchor indices the targets address;
    anything else indicates an inconsistent label pipeline.
    """
    raw = T.as_tensor(raw)
    if raw.data.ndim != 2 or raw.shape[1] != 5:
        raise ShapeError(f"expected (N, 5) predictions, got {raw.shape}")
    n = raw.shape[0]
    indices = [anchors.flat_index(t.cell, t.anchor_index) for t in offset_targets]
    if len(set(indices)) != len(indices):
        raise ConsistencyError("duplicate anchors in offset targets")
    if set(indices) != set(int(i) for i in matched):
        raise ConsistencyError(
            f"matched set {sorted(matched)} does not cover targets {sorted(indices)}"
        )
    mask = np.zeros((1, n))
    targets = np.zeros((1, n, 4))
    for t, i in zip(offset_targets, indices):
        mask[0, i] = 1.0
        targets[0, i] = (t.sx, t.sy, t.tw, t.th)
    return coord_loss_masked(raw.reshape(1, n, 5), mask, targets)


def total_loss(conf, coord, gamma: float):
    """Combined objective: confidence plus gamma-weighted coordinate error."""
    return conf + gamma * coord

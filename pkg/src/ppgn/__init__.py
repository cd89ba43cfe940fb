"""Phrase-guided bounding-box proposal generation on a synthetic world."""

from .anchors import AnchorSet, build_anchor_set, kmeans_anchors, wh_iou_distance
from .config import RunConfig
from .data import World, generate_world, preprocess, tokenize
from .geometry import Box, LetterboxTransform, OffsetTarget, decode_offsets, encode_offsets, iou, letterbox
from .losses import LossBreakdown, SmoothLabel, build_smooth_label, coord_loss, kld_conf_loss, softmax_conf_loss, total_loss
from .model import ModelConfig, PPGNModel
from .pipeline import EvalReport, evaluate, select_proposals, train
from .tensor import Tensor

__all__ = [
    "AnchorSet", "Box", "EvalReport", "LetterboxTransform", "LossBreakdown",
    "ModelConfig", "OffsetTarget", "PPGNModel", "RunConfig", "SmoothLabel",
    "Tensor", "World", "build_anchor_set", "build_smooth_label", "coord_loss",
    "decode_offsets", "encode_offsets", "evaluate", "generate_world", "iou",
    "kld_conf_loss", "kmeans_anchors", "letterbox", "preprocess",
    "select_proposals", "softmax_conf_loss", "tokenize", "total_loss", "train",
    "wh_iou_distance",
]

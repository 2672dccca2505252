"""The track transformer and the full backbone + transformer tracker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from .geometry import apply_deltas, roi_align, soft_argmax_box
from .neural import (FFN, Backbone, BackboneConfig, FeatureMap, MultiHeadAttention, Norm,
                     corr_att, mca, msa, sine_pos_encoding)

logger = logging.getLogger(__name__)

MODES = ("sot", "mot")


@dataclass(frozen=True)
class TrackerConfig:
    backbone_widths: tuple = (16, 32, 64)
    stride: int = 8
    dim: int = 64
    heads: int = 4
    ffn_hidden: int = 256
    pool_size: int = 7
    iterations: int = 3
    # which frame the target decoder cross-attends to: "tracking" or "reference"
    mca_source: str = "tracking"

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mca_source not in ("tracking", "reference"):
            raise ValueError(f"mca_source must be 'tracking' or 'reference', got {self.mca_source!r}")

    @property
    def backbone(self):
        return BackboneConfig(tuple(self.backbone_widths), self.stride, self.dim)


@dataclass
class TrackOutput:
    """Per-iteration boxes in image coordinates.

    In SOT mode ``boxes[0]`` is the proposal-decoder output, followed by one
    entry per target-transformer iteration; MOT mode has only the iterations.
    """
    boxes: list
    embeddings: torch.Tensor
    heatmaps: torch.Tensor | None = None
    flags: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.boxes[-1]


class TargetTransformerStep(nn.Module):
    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        c, k = cfg.dim, cfg.pool_size
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(c, cfg.heads)
        self.norm_sa = Norm(c)
        self.corr_fc = nn.Linear(k * k * c, c)
        nn.init.uniform_(self.corr_fc.weight, -(k * k * c) ** -0.5, (k * k * c) ** -0.5)
        nn.init.zeros_(self.corr_fc.bias)
        self.norm_corr = Norm(c)
        self.ffn = FFN(c, cfg.ffn_hidden)
        self.norm_ffn = Norm(c)
        self.box_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, 4))
        nn.init.zeros_(self.box_head[2].weight)
        nn.init.zeros_(self.box_head[2].bias)

    def forward(self, targets, proposals, track_feat: FeatureMap, batch_idx):
        stride = track_feat.stride
        proposals, n_fixed = sanitize_proposals(proposals, stride)
        search = roi_align(track_feat.data, proposals / stride, self.cfg.pool_size, batch_idx)
        pos = sine_pos_encoding(proposals, self.cfg.dim, track_feat.image_size)
        x = self.norm_sa(targets + msa(self.self_attn, targets, pos, groups=batch_idx))
        corr = corr_att(x, search).flatten(1)
        x = self.norm_corr(x + self.corr_fc(corr))
        x = self.norm_ffn(x + self.ffn(x))
        return x, apply_deltas(proposals, self.box_head(x)), n_fixed


def sanitize_proposals(proposals, stride):
    """Widen proposals narrower than one stride to a one-stride extent about their center.

    Zero-area proposals therefore become one-stride squares. Returns the boxes and
    the number of rows that were widened.
    """
    x1, y1, x2, y2 = proposals.unbind(-1)
    w = x2 - x1
    h = y2 - y1
    # the slack keeps an already-widened box (width stride up to rounding) from being widened again
    limit = stride * (1 - 1e-6)
    small = (w < limit) | (h < limit)
    if not small.any():
        return proposals, 0
    cx = (x1 + x2) / 2
    cy = (y1 + y2) / 2
    half_w = w.clamp(min=stride) / 2
    half_h = h.clamp(min=stride) / 2
    widened = torch.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], dim=-1)
    logger.debug("widened %d small proposal(s)", int(small.sum()))
    return torch.where(small[:, None], widened, proposals), int(small.sum())


class TrackTransformer(nn.Module):
    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        super().__init__()
        c = cfg.dim
        self.cfg = cfg
        self.cross_attn = MultiHeadAttention(c, cfg.heads)
        self.norm_ca = Norm(c)
        self.ffn = FFN(c, cfg.ffn_hidden)
        self.norm_ffn = Norm(c)
        self.heatmap_head = nn.Sequential(
            nn.Conv2d(c, c // 2, 3, padding=1), nn.ReLU(), nn.Conv2d(c // 2, 2, 3, padding=1))
        self.steps = nn.ModuleList(TargetTransformerStep(cfg) for _ in range(cfg.iterations))

    def target_decoder(self, ref_feat: FeatureMap, boxes, track_feat: FeatureMap, batch_idx=None):
        n = boxes.shape[0]
        if batch_idx is None:
            batch_idx = boxes.new_zeros(n, dtype=torch.long)
        if n == 0:
            return ref_feat.data.new_zeros(0, self.cfg.dim)
        pooled = roi_align(ref_feat.data, boxes / ref_feat.stride, self.cfg.pool_size, batch_idx)
        f = pooled.mean(dim=(2, 3))
        context = track_feat if self.cfg.mca_source == "tracking" else ref_feat
        keyval = context.data.flatten(2).transpose(1, 2)[batch_idx]  # (N, HW, C)
        f = self.norm_ca(f + mca(self.cross_attn, f, keyval))
        return self.norm_ffn(f + self.ffn(f))

    def heatmaps(self, targets, track_feat: FeatureMap, batch_idx):
        corr = corr_att(targets, track_feat.data[batch_idx])
        logits = self.heatmap_head(corr)
        n, _, h, w = logits.shape
        return logits.flatten(2).softmax(dim=-1).reshape(n, 2, h, w)

    def proposal_decoder(self, targets, track_feat: FeatureMap, batch_idx=None):
        if batch_idx is None:
            batch_idx = targets.new_zeros(targets.shape[0], dtype=torch.long)
        heat = self.heatmaps(targets, track_feat, batch_idx)
        return soft_argmax_box(heat) * track_feat.stride, heat

    def forward(self, track_feat: FeatureMap, ref_feat: FeatureMap, boxes, mode="sot",
                mot_proposals=None, batch_idx=None) -> TrackOutput:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "mot" and mot_proposals is None:
            raise ValueError("mot mode needs proposals (detections or noised ground truth)")
        n = boxes.shape[0]
        if batch_idx is None:
            batch_idx = boxes.new_zeros(n, dtype=torch.long)
        n_out = self.cfg.iterations + (mode == "sot")
        if n == 0:
            empty = boxes.new_zeros(0, 4)
            return TrackOutput([empty] * n_out, boxes.new_zeros(0, self.cfg.dim))

        targets = self.target_decoder(ref_feat, boxes, track_feat, batch_idx)
        heat = None
        if mode == "sot":
            proposals, heat = self.proposal_decoder(targets, track_feat, batch_idx)
            outputs = [proposals]
        else:
            proposals = mot_proposals
            outputs = []
        fixed = 0
        for step in self.steps:
            targets, proposals, n_fixed = step(targets, proposals, track_feat, batch_idx)
            fixed += n_fixed
            outputs.append(proposals)
        return TrackOutput(outputs, targets, heat, {"degenerate_proposals": fixed})


class UnifiedTracker(nn.Module):
    """Backbone plus track transformer; one set of weights for SOT and MOT."""

    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.transformer = TrackTransformer(cfg)

    @property
    def stride(self):
        return self.cfg.stride

    def features(self, images) -> FeatureMap:
        return self.backbone(images)

    def forward(self, track_feat, ref_feat, boxes, mode="sot", mot_proposals=None, batch_idx=None):
        return self.transformer(track_feat, ref_feat, boxes, mode, mot_proposals, batch_idx)


def to_tensor_image(image, dtype=torch.float32):
    """uint8 or float ``(H, W, 3)`` arrays to a float tensor in [0, 1]."""
    t = torch.as_tensor(image)
    if t.dtype == torch.uint8:
        return t.to(dtype) / 255.0
    return t.to(dtype)


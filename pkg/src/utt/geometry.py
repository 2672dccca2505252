"""Box arithmetic, overlap measures, RoIAlign, soft-argmax corners and the delta codec.

Boxes are ``(x1, y1, x2, y2)`` tensors shaped ``(N, 4)``. Functions accept raw
tensors; :class:`BoxSet` carries a coordinate-frame tag for the places where
mixing image and feature-grid coordinates would be a bug.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

logger = logging.getLogger(__name__)

FRAMES = ("image", "feature")


class FrameMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class BoxSet:
    coords: torch.Tensor
    frame: str = "image"

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}, expected one of {FRAMES}")
        c = torch.as_tensor(self.coords)
        if c.ndim == 1:
            c = c.reshape(-1, 4)
        if c.ndim != 2 or c.shape[-1] != 4:
            raise ValueError(f"boxes must be shaped (N, 4), got {tuple(c.shape)}")
        if not torch.isfinite(c).all():
            raise ValueError("box coordinates must be finite")
        if (c[:, 2] < c[:, 0]).any() or (c[:, 3] < c[:, 1]).any():
            raise ValueError("boxes must satisfy x2 >= x1 and y2 >= y1")
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return self.coords.shape[0]

    def to_feature(self, stride: float) -> "BoxSet":
        if self.frame != "image":
            raise FrameMismatchError("box set is already in the feature frame")
        return BoxSet(self.coords / stride, "feature")

    def to_image(self, stride: float) -> "BoxSet":
        if self.frame != "feature":
            raise FrameMismatchError("box set is already in the image frame")
        return BoxSet(self.coords * stride, "image")


def _unwrap(*boxes):
    frames = {b.frame for b in boxes if isinstance(b, BoxSet)}
    if len(frames) > 1:
        raise FrameMismatchError(f"boxes come from different coordinate frames: {sorted(frames)}")
    return [b.coords if isinstance(b, BoxSet) else torch.as_tensor(b) for b in boxes]


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def xywh_to_xyxy(boxes):
    x, y, w, h = boxes.unbind(-1)
    return torch.stack([x, y, x + w, y + h], dim=-1)


def xyxy_to_xywh(boxes):
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([x1, y1, x2 - x1, y2 - y1], dim=-1)


def iou(a, b) -> torch.Tensor:
    """Pairwise IoU, ``(N, M)``. Zero-area pairs with no union get IoU 0."""
    a, b = _unwrap(a, b)
    area_a = box_area(a)
    area_b = box_area(b)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))


def giou(a, b) -> torch.Tensor:
    """Row-paired generalized IoU, shape ``(N,)``.

    Degenerate boxes are evaluated with area 0 rather than raising; a debug
    record is emitted so callers can spot them.
    """
    a, b = _unwrap(a, b)
    if a.shape != b.shape:
        raise ValueError(f"giou needs paired rows, got {tuple(a.shape)} and {tuple(b.shape)}")
    area_a = box_area(a)
    area_b = box_area(b)
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter

    lt_c = torch.minimum(a[:, :2], b[:, :2])
    rb_c = torch.maximum(a[:, 2:], b[:, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[:, 0] * wh_c[:, 1]

    degenerate = (area_a <= 0) | (area_b <= 0)
    if degenerate.any():
        logger.debug("giou: %d degenerate box pair(s)", int(degenerate.sum()))

    tiny = 1e-12
    iou_ = torch.where(union > 0, inter / union.clamp(min=tiny), torch.zeros_like(union))
    penalty = torch.where(enclose > 0, (enclose - union) / enclose.clamp(min=tiny), torch.zeros_like(enclose))
    return iou_ - penalty


def soft_argmax_box(heatmaps: torch.Tensor) -> torch.Tensor:
    """Expected corner positions under a pair of normalized heatmaps.

    ``heatmaps`` is ``(N, 2, H, W)``; channel 0 is the top-left distribution
    and channel 1 the bottom-right one. Returns ``(N, 4)`` boxes in grid-index
    units (0..W-1, 0..H-1), corner-ordered per axis.
    """
    n, two, h, w = heatmaps.shape
    assert two == 2, heatmaps.shape
    xs = torch.arange(w, dtype=heatmaps.dtype, device=heatmaps.device)
    ys = torch.arange(h, dtype=heatmaps.dtype, device=heatmaps.device)
    ex = (heatmaps.sum(dim=2) * xs).sum(dim=-1)  # (N, 2)
    ey = (heatmaps.sum(dim=3) * ys).sum(dim=-1)
    x1 = torch.minimum(ex[:, 0], ex[:, 1])
    x2 = torch.maximum(ex[:, 0], ex[:, 1])
    y1 = torch.minimum(ey[:, 0], ey[:, 1])
    y2 = torch.maximum(ey[:, 0], ey[:, 1])
    return torch.stack([x1, y1, x2, y2], dim=-1)


def _bilinear(feat: torch.Tensor, batch_idx: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    # feat (B, C, H, W); px/py (N, S) in cell-index units; zero outside the grid
    _, c, h, w = feat.shape
    n, s = px.shape
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = feat.flatten(2)  # (B, C, H*W)
    out = feat.new_zeros(n, c, s)
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        lin = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))  # (N, S)
        vals = flat[batch_idx[:, None], :, lin]  # (N, S, C)
        out = out + (vals.permute(0, 2, 1) * (wgt * inside)[:, None, :])
    return out


def roi_align(feat: torch.Tensor, boxes: torch.Tensor, out_size: int,
              batch_idx: torch.Tensor | None = None) -> torch.Tensor:
    """Crop ``out_size x out_size`` bins per box with one bilinear sample per bin.

    ``feat`` is ``(B, C, H, W)``; ``boxes`` are ``(N, 4)`` in feature-frame
    units where cell ``i`` covers ``[i, i + 1)``. ``batch_idx`` picks the image
    for each box (defaults to image 0). Returns ``(N, C, K, K)``.
    """
    if out_size <= 0:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    if isinstance(boxes, BoxSet):
        if boxes.frame != "feature":
            raise FrameMismatchError("roi_align expects feature-frame boxes")
        boxes = boxes.coords
    n = boxes.shape[0]
    if batch_idx is None:
        batch_idx = torch.zeros(n, dtype=torch.long, device=boxes.device)
    k = out_size
    steps = (torch.arange(k, dtype=boxes.dtype, device=boxes.device) + 0.5) / k
    x1, y1, x2, y2 = boxes.unbind(-1)
    sx = x1[:, None] + steps[None, :] * (x2 - x1)[:, None]  # (N, K)
    sy = y1[:, None] + steps[None, :] * (y2 - y1)[:, None]
    # shift continuous positions to cell-center indices
    px = (sx[:, None, :] - 0.5).expand(n, k, k).reshape(n, k * k)
    py = (sy[:, :, None] - 0.5).expand(n, k, k).reshape(n, k * k)
    out = _bilinear(feat, batch_idx, px, py)
    return out.reshape(n, feat.shape[1], k, k)


def apply_deltas(proposals: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(deltas).all():
        raise FloatingPointError("non-finite box deltas")
    # corner form of cx + dx*w, w*exp(dw); zero deltas return the proposals bit-exactly
    x1, y1, x2, y2 = proposals.unbind(-1)
    w = x2 - x1
    h = y2 - y1
    dx, dy, dw, dh = deltas.unbind(-1)
    grow_x = w * torch.expm1(dw) / 2
    grow_y = h * torch.expm1(dh) / 2
    return torch.stack([x1 + dx * w - grow_x, y1 + dy * h - grow_y,
                        x2 + dx * w + grow_x, y2 + dy * h + grow_y], dim=-1)


def encode_deltas(proposals: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`apply_deltas` for positive-size boxes."""
    pcx, pcy, pw, ph = xyxy_to_cxcywh(proposals).unbind(-1)
    tcx, tcy, tw, th = xyxy_to_cxcywh(targets).unbind(-1)
    return torch.stack([(tcx - pcx) / pw, (tcy - pcy) / ph, torch.log(tw / pw), torch.log(th / ph)], dim=-1)

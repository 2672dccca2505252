"""Differentiable building blocks for the track transformer.

Feature maps are channel-first ``(B, C, H, W)`` tensors; target tokens are
``(N, C)`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 64
    heads: int = 4
    ffn_hidden: int = 256

    def __post_init__(self):
        if min(self.dim, self.heads, self.ffn_hidden) <= 0:
            raise ValueError("attention sizes must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (16, 32, 64)
    stride: int = 8
    dim: int = 64

    def __post_init__(self):
        if self.stride <= 0 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if 2 ** len(self.widths) != self.stride:
            raise ValueError(f"{len(self.widths)} downsampling stages cannot give stride {self.stride}")


@dataclass
class FeatureMap:
    data: torch.Tensor  # (B, C, H, W)
    stride: int

    @property
    def height(self):
        return self.data.shape[-2]

    @property
    def width(self):
        return self.data.shape[-1]

    @property
    def image_size(self):
        return self.width * self.stride, self.height * self.stride


class Norm(nn.Module):
    """Per-token normalization over the channel axis with a learned affine."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def normalize(self, x):
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps)

    def forward(self, x):
        return self.normalize(x) * self.weight + self.bias


def _init_linear(layer: nn.Linear):
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.zeros_(layer.bias)


class FFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        _init_linear(self.fc1)
        _init_linear(self.fc2)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections.

    ``forward`` takes queries ``(N, C)`` and keys/values ``(N, P, C)`` (one
    context per query) or ``(P, C)`` (shared context). ``mask`` is a boolean
    ``(N, P)`` tensor of allowed pairs.
    """

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for layer in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            _init_linear(layer)
        self.last_weights = None

    def forward(self, query, key, value=None, mask=None, keep_weights=False):
        if value is None:
            value = key
        if key.shape[-2] == 0:
            raise ValueError("attention context is empty")
        n = query.shape[0]
        h, d = self.heads, self.dim // self.heads
        if key.ndim == 2:
            key = key.unsqueeze(0).expand(n, -1, -1)
            value = value.unsqueeze(0).expand(n, -1, -1)
        q = self.q_proj(query).reshape(n, h, 1, d)
        k = self.k_proj(key).reshape(n, -1, h, d).transpose(1, 2)  # (N, h, P, d)
        v = self.v_proj(value).reshape(n, -1, h, d).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)).squeeze(2) / math.sqrt(d)  # (N, h, P)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        if keep_weights:
            self.last_weights = weights
        out = (weights.unsqueeze(2) @ v).reshape(n, self.dim)
        return self.out_proj(out)


def mca(attn: MultiHeadAttention, query, keyval, keep_weights=False):
    """Cross attention of target tokens over flattened frame features."""
    return attn(query, keyval, keyval, keep_weights=keep_weights)


def msa(attn: MultiHeadAttention, x, pos, groups=None, keep_weights=False):
    """Self attention among targets; ``pos`` is added to queries and keys only.

    ``groups`` restricts attention to targets from the same image. Keys are
    visited in a content-sorted order, so the floating-point reduction and
    therefore the output rows do not depend on the order targets are listed in.
    """
    qk = x + pos
    order = canonical_order(torch.cat([qk, x], dim=1))
    keys, values = qk[order], x[order]
    mask = None
    if groups is not None:
        mask = groups[:, None] == groups[order][None, :]
    out = attn(qk, keys, values, mask=mask, keep_weights=keep_weights)
    if keep_weights:
        # report weights in input key order
        attn.last_weights = attn.last_weights[..., torch.argsort(order)]
    return out


def canonical_order(rows: torch.Tensor) -> torch.Tensor:
    """Lexicographic row order; equal rows are interchangeable so ties are harmless."""
    data = rows.detach().cpu().numpy()
    return torch.as_tensor(np.lexsort(data.T[::-1]), device=rows.device)


def corr_att(filters: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
    """Correlation attention: 1x1 correlation with each target, then reweighting.

    ``filters`` is ``(N, C)``. ``feat`` is either one shared map ``(C, H, W)``
    or per-target maps ``(N, C, H, W)``. Returns ``(N, C, H, W)``.
    """
    if feat.ndim == 3:
        feat = feat.unsqueeze(0)
    response = torch.einsum("nc,nchw->nhw", filters, feat.expand(filters.shape[0], -1, -1, -1))
    return response.unsqueeze(1) * feat


def corr_att_flops(n, positions, dim):
    """Multiply/add count of :func:`corr_att`: dot products plus the broadcast product."""
    return n * positions * (2 * dim - 1) + n * positions * dim


def sine_pos_encoding(boxes: torch.Tensor, dim: int, image_size, temperature=10000.0) -> torch.Tensor:
    """Encode normalized box centers with interleaved sin/cos at geometric frequencies.

    The first half of the channels encodes x, the second half y.
    """
    if dim % 4:
        raise ValueError(f"positional encoding dim must be a multiple of 4, got {dim}")
    img_w, img_h = image_size
    cx = (boxes[:, 0] + boxes[:, 2]) / 2 / img_w
    cy = (boxes[:, 1] + boxes[:, 3]) / 2 / img_h
    half = dim // 2
    idx = torch.arange(half // 2, dtype=boxes.dtype, device=boxes.device)
    freqs = temperature ** (2 * idx / half)

    def enc(v):
        ang = v[:, None] * (2 * math.pi) / freqs[None, :]
        return torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(1)

    return torch.cat([enc(cx), enc(cy)], dim=-1)


class Backbone(nn.Module):
    """Four 3x3 conv stages: one stride-2 stage per width, then a stride-1 projection to ``dim``."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = 3
        for width in cfg.widths:
            layers += [nn.Conv2d(c_in, width, 3, stride=2, padding=1), nn.ReLU()]
            c_in = width
        layers.append(nn.Conv2d(c_in, cfg.dim, 3, padding=1))
        self.body = nn.Sequential(*layers)
        for m in self.body:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @property
    def stride(self):
        return self.cfg.stride

    def forward(self, images: torch.Tensor) -> FeatureMap:
        """``images`` is ``(B, H, W, 3)`` or ``(H, W, 3)`` with values in [0, 1]."""
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected (B, H, W, 3) images, got shape {tuple(images.shape)}")
        x = images.permute(0, 3, 1, 2)
        s = self.cfg.stride
        pad_h = (-x.shape[2]) % s
        pad_w = (-x.shape[3]) % s
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))
        return FeatureMap(self.body(x - 0.5), s)

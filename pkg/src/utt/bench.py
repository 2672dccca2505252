"""Timing and FLOP models for frame-wide cross attention vs. RoI correlation attention."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import roi_align
from .neural import corr_att

DEFAULT_GRID = [(s, s, n, 64, 7) for n in (1, 8) for s in (16, 32, 64)]


@dataclass
class BenchRow:
    H: int
    W: int
    N: int
    C: int
    K: int
    flops_cross: int
    flops_corr: int
    time_cross: float
    time_corr: float
    time_crop: float


def flops_cross(h, w, n, c):
    """Cost model of target-conditioned attention over the whole frame: (HW)^2 N C."""
    return (h * w) ** 2 * n * c


def flops_corr(k, n, c):
    """Cost model of correlation attention on a K x K crop: K^4 N C."""
    return k ** 4 * n * c


def cross_attention(targets, feat):
    """Frame-wide attention for every target: the frame tokens, modulated by the
    target embedding, attend to all other frame tokens.

    ``targets`` is ``(N, C)``, ``feat`` is ``(C, H, W)``. Returns ``(N, HW, C)``.
    """
    tokens = feat.flatten(1).t()  # (HW, C)
    out = []
    for t in targets:
        q = tokens * t
        out.append(F.scaled_dot_product_attention(q[None], tokens[None], tokens[None])[0])
    return torch.stack(out)


def crop_features(feat, boxes, k):
    """K x K RoI crop per target from a ``(C, H, W)`` map; ``boxes`` in feature cells."""
    return roi_align(feat[None], boxes, k)


def time_call(fn, repeats=9, min_seconds=1e-3):
    """Median wall time of ``repeats`` measurements; each measurement loops ``fn``
    enough times to last at least ``min_seconds`` and reports the per-call time."""
    fn()
    loops = 1
    while True:
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        elapsed = time.perf_counter() - start
        if elapsed >= min_seconds:
            break
        loops *= 2
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter() - start) / loops)
    return statistics.median(samples)


@torch.no_grad()
def bench_attention(grid=DEFAULT_GRID, repeats=9, seed=0, threads=1):
    """Measure both attention variants on every ``(H, W, N, C, K)`` configuration.

    ``time_corr`` covers the attention on already-cropped features, the same
    footing as ``time_cross`` which starts from an extracted feature map. The
    RoIAlign gather is reported on its own as ``time_crop``; its cost grows
    mildly with the map through cache misses, not through arithmetic.
    """
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    gen = torch.Generator().manual_seed(seed)
    rows = []
    try:
        for h, w, n, c, k in grid:
            feat = torch.randn(c, h, w, generator=gen)
            targets = torch.randn(n, c, generator=gen) / c ** 0.5
            xy = torch.rand(n, 2, generator=gen) * torch.tensor([w * 0.5, h * 0.5])
            boxes = torch.cat([xy, xy + torch.tensor([w * 0.4, h * 0.4])], dim=1)
            crops = crop_features(feat, boxes, k)
            rows.append(BenchRow(
                h, w, n, c, k,
                flops_cross(h, w, n, c), flops_corr(k, n, c),
                time_call(lambda: cross_attention(targets, feat), repeats),
                time_call(lambda: corr_att(targets, crops), repeats),
                time_call(lambda: crop_features(feat, boxes, k), repeats),
            ))
    finally:
        torch.set_num_threads(prev_threads)
    return rows


def fit_slope(rows, n=None):
    """Least-squares slope of log(time_cross) against log(HW), optionally for one N."""
    sel = [r for r in rows if n is None or r.N == n]
    x = np.log([r.H * r.W for r in sel])
    y = np.log([r.time_cross for r in sel])
    return float(np.polyfit(x, y, 1)[0])


def corr_variation(rows, n=None):
    """(max - min) / min of the correlation-attention time across the sweep."""
    times = [r.time_corr for r in rows if n is None or r.N == n]
    return (max(times) - min(times)) / min(times)


def summarize(rows):
    ns = sorted({r.N for r in rows})
    return {
        "slope": {str(n): fit_slope(rows, n) for n in ns},
        "corr_variation": {str(n): corr_variation(rows, n) for n in ns},
    }


def write_report(rows, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "complexity.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])))
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))
    report = {"rows": [asdict(r) for r in rows], **summarize(rows)}
    (out_dir / "complexity.json").write_text(json.dumps(report, indent=2))
    return report


def format_rows(rows):
    lines = [f"{'H':>4} {'W':>4} {'N':>3} {'C':>4} {'K':>3} {'flops_cross':>14} {'flops_corr':>11} "
             f"{'t_cross(ms)':>12} {'t_corr(ms)':>11} {'t_crop(ms)':>11}"]
    for r in rows:
        lines.append(f"{r.H:>4} {r.W:>4} {r.N:>3} {r.C:>4} {r.K:>3} {r.flops_cross:>14} {r.flops_corr:>11} "
                     f"{r.time_cross * 1e3:>12.3f} {r.time_corr * 1e3:>11.3f} {r.time_crop * 1e3:>11.3f}")
    return "\n".join(lines)

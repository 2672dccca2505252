"""SOT (Success / Precision / OP75) and CLEAR-MOT + identity metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import iou

SUCCESS_THRESHOLDS = np.arange(21) / 20.0


@dataclass
class SotReport:
    success_auc: float
    precision: float
    op75: float
    ious: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


@dataclass
class MotReport:
    mota: float
    motp: float
    idf1: float
    idp: float
    idr: float
    fp: int
    fn: int
    idsw: int
    mt: int
    ml: int
    num_gt: int
    num_matches: int

    def to_dict(self):
        return asdict(self)


def _paired_iou(a, b):
    a = torch.as_tensor(np.asarray(a, np.float64).reshape(-1, 4))
    b = torch.as_tensor(np.asarray(b, np.float64).reshape(-1, 4))
    return iou(a, b).diagonal().numpy()


def success_curve(ious):
    """Fraction of frames with IoU > t on the 21-point grid; the t = 1 point counts IoU == 1."""
    ious = np.asarray(ious, np.float64)
    curve = np.array([(ious > t).mean() for t in SUCCESS_THRESHOLDS[:-1]] + [(ious >= 1.0).mean()])
    return curve


def sot_metrics(preds, gts, precision_px=20.0) -> SotReport:
    preds = np.asarray(preds, np.float64).reshape(-1, 4)
    gts = np.asarray(gts, np.float64).reshape(-1, 4)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    if len(gts) == 0:
        return SotReport(0.0, 0.0, 0.0, [])
    ious = _paired_iou(preds, gts)
    centers_p = (preds[:, :2] + preds[:, 2:]) / 2
    centers_g = (gts[:, :2] + gts[:, 2:]) / 2
    dist = np.linalg.norm(centers_p - centers_g, axis=1)
    return SotReport(
        success_auc=float(success_curve(ious).mean()),
        precision=float((dist <= precision_px).mean()),
        op75=float((ious > 0.75).mean()),
        ious=ious.tolist(),
    )


def merge_sot_reports(reports):
    """Frame-weighted pooling over sequences."""
    ious = [v for r in reports for v in r.ious]
    if not ious:
        return SotReport(0.0, 0.0, 0.0, [])
    weights = np.array([len(r.ious) for r in reports], float)
    prec = float(np.average([r.precision for r in reports], weights=weights))
    ious_arr = np.array(ious)
    return SotReport(float(success_curve(ious_arr).mean()), prec, float((ious_arr > 0.75).mean()), ious)


def _frame_table(frames):
    """Normalise ``{frame: [(id, box, ...)]}`` and reject duplicate ids."""
    out = {}
    for t, rows in frames.items():
        ids = [int(r[0]) for r in rows]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate ids in frame {t}: {sorted(ids)}")
        boxes = np.array([np.asarray(r[1], np.float64) for r in rows]).reshape(-1, 4)
        out[t] = (ids, boxes)
    return out


def mot_metrics(results, gt, iou_gate=0.5) -> MotReport:
    """CLEAR-MOT with match persistence plus trajectory-level identity metrics.

    ``results`` and ``gt`` map frame -> list of ``(id, box_xyxy[, ...])``.
    """
    res = _frame_table(results)
    ref = _frame_table(gt)
    frames = sorted(set(res) | set(ref))

    fp = fn = idsw = 0
    iou_sum = 0.0
    n_match = 0
    num_gt = 0
    last_match = {}  # gt id -> hyp id of its most recent match
    active = {}  # gt id -> hyp id matched in the previous frame
    gt_frames = {}
    gt_hits = {}
    pair_counts = {}  # (gt id, hyp id) -> frames with IoU >= gate, for identity metrics
    res_total = 0

    for t in frames:
        g_ids, g_boxes = ref.get(t, ([], np.zeros((0, 4))))
        h_ids, h_boxes = res.get(t, ([], np.zeros((0, 4))))
        num_gt += len(g_ids)
        res_total += len(h_ids)
        for g in g_ids:
            gt_frames[g] = gt_frames.get(g, 0) + 1
        if len(g_ids) and len(h_ids):
            overlap = iou(torch.as_tensor(g_boxes), torch.as_tensor(h_boxes)).numpy()
        else:
            overlap = np.zeros((len(g_ids), len(h_ids)))

        for gi, g in enumerate(g_ids):
            for hi, h in enumerate(h_ids):
                if overlap[gi, hi] >= iou_gate:
                    pair_counts[(g, h)] = pair_counts.get((g, h), 0) + 1

        matches = []
        used_g, used_h = set(), set()
        # keep last frame's correspondences that are still valid
        for gi, g in enumerate(g_ids):
            h = active.get(g)
            if h is not None and h in h_ids:
                hi = h_ids.index(h)
                if hi not in used_h and overlap[gi, hi] >= iou_gate:
                    matches.append((gi, hi))
                    used_g.add(gi)
                    used_h.add(hi)
        free_g = [i for i in range(len(g_ids)) if i not in used_g]
        free_h = [j for j in range(len(h_ids)) if j not in used_h]
        if free_g and free_h:
            sub = overlap[np.ix_(free_g, free_h)]
            cost = np.where(sub >= iou_gate, 1.0 - sub, 1e6)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if sub[r, c] >= iou_gate:
                    matches.append((free_g[r], free_h[c]))

        new_active = {}
        for gi, hi in matches:
            g, h = g_ids[gi], h_ids[hi]
            if g in last_match and last_match[g] != h:
                idsw += 1
            last_match[g] = h
            new_active[g] = h
            iou_sum += overlap[gi, hi]
            n_match += 1
            gt_hits[g] = gt_hits.get(g, 0) + 1
        active = new_active
        fn += len(g_ids) - len(matches)
        fp += len(h_ids) - len(matches)

    mota = 1.0 - (fn + fp + idsw) / num_gt if num_gt else (1.0 if fp == 0 else -float(fp))
    motp = iou_sum / n_match if n_match else 0.0
    ratios = {g: gt_hits.get(g, 0) / n for g, n in gt_frames.items()}
    mt = sum(r >= 0.8 for r in ratios.values())
    ml = sum(r < 0.2 for r in ratios.values())

    idtp = _identity_true_positives(pair_counts)
    idfp = res_total - idtp
    idfn = num_gt - idtp
    idp = idtp / (idtp + idfp) if idtp + idfp else 0.0
    idr = idtp / (idtp + idfn) if idtp + idfn else 0.0
    idf1 = 2 * idtp / (2 * idtp + idfp + idfn) if idtp + idfp + idfn else 1.0
    return MotReport(mota, motp, idf1, idp, idr, fp, fn, idsw, mt, ml, num_gt, n_match)


def _identity_true_positives(pair_counts):
    if not pair_counts:
        return 0
    g_keys = sorted({g for g, _ in pair_counts})
    h_keys = sorted({h for _, h in pair_counts})
    weight = np.zeros((len(g_keys), len(h_keys)))
    gi = {g: i for i, g in enumerate(g_keys)}
    hi = {h: j for j, h in enumerate(h_keys)}
    for (g, h), n in pair_counts.items():
        weight[gi[g], hi[h]] = n
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return int(weight[rows, cols].sum())

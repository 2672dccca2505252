"""Online inference: SOT with a fixed first-frame reference, and the MOT
detect / track / associate loop with id management."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import iou
from .model import UnifiedTracker, to_tensor_image
from .neural import FeatureMap

logger = logging.getLogger(__name__)


class TrackingError(RuntimeError):
    pass


def _clip(boxes, width, height):
    boxes = boxes.copy()
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, width)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, height)
    return boxes


@torch.no_grad()
def sot_track_sequence(frames, init_box, model: UnifiedTracker, chunk=16):
    """Track one target through ``frames`` using frame 0 as the only reference.

    Returns a ``(T, 4)`` array whose first row is ``init_box``.
    """
    if len(frames) == 0:
        raise ValueError("sot_track_sequence needs at least one frame")
    init = np.asarray(init_box, dtype=np.float64).reshape(4)
    out = [init]
    if len(frames) == 1:
        return np.stack(out)
    model.eval()
    dtype = next(model.parameters()).dtype
    height, width = frames[0].shape[:2]
    ref = model.features(to_tensor_image(frames[0], dtype))
    for start in range(1, len(frames), chunk):
        batch = np.stack(frames[start:start + chunk])
        feat = model.features(to_tensor_image(batch, dtype))
        b = len(batch)
        ref_b = FeatureMap(ref.data.expand(b, -1, -1, -1), ref.stride)
        boxes = torch.as_tensor(init, dtype=dtype).expand(b, 4)
        pred = model(feat, ref_b, boxes, "sot", batch_idx=torch.arange(b)).final
        out.extend(_clip(pred.double().numpy(), width, height))
    return np.stack(out)


def associate(tracked, detections, threshold=0.9):
    """Maximum-total-IoU one-to-one assignment, keeping pairs with IoU >= threshold.

    Returns ``(matches, unmatched_tracks, unmatched_detections)`` with index lists.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    tracked = torch.as_tensor(np.asarray(tracked, dtype=np.float64).reshape(-1, 4))
    detections = torch.as_tensor(np.asarray(detections, dtype=np.float64).reshape(-1, 4))
    n, m = len(tracked), len(detections)
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    overlap = iou(tracked, detections).numpy()
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if overlap[r, c] >= threshold]
    matched_r = {r for r, _ in matches}
    matched_c = {c for _, c in matches}
    return (matches, [i for i in range(n) if i not in matched_r],
            [j for j in range(m) if j not in matched_c])


@dataclass
class Track:
    id: int
    box: np.ndarray
    status: str = "active"
    lost_age: int = 0
    score: float = 1.0
    embedding: np.ndarray | None = None


# -- detectors -------------------------------------------------------------------------


class OracleDetector:
    """Detections are the ground-truth boxes of the sequence."""

    def __init__(self, seq):
        self.seq = seq

    def __call__(self, t, image):
        _, boxes = self.seq.boxes_at(t)
        return boxes, np.ones(len(boxes))


class NoisyDetector:
    """Ground truth with relative Gaussian jitter and random misses, seeded per frame."""

    def __init__(self, seq, sigma=0.02, miss_rate=0.0, seed=0):
        self.seq = seq
        self.sigma = sigma
        self.miss_rate = miss_rate
        self.seed = seed

    def __call__(self, t, image):
        rng = np.random.default_rng([self.seed, t])
        _, boxes = self.seq.boxes_at(t)
        keep = rng.uniform(size=len(boxes)) >= self.miss_rate
        boxes = boxes[keep]
        wh = np.concatenate([boxes[:, 2:] - boxes[:, :2]] * 2, axis=1)
        noisy = boxes + rng.normal(0, self.sigma, boxes.shape) * wh
        noisy[:, 2:] = np.maximum(noisy[:, 2:], noisy[:, :2] + 1)
        return noisy, np.clip(1 - rng.uniform(0, 0.1, len(noisy)), 0, 1)


# -- box predictors ----------------------------------------------------------------------


class ModelPredictor:
    """Propagates previous-frame boxes into the current frame with the track transformer.

    Lost tracks use their last box as the proposal; with ``lost_proposal="redetect"``
    they go through the proposal decoder instead.
    """

    def __init__(self, model: UnifiedTracker, lost_proposal="last_box"):
        if lost_proposal not in ("last_box", "redetect"):
            raise ValueError(f"unknown lost_proposal {lost_proposal!r}")
        self.model = model.eval()
        self.lost_proposal = lost_proposal
        self.dtype = next(model.parameters()).dtype
        self.prev = None

    def reset(self):
        self.prev = None

    @torch.no_grad()
    def __call__(self, t, image, boxes, lost=None):
        feat = self.model.features(to_tensor_image(image, self.dtype))
        prev, self.prev = self.prev, feat
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if prev is None or len(boxes) == 0:
            return boxes.copy(), None
        b = torch.as_tensor(boxes, dtype=self.dtype)
        out = self.model(feat, prev, b, "mot", mot_proposals=b)
        pred = out.final.double().numpy()
        emb = out.embeddings.double().numpy()
        if self.lost_proposal == "redetect" and lost is not None and np.any(lost):
            idx = np.flatnonzero(lost)
            sot = self.model(feat, prev, b[idx], "sot")
            pred[idx] = sot.final.double().numpy()
        return pred, emb


class PerfectPredictor:
    """Test stub that knows the ground truth: each box is moved to the current box
    of the object it belongs to.

    A box is attributed to the object whose ground-truth box it equals in the
    most recent frame where such an exact match exists, so lost tracks keep their
    identity. Boxes that never match exactly (noisy detections) fall back to the
    object overlapping them most (IoU > 0.5) in the previous frame.
    """

    def __init__(self, seq):
        self.seq = seq

    def reset(self):
        pass

    def _owner(self, box, t):
        for s in range(t - 1, -1, -1):
            ids, gt = self.seq.boxes_at(s)
            hit = np.flatnonzero((gt == box).all(axis=1))
            if len(hit):
                return int(ids[hit[0]])
        ids, prev = self.seq.boxes_at(t - 1)
        if len(prev) == 0:
            return None
        overlap = iou(torch.as_tensor(box[None]), torch.as_tensor(prev)).numpy()[0]
        j = int(overlap.argmax())
        return int(ids[j]) if overlap[j] > 0.5 else None

    def __call__(self, t, image, boxes, lost=None):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        out = boxes.copy()
        if t == 0:
            return out, None
        for i, box in enumerate(boxes):
            owner = self._owner(box, t)
            cur = self.seq.box_of(owner, t) if owner is not None else None
            if cur is not None:
                out[i] = cur
        return out, None


# -- MOT session -----------------------------------------------------------------------


class MotTracker:
    """Per-sequence state machine: predict, detect, associate, update ids."""

    def __init__(self, predictor, detector, threshold=0.9, max_lost_age=30):
        self.predictor = predictor
        self.detector = detector
        self.threshold = threshold
        self.max_lost_age = max_lost_age
        self.tracks = []
        self.next_id = 1

    def step(self, t, image):
        tracks = self.tracks
        prev_boxes = np.array([tr.box for tr in tracks], dtype=np.float64).reshape(-1, 4)
        lost = np.array([tr.status == "lost" for tr in tracks], dtype=bool)
        predicted, emb = self.predictor(t, image, prev_boxes, lost)
        try:
            det_boxes, det_scores = self.detector(t, image)
        except Exception as e:
            raise TrackingError(f"detector failed at frame {t}: {e}") from e
        det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)

        matches, unmatched_tracks, unmatched_dets = associate(predicted, det_boxes, self.threshold)
        kept = []
        for ti, di in matches:
            tr = tracks[ti]
            tr.box = det_boxes[di].copy()
            tr.status = "active"
            tr.lost_age = 0
            tr.score = float(det_scores[di])
            if emb is not None:
                tr.embedding = emb[ti]
            kept.append(tr)
        for ti in unmatched_tracks:
            tr = tracks[ti]
            tr.status = "lost"
            tr.lost_age += 1
            tr.box = predicted[ti].copy()
            if tr.lost_age <= self.max_lost_age:
                kept.append(tr)
        for di in unmatched_dets:
            kept.append(Track(self.next_id, det_boxes[di].copy(), score=float(det_scores[di])))
            self.next_id += 1
        kept.sort(key=lambda tr: tr.id)
        self.tracks = kept
        return [tr for tr in kept if tr.status == "active"]


def mot_step(tracker: MotTracker, t, image):
    return tracker.step(t, image)


def run_mot_sequence(seq, predictor, detector, threshold=0.9, max_lost_age=30):
    """Track every frame of ``seq``; returns ``{frame: [(id, box, score), ...]}``."""
    predictor.reset()
    tracker = MotTracker(predictor, detector, threshold, max_lost_age)
    results = {}
    for t in range(len(seq)):
        active = tracker.step(t, seq.frames[t])
        results[t] = [(tr.id, tr.box.copy(), tr.score) for tr in active]
    return results

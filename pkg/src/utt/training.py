"""Box losses, noisy proposals and the alternating SOT/MOT training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import sample_pair
from .geometry import giou, iou
from .model import UnifiedTracker, to_tensor_image

logger = logging.getLogger(__name__)

TRAIN_MODES = ("sot_only", "mot_only", "unified")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0

    def __post_init__(self):
        if self.lambda_giou < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_giou == 0 and self.lambda_l1 == 0:
            raise ValueError("at least one loss weight must be positive")


def _box_terms(pred, gt, image_size):
    scale = pred.new_tensor([image_size[0], image_size[1], image_size[0], image_size[1]])
    g = (1 - giou(pred, gt)).mean()
    l1 = ((pred - gt).abs() / scale).mean()
    return g, l1


def _iteration_losses(preds, gt, weights: LossWeights, image_size):
    if gt.shape[0] == 0:
        zero = sum(p.sum() for p in preds) * 0.0 if preds else torch.zeros(())
        return zero, {"giou": 0.0, "l1": 0.0}
    total = 0.0
    g_sum = 0.0
    l1_sum = 0.0
    for pred in preds:
        g, l1 = _box_terms(pred, gt, image_size)
        total = total + weights.lambda_giou * g + weights.lambda_l1 * l1
        g_sum += g.item()
        l1_sum += l1.item()
    return total, {"giou": g_sum, "l1": l1_sum}


def mot_loss(preds, gt, weights: LossWeights = LossWeights(), image_size=(1.0, 1.0)):
    """Sum over refinement iterations of ``lambda_G * mean(1 - GIoU) + lambda_1 * mean|.|_1``.

    The L1 term is taken on boxes divided by ``image_size`` (width, height) and
    averaged over boxes and the four coordinates. Returns ``(loss, terms)``.
    """
    if len(preds) < 1:
        raise ValueError("mot_loss needs at least one iteration")
    return _iteration_losses(preds, gt, weights, image_size)


def sot_loss(preds, gt, weights: LossWeights = LossWeights(), image_size=(1.0, 1.0)):
    """Same form as :func:`mot_loss` but ``preds[0]`` is the decoder proposal and
    is included in the sum."""
    if len(preds) < 1:
        raise ValueError("sot_loss needs at least the proposal")
    return _iteration_losses(preds, gt, weights, image_size)


def noisy_proposals(gt, sigma, rng, min_iou=0.1, max_tries=50):
    """Jitter boxes in center/log-size space until each keeps IoU >= ``min_iou``
    with its source box; after ``max_tries`` rejections the source box is used."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    gt_t = torch.as_tensor(gt)
    boxes = gt_t.detach().cpu().double().numpy().reshape(-1, 4)
    out = boxes.copy()
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        w, h = x2 - x1, y2 - y1
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        src = torch.tensor([[x1, y1, x2, y2]], dtype=torch.float64)
        for _ in range(max_tries):
            ncx = cx + rng.normal(0, sigma * w)
            ncy = cy + rng.normal(0, sigma * h)
            nw = w * math.exp(rng.normal(0, sigma))
            nh = h * math.exp(rng.normal(0, sigma))
            cand = np.array([ncx - nw / 2, ncy - nh / 2, ncx + nw / 2, ncy + nh / 2])
            if float(iou(torch.from_numpy(cand)[None], src)[0, 0]) >= min_iou:
                out[i] = cand
                break
    return torch.from_numpy(out).to(gt_t.dtype if gt_t.is_floating_point() else torch.float32)


def augment_pair(images, box_sets, rng):
    """Apply one random mirror / channel permutation to a stack of frames.

    ``images`` is ``(F, H, W, 3)``; every array in ``box_sets`` holds boxes in
    those frames and is mirrored along with them. Returns new arrays.
    """
    images = np.asarray(images)
    height, width = images.shape[1:3]
    box_sets = [np.array(b, dtype=np.float64, copy=True) for b in box_sets]
    if rng.uniform() < 0.5:
        images = images[:, :, ::-1]
        for b in box_sets:
            b[..., [0, 2]] = width - b[..., [2, 0]]
    if rng.uniform() < 0.5:
        images = images[:, ::-1]
        for b in box_sets:
            b[..., [1, 3]] = height - b[..., [3, 1]]
    images = np.ascontiguousarray(images[..., rng.permutation(3)])
    return images, box_sets


# -- training loop ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "unified"
    iterations: int = 2000
    lr: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 5e-3
    grad_clip: float = 0.0
    sot_batch: int = 8
    mot_batch: int = 4
    noise_sigma: float = 0.1
    min_proposal_iou: float = 0.1
    max_frame_interval: int = 200
    mot_frame_interval: int = 1
    augment: bool = True
    loss: LossWeights = LossWeights()
    seed: int = 0
    log_every: int = 50
    divergence_limit: float = 1e4

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")


@dataclass
class TrainState:
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    loss_ema: dict = field(default_factory=dict)
    updates: int = 0

    def to_json(self):
        return asdict(self)


def cosine_lr(it, total, lr, lr_min):
    if total <= 0:
        return lr
    frac = min(it / total, 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * frac))


class Trainer:
    """Alternating SOT / MOT optimisation of one :class:`UnifiedTracker`.

    ``sot_data`` and ``mot_data`` are lists of annotated sequences; each task
    has its own random stream so the SOT batches of a unified run are the same
    as those of an SOT-only run with the same seed.
    """

    def __init__(self, model: UnifiedTracker, cfg: TrainConfig, sot_data=(), mot_data=(), log_path=None):
        self.model = model
        self.cfg = cfg
        self.sot_data = list(sot_data)
        self.mot_data = list(mot_data)
        if cfg.mode in ("sot_only", "unified") and not self.sot_data:
            raise ValueError(f"mode {cfg.mode} needs SOT sequences")
        if cfg.mode in ("mot_only", "unified") and not self.mot_data:
            raise ValueError(f"mode {cfg.mode} needs MOT sequences")
        self.dtype = next(model.parameters()).dtype
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(("sot", "mot", "noise"), seeds)}
        self.state = TrainState()
        self.log_path = Path(log_path) if log_path else None

    # data ------------------------------------------------------------------------

    def sample_sot_batch(self):
        rng = self.rngs["sot"]
        ref_imgs, trk_imgs, ref_boxes, trk_boxes = [], [], [], []
        for _ in range(self.cfg.sot_batch):
            seq = self.sot_data[int(rng.integers(len(self.sot_data)))]
            tid, r, t = sample_pair(seq, rng, self.cfg.max_frame_interval)
            frames = seq.frames[[r, t]]
            boxes = [seq.box_of(tid, r), seq.box_of(tid, t)]
            if self.cfg.augment:
                frames, boxes = augment_pair(frames, boxes, rng)
            ref_imgs.append(frames[0])
            trk_imgs.append(frames[1])
            ref_boxes.append(boxes[0])
            trk_boxes.append(boxes[1])
        return {
            "ref_images": np.stack(ref_imgs), "track_images": np.stack(trk_imgs),
            "ref_boxes": np.stack(ref_boxes), "track_boxes": np.stack(trk_boxes),
        }

    def sample_mot_batch(self):
        rng = self.rngs["mot"]
        ref_imgs, trk_imgs, ref_boxes, trk_boxes, bidx = [], [], [], [], []
        while len(ref_imgs) < self.cfg.mot_batch:
            seq = self.mot_data[int(rng.integers(len(self.mot_data)))]
            r = int(rng.integers(len(seq)))
            lo, hi = max(0, r - self.cfg.mot_frame_interval), min(len(seq) - 1, r + self.cfg.mot_frame_interval)
            t = int(rng.integers(lo, hi + 1))
            ids_r, boxes_r = seq.boxes_at(r)
            ids_t, boxes_t = seq.boxes_at(t)
            common = [i for i in ids_r if i in set(ids_t.tolist())]
            if not common:
                continue
            b = len(ref_imgs)
            pair_r = np.array([boxes_r[list(ids_r).index(i)] for i in common])
            pair_t = np.array([boxes_t[list(ids_t).index(i)] for i in common])
            frames = seq.frames[[r, t]]
            if self.cfg.augment:
                frames, (pair_r, pair_t) = augment_pair(frames, [pair_r, pair_t], rng)
            ref_boxes.extend(pair_r)
            trk_boxes.extend(pair_t)
            bidx.extend([b] * len(common))
            ref_imgs.append(frames[0])
            trk_imgs.append(frames[1])
        return {
            "ref_images": np.stack(ref_imgs), "track_images": np.stack(trk_imgs),
            "ref_boxes": np.stack(ref_boxes), "track_boxes": np.stack(trk_boxes),
            "batch_idx": np.array(bidx, dtype=np.int64),
        }

    # iterations ------------------------------------------------------------------

    def _features(self, batch):
        imgs = np.concatenate([batch["ref_images"], batch["track_images"]])
        feats = self.model.features(to_tensor_image(imgs, self.dtype))
        b = len(batch["ref_images"])
        ref = type(feats)(feats.data[:b], feats.stride)
        trk = type(feats)(feats.data[b:], feats.stride)
        return ref, trk

    def sot_loss_on(self, batch):
        """Reference self-tracking pass plus the tracking-frame pass, summed."""
        ref, trk = self._features(batch)
        image_size = (batch["ref_images"].shape[2], batch["ref_images"].shape[1])
        ref_boxes = torch.as_tensor(batch["ref_boxes"], dtype=self.dtype)
        trk_boxes = torch.as_tensor(batch["track_boxes"], dtype=self.dtype)
        bidx = torch.arange(len(ref_boxes))
        out_r = self.model(ref, ref, ref_boxes, "sot", batch_idx=bidx)
        out_t = self.model(trk, ref, ref_boxes, "sot", batch_idx=bidx)
        loss_r, terms_r = sot_loss(out_r.boxes, ref_boxes, self.cfg.loss, image_size)
        loss_t, terms_t = sot_loss(out_t.boxes, trk_boxes, self.cfg.loss, image_size)
        terms = {k: terms_r[k] + terms_t[k] for k in terms_r}
        terms["iou"] = float(iou(out_t.final.detach(), trk_boxes).diagonal().mean())
        return loss_r + loss_t, terms

    def mot_loss_on(self, batch, proposals=None):
        ref, trk = self._features(batch)
        image_size = (batch["ref_images"].shape[2], batch["ref_images"].shape[1])
        ref_boxes = torch.as_tensor(batch["ref_boxes"], dtype=self.dtype)
        trk_boxes = torch.as_tensor(batch["track_boxes"], dtype=self.dtype)
        bidx = torch.as_tensor(batch["batch_idx"])
        if proposals is None:
            proposals = noisy_proposals(trk_boxes, self.cfg.noise_sigma, self.rngs["noise"],
                                        self.cfg.min_proposal_iou)
        proposals = torch.as_tensor(proposals, dtype=self.dtype)
        out = self.model(trk, ref, ref_boxes, "mot", mot_proposals=proposals, batch_idx=bidx)
        # detection-head set criterion is a no-op: detections come from an external detector
        loss, terms = mot_loss(out.boxes, trk_boxes, self.cfg.loss, image_size)
        terms["iou"] = float(iou(out.final.detach(), trk_boxes).diagonal().mean())
        return loss, terms

    def _update(self, task, loss, terms):
        value = loss.item()
        if not math.isfinite(value) or value > self.cfg.divergence_limit:
            dump = {"iteration": self.state.iteration, "task": task, "loss": value, "terms": terms}
            raise TrainingDiverged(f"training diverged: {json.dumps(dump)}")
        lr = cosine_lr(self.state.iteration, self.cfg.iterations, self.cfg.lr, self.cfg.lr_min)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.state.updates += 1
        ema = self.state.loss_ema
        ema[task] = value if task not in ema else 0.9 * ema[task] + 0.1 * value
        return {"iteration": self.state.iteration, "task": task, "loss": value, "lr": lr, **terms}

    def step(self, sot_batch=None, mot_batch=None):
        """One unified step: an SOT update then an MOT update, as the mode allows."""
        records = []
        if self.cfg.mode in ("sot_only", "unified"):
            batch = sot_batch if sot_batch is not None else self.sample_sot_batch()
            loss, terms = self.sot_loss_on(batch)
            records.append(self._update("sot", loss, terms))
        if self.cfg.mode in ("mot_only", "unified"):
            batch = mot_batch if mot_batch is not None else self.sample_mot_batch()
            loss, terms = self.mot_loss_on(batch)
            records.append(self._update("mot", loss, terms))
        self.state.iteration += 1
        if self.log_path and (self.state.iteration % self.cfg.log_every == 0
                              or self.state.iteration == self.cfg.iterations):
            with open(self.log_path, "a") as fh:
                for rec in records:
                    fh.write(json.dumps(rec) + "\n")
        return records

    def train(self, iterations=None, callback=None):
        total = self.cfg.iterations if iterations is None else iterations
        self.model.train()
        while self.state.iteration < total:
            records = self.step()
            if callback is not None:
                callback(self, records)
        return self.state

    # state -----------------------------------------------------------------------

    def export_state(self):
        self.state.rng_state = {k: r.bit_generator.state for k, r in self.rngs.items()}
        return self.state

    def import_state(self, state: TrainState):
        self.state = state
        for k, s in state.rng_state.items():
            self.rngs[k].bit_generator.state = s


def unified_train_step(trainer: Trainer, sot_batch=None, mot_batch=None):
    return trainer.step(sot_batch, mot_batch)


def build_model(cfg, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    model = UnifiedTracker(cfg)
    return model.to(dtype)

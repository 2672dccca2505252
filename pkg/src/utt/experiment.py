"""Experiment orchestration shared by the CLI and the acceptance checks: build
datasets from a config, train, and evaluate on both tasks."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import gt_as_results, generate_dataset
from .metrics import merge_sot_reports, mot_metrics, sot_metrics
from .model import UnifiedTracker
from .tracking import ModelPredictor, NoisyDetector, OracleDetector, run_mot_sequence, sot_track_sequence
from .training import Trainer, build_model

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
_ID_BLOCK = 1_000_000  # id offset per sequence when pooling MOT results


def dataset(cfg: ExperimentConfig, name):
    stream = cfg.data[name]
    sot = name.startswith("sot")
    return generate_dataset(stream.scene, stream.count, stream.seed, sot=sot, prefix=f"{name}_")


def new_model(cfg: ExperimentConfig) -> UnifiedTracker:
    return build_model(cfg.tracker, seed=cfg.seed, dtype=DTYPES[cfg.dtype])


def train_experiment(cfg: ExperimentConfig, out_dir=None, callback=None, iterations=None):
    """Train a fresh model as configured. With ``out_dir`` a JSONL log, periodic
    checkpoints and ``checkpoints/final`` are written there."""
    model = new_model(cfg)
    sot_data = dataset(cfg, "sot_train") if cfg.needs("sot") else []
    mot_data = dataset(cfg, "mot_train") if cfg.needs("mot") else []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train.jsonl"
        log_path.unlink(missing_ok=True)
    trainer = Trainer(model, cfg.train, sot_data, mot_data, log_path=log_path)
    total = cfg.train.iterations if iterations is None else iterations

    def on_step(tr, records):
        if out_dir is not None and cfg.checkpoint_every and tr.state.iteration % cfg.checkpoint_every == 0 \
                and tr.state.iteration < total:
            save_checkpoint(out_dir / "checkpoints" / f"iter_{tr.state.iteration:06d}", tr.model,
                            tr.optimizer, tr.export_state(), cfg.tree)
        if callback is not None:
            callback(tr, records)

    trainer.train(total, on_step)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoints" / "final", model, trainer.optimizer,
                        trainer.export_state(), cfg.tree)
    return model, trainer


def restore_model(cfg: ExperimentConfig, path):
    model = new_model(cfg)
    load_checkpoint(path, model)
    return model.eval()


def track_sot(model, sequences):
    """``{name: (T, 4) predicted boxes}`` with each sequence's target as the object."""
    return {seq.name: sot_track_sequence(seq.frames, seq.target_boxes()[0], model) for seq in sequences}


def evaluate_sot(model, sequences, precision_px=20.0):
    preds = track_sot(model, sequences)
    per_seq = {seq.name: sot_metrics(preds[seq.name], seq.target_boxes(), precision_px) for seq in sequences}
    return merge_sot_reports(list(per_seq.values())), per_seq, preds


def make_detector(seq, tracking):
    if tracking.detector == "oracle":
        return OracleDetector(seq)
    return NoisyDetector(seq, tracking.detector_sigma, tracking.detector_miss_rate, seed=0)


def track_mot(model_or_predictor, sequences, tracking):
    out = {}
    for seq in sequences:
        predictor = model_or_predictor(seq) if callable(model_or_predictor) and not isinstance(
            model_or_predictor, torch.nn.Module) else ModelPredictor(model_or_predictor, tracking.lost_proposal)
        out[seq.name] = run_mot_sequence(seq, predictor, make_detector(seq, tracking),
                                         tracking.threshold, tracking.max_lost_age)
    return out


def pool_frames(pairs):
    """Concatenate several ``(results, gt)`` sequences into one frame map with
    disjoint frame indices and ids, so pooled metrics are computed exactly."""
    res_all, gt_all = {}, {}
    offset = 0
    for k, (res, gt) in enumerate(pairs):
        length = max(list(res) + list(gt), default=-1) + 1
        for t, rows in res.items():
            res_all[offset + t] = [(r[0] + k * _ID_BLOCK, *r[1:]) for r in rows]
        for t, rows in gt.items():
            gt_all[offset + t] = [(r[0] + k * _ID_BLOCK, *r[1:]) for r in rows]
        offset += length
    return res_all, gt_all


def evaluate_mot(model_or_predictor, sequences, tracking, iou_gate=0.5):
    results = track_mot(model_or_predictor, sequences, tracking)
    per_seq = {}
    pairs = []
    for seq in sequences:
        gt = gt_as_results(seq)
        per_seq[seq.name] = mot_metrics(results[seq.name], gt, iou_gate)
        pairs.append((results[seq.name], gt))
    pooled = mot_metrics(*pool_frames(pairs), iou_gate=iou_gate)
    return pooled, per_seq, results


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed)

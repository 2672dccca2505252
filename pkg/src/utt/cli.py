"""``utt`` command line: train / track-sot / track-mot / eval / bench / render / generate.

Every run writes its resolved config to ``<out>/config.yaml``. On failure an
``error.json`` is written to the output directory and the exit status is 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from . import bench as benchmod
from .checkpoint import CheckpointError, checkpoint_config
from .config import apply_overrides, dump_config, load_config, validate_config
from .data import (gt_as_results, load_sequence, read_annotations, read_manifest, read_sot_results,
                   save_sequence, write_manifest, write_results, write_sot_results)
from .experiment import (dataset, evaluate_mot, evaluate_sot, pool_frames, restore_model, track_mot, track_sot,
                         train_experiment)
from .metrics import merge_sot_reports, mot_metrics, sot_metrics

logger = logging.getLogger("utt")

OUT_ROOT_ENV = "UTT_OUT_ROOT"


def _parser():
    p = argparse.ArgumentParser(prog="utt", description="Unified single/multi-object tracker toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable), e.g. --set tracker.pool_size=5")
        sp.add_argument("--seed", type=int, help="override the experiment seed")
        sp.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ROOT_ENV}/<command>)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    def with_ckpt(sp):
        sp.add_argument("--checkpoint", type=Path, help="checkpoint directory (e.g. <train out>/checkpoints/final)")
        sp.add_argument("--data", type=Path, help="directory of saved sequences (default: generated eval set)")
        return sp

    t = common(sub.add_parser("train", help="train a tracker"))
    t.add_argument("--mode", choices=("sot_only", "mot_only", "unified"))
    t.add_argument("--iterations", type=int)

    with_ckpt(common(sub.add_parser("track-sot", help="run single-object tracking and write x,y,w,h files")))
    with_ckpt(common(sub.add_parser("track-mot", help="run multi-object tracking and write MOT CSV files")))

    e = with_ckpt(common(sub.add_parser("eval", help="compute SOT or MOT metrics")))
    e.add_argument("--task", choices=("sot", "mot"), required=True)
    e.add_argument("--results", type=Path, help="directory of <sequence>.txt result files instead of a checkpoint")

    b = common(sub.add_parser("bench", help="attention complexity benchmark"))
    b.add_argument("--repeats", type=int)

    r = common(sub.add_parser("render", help="draw boxes and ids onto frames"))
    r.add_argument("--results", type=Path, required=True, help="directory of <sequence>.txt result files")
    r.add_argument("--task", choices=("sot", "mot"), default="mot")
    r.add_argument("--data", type=Path, help="directory of saved sequences (default: generated eval set)")
    r.add_argument("--sequence", help="only render this sequence")

    g = common(sub.add_parser("generate", help="write a synthetic dataset to disk"))
    g.add_argument("--split", choices=("sot_train", "sot_eval", "mot_train", "mot_eval"), default="mot_eval")
    return p


def _resolve(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mode", None):
        overrides.append(f"mode={args.mode}")
    if getattr(args, "iterations", None) is not None:
        overrides.append(f"train.iterations={args.iterations}")
    if getattr(args, "repeats", None) is not None:
        overrides.append(f"bench.repeats={args.repeats}")
    if getattr(args, "checkpoint", None) is not None:
        overrides.append(("checkpoint", str(args.checkpoint)))
    cfg = load_config(args.config, overrides)
    out = args.out or (Path(cfg.out) if cfg.out else Path(os.environ.get(OUT_ROOT_ENV, "runs")) / args.command)
    return cfg, Path(out)


def _checkpoint_path(cfg, out):
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / "train" / "checkpoints" / "final"


def _model(cfg, out):
    """Rebuild the model with the tracker settings stored in the checkpoint."""
    path = _checkpoint_path(cfg, out)
    if not (path / "manifest.json").exists():
        raise CheckpointError(f"checkpoint not found: expected {path / 'manifest.json'} "
                              f"(train first or pass --checkpoint)")
    saved = checkpoint_config(path)
    if saved:
        tree = apply_overrides(cfg.tree, [("tracker", saved["tracker"]), ("train.dtype", saved["train"]["dtype"])])
        cfg = validate_config(tree)
    return restore_model(cfg, path), cfg


def _sequences(cfg, args, split):
    if getattr(args, "data", None):
        names = read_manifest(args.data)["sequences"]
        return [load_sequence(args.data / n) for n in names]
    return dataset(cfg, split)


def cmd_train(cfg, args, out):
    model, trainer = train_experiment(cfg, out_dir=out)
    summary = {"iterations": trainer.state.iteration, "updates": trainer.state.updates,
               "loss_ema": trainer.state.loss_ema, "checkpoint": str(out / "checkpoints" / "final")}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))


def cmd_track_sot(cfg, args, out):
    model, cfg = _model(cfg, out)
    seqs = _sequences(cfg, args, "sot_eval")
    res_dir = out / "results"
    res_dir.mkdir(parents=True, exist_ok=True)
    for name, boxes in track_sot(model, seqs).items():
        write_sot_results(res_dir / f"{name}.txt", boxes)
    print(f"wrote {len(seqs)} SOT result files to {res_dir}")


def cmd_track_mot(cfg, args, out):
    model, cfg = _model(cfg, out)
    seqs = _sequences(cfg, args, "mot_eval")
    res_dir = out / "results"
    res_dir.mkdir(parents=True, exist_ok=True)
    for name, results in track_mot(model, seqs, cfg.tracking).items():
        write_results(res_dir / f"{name}.txt", results)
    print(f"wrote {len(seqs)} MOT result files to {res_dir}")


def _read_mot_results(path):
    if not path.exists():
        raise FileNotFoundError(f"missing result file {path}")
    return {t: [(tid, box) for tid, box, _ in rows] for t, rows in read_annotations(path).items()}


def _report_text(report, keys):
    return "\n".join(f"{k:<18}{getattr(report, k):>10.4f}" if isinstance(getattr(report, k), float)
                     else f"{k:<18}{getattr(report, k):>10}" for k in keys)


def cmd_eval(cfg, args, out):
    if args.task == "sot":
        if args.results:
            seqs = _sequences(cfg, args, "sot_eval")
            per_seq = {s.name: sot_metrics(read_sot_results(args.results / f"{s.name}.txt"), s.target_boxes(),
                                           cfg.eval["precision_px"]) for s in seqs}
            report = merge_sot_reports(list(per_seq.values()))
        else:
            model, cfg = _model(cfg, out)
            report, per_seq, _ = evaluate_sot(model, _sequences(cfg, args, "sot_eval"), cfg.eval["precision_px"])
        doc = {"task": "sot", "pooled": _sot_summary(report),
               "sequences": {k: _sot_summary(v) for k, v in per_seq.items()}}
        text = _report_text(report, ("success_auc", "precision", "op75"))
    else:
        if args.results:
            seqs = _sequences(cfg, args, "mot_eval")
            pairs = [(_read_mot_results(args.results / f"{s.name}.txt"), gt_as_results(s)) for s in seqs]
            per_seq = {s.name: mot_metrics(r, g, cfg.eval["iou_gate"]) for s, (r, g) in zip(seqs, pairs)}
            report = mot_metrics(*pool_frames(pairs), iou_gate=cfg.eval["iou_gate"])
        else:
            model, cfg = _model(cfg, out)
            report, per_seq, _ = evaluate_mot(model, _sequences(cfg, args, "mot_eval"), cfg.tracking,
                                              cfg.eval["iou_gate"])
        doc = {"task": "mot", "pooled": report.to_dict(), "sequences": {k: v.to_dict() for k, v in per_seq.items()}}
        text = _report_text(report, ("mota", "motp", "idf1", "idp", "idr", "fp", "fn", "idsw", "mt", "ml"))
    (out / f"{args.task}_report.json").write_text(json.dumps(doc, indent=2))
    (out / f"{args.task}_report.txt").write_text(text + "\n")
    print(text)


def _sot_summary(report):
    return {k: v for k, v in report.to_dict().items() if k != "ious"}


def cmd_bench(cfg, args, out):
    b = cfg.bench
    grid = [(s, s, n, b["dim"], b["pool_size"]) for n in b["targets"] for s in b["sizes"]]
    rows = benchmod.bench_attention(grid, repeats=b["repeats"], seed=cfg.seed)
    report = benchmod.write_report(rows, out)
    print(benchmod.format_rows(rows))
    print(json.dumps({k: report[k] for k in ("slope", "corr_variation")}))


def cmd_render(cfg, args, out):
    from PIL import Image, ImageDraw

    split = "sot_eval" if args.task == "sot" else "mot_eval"
    seqs = _sequences(cfg, args, split)
    if args.sequence:
        seqs = [s for s in seqs if s.name == args.sequence]
        if not seqs:
            raise ValueError(f"no sequence named {args.sequence!r}")
    palette = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
               (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212)]
    for seq in seqs:
        path = args.results / f"{seq.name}.txt"
        if args.task == "sot":
            boxes = read_sot_results(path)
            per_frame = {t: [(seq.target_id or 0, b)] for t, b in enumerate(boxes)}
        else:
            per_frame = _read_mot_results(path)
        dst = out / seq.name
        dst.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            img = Image.fromarray(frame).resize((frame.shape[1] * 4, frame.shape[0] * 4), Image.NEAREST)
            draw = ImageDraw.Draw(img)
            for tid, box in per_frame.get(t, []):
                color = palette[int(tid) % len(palette)]
                x1, y1, x2, y2 = (float(v) * 4 for v in box)
                draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
                draw.text((x1 + 2, y1 + 1), str(int(tid)), fill=color)
            img.save(dst / f"{t + 1:06d}.png")
    print(f"rendered {len(seqs)} sequences to {out}")


def cmd_generate(cfg, args, out):
    seqs = dataset(cfg, args.split)
    for seq in seqs:
        save_sequence(seq, out)
    write_manifest(out, seqs, {"split": args.split})
    print(f"wrote {len(seqs)} sequences to {out}")


HANDLERS = {"train": cmd_train, "track-sot": cmd_track_sot, "track-mot": cmd_track_mot, "eval": cmd_eval,
            "bench": cmd_bench, "render": cmd_render, "generate": cmd_generate}


def _write_error(out, exc):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"type": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
    (out / "error.json").write_text(json.dumps(doc, indent=2))


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path(os.environ.get(OUT_ROOT_ENV, "runs")) / args.command
    try:
        cfg, out = _resolve(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        dump_config(cfg, out / "config.yaml")
        run = {"command": args.command, "seed": cfg.seed, "argv": list(sys.argv[1:] if argv is None else argv)}
        (out / "run.json").write_text(json.dumps(run, indent=2))
        HANDLERS[args.command](cfg, args, out)
    except Exception as exc:  # noqa: BLE001 - every failure leaves an error artifact
        _write_error(out, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

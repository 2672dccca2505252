"""Synthetic tracking sequences with exact ground truth, and MOTChallenge-style I/O.

Internally boxes are corner ``(x1, y1, x2, y2)`` in pixels and frames are
0-indexed. On disk boxes are ``(x, y, w, h)`` and frames are 1-indexed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("rect", "ellipse", "blob")


class SpecError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple = (128, 128)  # (height, width)
    num_objects: tuple = (2, 6)
    num_frames: tuple = (20, 60)
    size: tuple = (16, 40)
    shapes: tuple = SHAPES
    max_speed: float = 3.0
    jitter: float = 0.3
    # fraction of objects that spawn late / despawn early (MOT scenes)
    spawn_fraction: float = 0.0
    allow_occlusion: bool = True
    noise: float = 0.02
    seed: int = 0
    # fixed initial (vx, vy) for every object instead of a random heading and speed
    velocity: tuple | None = None

    def with_seed(self, seed):
        return SceneSpec(**{**asdict(self), "seed": int(seed)})


@dataclass
class ObjectTrack:
    id: int
    shape: str
    mask: np.ndarray
    texture: np.ndarray
    start: int
    end: int  # exclusive
    positions: list = field(default_factory=list)  # top-left (x, y) ints per active frame


@dataclass
class AnnotatedSequence:
    frames: np.ndarray  # (T, H, W, 3) uint8
    gt: list  # per frame: list of (track_id, box ndarray(4), class)
    target_id: int | None = None
    name: str = "seq"

    def __len__(self):
        return len(self.frames)

    def boxes_at(self, t):
        rows = self.gt[t]
        ids = np.array([r[0] for r in rows], dtype=np.int64)
        boxes = np.array([r[1] for r in rows], dtype=np.float64).reshape(-1, 4)
        return ids, boxes

    def box_of(self, track_id, t):
        for tid, box, _ in self.gt[t]:
            if tid == track_id:
                return box
        return None

    def track_ids(self):
        return sorted({r[0] for rows in self.gt for r in rows})

    def target_boxes(self):
        return np.array([self.box_of(self.target_id, t) for t in range(len(self))])


def _texture(rng, h, w):
    base = rng.uniform(0.0, 1.0, size=3)
    base = base / max(base.max(), 1e-6)  # saturate
    coarse = rng.uniform(-0.3, 0.3, size=(4, 4, 3))
    ry = (np.arange(h) * 4 // h)
    rx = (np.arange(w) * 4 // w)
    tex = base[None, None, :] * 0.8 + coarse[ry][:, rx]
    return np.clip(tex, 0.0, 1.0)


def _mask(rng, shape, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "rect":
        m = np.ones((h, w), bool)
    elif shape == "ellipse":
        m = u ** 2 + v ** 2 <= 1.0
    else:
        ang = np.arctan2(v, u)
        k = rng.integers(2, 5)
        phase = rng.uniform(0, 2 * np.pi)
        r = 0.8 + 0.2 * np.cos(k * ang + phase)
        m = np.sqrt(u ** 2 + v ** 2) <= r
    # tighten so the ground-truth box hugs the drawn pixels
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def _background(rng, h, w):
    coarse = rng.uniform(0.3, 0.5, size=(h // 16 + 2, w // 16 + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = (coarse[y0][:, x0] * (1 - fy) * (1 - fx) + coarse[y0 + 1][:, x0] * fy * (1 - fx)
         + coarse[y0][:, x0 + 1] * (1 - fy) * fx + coarse[y0 + 1][:, x0 + 1] * fy * fx)
    return np.repeat(g[:, :, None], 3, axis=2)


def _overlaps(box, others):
    for o in others:
        if box[0] < o[2] and o[0] < box[2] and box[1] < o[3] and o[1] < box[3]:
            return True
    return False


def generate_sequence(spec: SceneSpec, name=None, sot=False) -> AnnotatedSequence:
    """Render one sequence. Equal specs give bit-identical output."""
    rng = np.random.default_rng(spec.seed)
    H, W = spec.canvas
    smin, smax = spec.size
    if smin < 2 or smax < smin or smax > min(H, W):
        raise SpecError(f"object size range {spec.size} does not fit canvas {spec.canvas}")
    n_obj = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    n_frames = int(rng.integers(spec.num_frames[0], spec.num_frames[1] + 1))
    if n_obj < 1 or n_frames < 1:
        raise SpecError("a sequence needs at least one object and one frame")
    if not spec.allow_occlusion and n_obj * smin * smin > H * W // 2:
        raise SpecError(f"{n_obj} non-overlapping objects of size >= {smin} do not fit the canvas")
    if not set(spec.shapes) <= set(SHAPES):
        raise SpecError(f"unknown shapes {set(spec.shapes) - set(SHAPES)}")

    background = _background(rng, H, W)
    objects = []
    placed = []
    for i in range(n_obj):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        oh, ow = (int(v) for v in rng.integers(smin, smax + 1, size=2))
        mask = _mask(rng, shape, oh, ow)
        oh, ow = mask.shape
        texture = _texture(rng, oh, ow)
        start, end = 0, n_frames
        if not sot and spec.spawn_fraction > 0 and rng.uniform() < spec.spawn_fraction and n_frames > 4:
            if rng.uniform() < 0.5:
                start = int(rng.integers(1, n_frames // 2))
            else:
                end = int(rng.integers(n_frames // 2 + 1, n_frames))
        for _ in range(200):
            x = float(rng.uniform(0, W - ow))
            y = float(rng.uniform(0, H - oh))
            box = (x, y, x + ow, y + oh)
            if spec.allow_occlusion or not _overlaps(box, placed):
                break
        else:
            raise SpecError("could not place objects without overlap; canvas too small")
        placed.append(box)
        speed = rng.uniform(0, spec.max_speed)
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = (speed * np.cos(ang), speed * np.sin(ang)) if spec.velocity is None else spec.velocity
        obj = ObjectTrack(i + 1, shape, mask, texture, start, end)
        obj._state = [x, y, float(vx), float(vy)]
        objects.append(obj)

    frames = np.empty((n_frames, H, W, 3), np.uint8)
    gt = []
    for t in range(n_frames):
        canvas = background.copy()
        rows = []
        occupied = []
        for obj in objects:
            x, y, vx, vy = obj._state
            oh, ow = obj.mask.shape
            if t > 0:
                vx += rng.normal(0, spec.jitter) if spec.jitter > 0 else 0.0
                vy += rng.normal(0, spec.jitter) if spec.jitter > 0 else 0.0
                nx, ny = x + vx, y + vy
                if nx < 0 or nx > W - ow:
                    vx = -vx
                    nx = min(max(x + vx, 0.0), W - ow)
                if ny < 0 or ny > H - oh:
                    vy = -vy
                    ny = min(max(y + vy, 0.0), H - oh)
                if not spec.allow_occlusion and obj.start <= t < obj.end:
                    cand = (nx, ny, nx + ow, ny + oh)
                    if _overlaps(cand, occupied):
                        nx, ny, vx, vy = x, y, -vx, -vy
                x, y = nx, ny
                obj._state = [x, y, vx, vy]
            if not obj.start <= t < obj.end:
                continue
            ix, iy = int(round(x)), int(round(y))
            occupied.append((ix, iy, ix + ow, iy + oh))
            region = canvas[iy:iy + oh, ix:ix + ow]
            region[obj.mask] = obj.texture[obj.mask]
            obj.positions.append((ix, iy))
            rows.append((obj.id, np.array([ix, iy, ix + ow, iy + oh], np.float64), 1))
        if spec.noise > 0:
            canvas = canvas + rng.normal(0, spec.noise, canvas.shape)
        frames[t] = np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)
        gt.append(rows)

    target = None
    if sot:
        target = int(objects[int(rng.integers(n_obj))].id)
    return AnnotatedSequence(frames, gt, target, name or f"seq{spec.seed:05d}")


def generate_dataset(spec: SceneSpec, count, seed, sot=False, prefix="seq"):
    """``count`` sequences with seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_sequence(spec.with_seed(int(s)), name=f"{prefix}{i:03d}", sot=sot)
            for i, s in enumerate(seeds)]


def sample_pair(seq: AnnotatedSequence, rng, max_interval=200, track_id=None):
    """Pick (reference, tracking) frame indices at most ``max_interval`` apart
    where ``track_id`` (or a random object) is visible in both."""
    ids = [track_id] if track_id is not None else seq.track_ids()
    tid = ids[int(rng.integers(len(ids)))]
    frames = [t for t in range(len(seq)) if seq.box_of(tid, t) is not None]
    r = frames[int(rng.integers(len(frames)))]
    near = [t for t in frames if abs(t - r) <= max_interval]
    return tid, r, near[int(rng.integers(len(near)))]


# -- MOTChallenge-style text files ----------------------------------------------------


def _parse_rows(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 6:
                raise AnnotationError(f"{path}:{lineno}: expected at least 6 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                tid = int(float(parts[1]))
                x, y, w, h = (float(v) for v in parts[2:6])
                extra = [float(v) for v in parts[6:]]
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}") from None
            if frame < 1 or w < 0 or h < 0 or not np.isfinite([x, y, w, h]).all():
                raise AnnotationError(f"{path}:{lineno}: invalid frame index or box")
            rows.append((frame - 1, tid, np.array([x, y, x + w, y + h]), extra))
    return rows


def read_annotations(path):
    """Per-frame ``{frame: [(id, box_xyxy, conf), ...]}`` from ``frame,id,x,y,w,h,...`` lines."""
    out = {}
    seen = set()
    for frame, tid, box, extra in _parse_rows(path):
        if (frame, tid) in seen:
            raise AnnotationError(f"{path}: duplicate id {tid} in frame {frame + 1}")
        seen.add((frame, tid))
        conf = extra[0] if extra else 1.0
        out.setdefault(frame, []).append((tid, box, conf))
    return out


def write_results(path, results):
    """``results`` maps frame -> iterable of (id, box_xyxy[, score])."""
    with open(path, "w") as fh:
        for frame in sorted(results):
            for row in results[frame]:
                tid, box = row[0], np.asarray(row[1], float)
                score = row[2] if len(row) > 2 else 1.0
                x1, y1, x2, y2 = box
                fh.write(f"{frame + 1},{int(tid)},{x1:.6f},{y1:.6f},{x2 - x1:.6f},{y2 - y1:.6f},"
                         f"{float(score):.6f},-1,-1,-1\n")


def write_ground_truth(path, seq: AnnotatedSequence):
    with open(path, "w") as fh:
        for t, rows in enumerate(seq.gt):
            for tid, box, cls in rows:
                x1, y1, x2, y2 = box
                fh.write(f"{t + 1},{tid},{x1:.6f},{y1:.6f},{x2 - x1:.6f},{y2 - y1:.6f},1,{cls},1\n")


def gt_as_results(seq: AnnotatedSequence):
    return {t: [(tid, box, 1.0) for tid, box, _ in rows] for t, rows in enumerate(seq.gt)}


def write_sot_results(path, boxes):
    with open(path, "w") as fh:
        for x1, y1, x2, y2 in np.asarray(boxes, float).reshape(-1, 4):
            fh.write(f"{x1:.6f},{y1:.6f},{x2 - x1:.6f},{y2 - y1:.6f}\n")


def read_sot_results(path):
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                x, y, w, h = (float(v) for v in line.replace("\t", ",").split(","))
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: expected x,y,w,h") from None
            boxes.append([x, y, x + w, y + h])
    return np.array(boxes, float).reshape(-1, 4)


# -- sequences on disk ---------------------------------------------------------------


def save_sequence(seq: AnnotatedSequence, root):
    from PIL import Image

    root = Path(root) / seq.name
    (root / "img").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        Image.fromarray(frame).save(root / "img" / f"{t + 1:06d}.png")
    write_ground_truth(root / "gt.txt", seq)
    meta = {"name": seq.name, "length": len(seq), "height": int(seq.frames.shape[1]),
            "width": int(seq.frames.shape[2]), "target_id": seq.target_id}
    (root / "seqinfo.json").write_text(json.dumps(meta, indent=2))
    return root


def load_sequence(path) -> AnnotatedSequence:
    from PIL import Image

    path = Path(path)
    meta = json.loads((path / "seqinfo.json").read_text())
    frames = np.stack([np.asarray(Image.open(path / "img" / f"{t + 1:06d}.png").convert("RGB"))
                       for t in range(meta["length"])])
    ann = read_annotations(path / "gt.txt")
    gt = [[(tid, box, 1) for tid, box, _ in ann.get(t, [])] for t in range(meta["length"])]
    return AnnotatedSequence(frames, gt, meta.get("target_id"), meta["name"])


def write_manifest(root, sequences, extra=None):
    root = Path(root)
    index = {"sequences": [s.name for s in sequences], **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(index, indent=2))


def read_manifest(root):
    return json.loads((Path(root) / "manifest.json").read_text())


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)

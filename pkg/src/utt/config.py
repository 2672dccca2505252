"""Experiment configuration: a nested key-value tree with documented defaults,
strict key checking and range validation."""

from __future__ import annotations

import copy
import difflib
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .data import SceneSpec
from .model import TrackerConfig
from .training import TRAIN_MODES, LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


_SCENE_DEFAULTS = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(SceneSpec()).items()
                   if k not in ("seed", "velocity")}

DEFAULTS = {
    "mode": "unified",
    "seed": 0,
    "out": None,
    "checkpoint": None,
    "tracker": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(TrackerConfig()).items()},
    "train": {
        "iterations": 2000,
        "lr": 1e-4,
        "lr_min": 1e-5,
        "weight_decay": 5e-3,
        "grad_clip": 0.0,
        "sot_batch": 8,
        "mot_batch": 4,
        "noise_sigma": 0.1,
        "min_proposal_iou": 0.1,
        "max_frame_interval": 200,
        "mot_frame_interval": 1,
        "augment": True,
        "lambda_giou": 2.0,
        "lambda_l1": 5.0,
        "log_every": 50,
        "checkpoint_every": 500,
        "dtype": "float32",
    },
    "data": {
        "sot_train": {"count": 20, "seed": 1, "scene": dict(_SCENE_DEFAULTS)},
        "sot_eval": {"count": 5, "seed": 2, "scene": dict(_SCENE_DEFAULTS)},
        "mot_train": {"count": 20, "seed": 3, "scene": {**_SCENE_DEFAULTS, "spawn_fraction": 0.3}},
        "mot_eval": {"count": 5, "seed": 4, "scene": {**_SCENE_DEFAULTS, "spawn_fraction": 0.3}},
    },
    "tracking": {
        "threshold": 0.9,
        "max_lost_age": 30,
        "lost_proposal": "last_box",
        "detector": "oracle",
        "detector_sigma": 0.02,
        "detector_miss_rate": 0.0,
    },
    "eval": {"iou_gate": 0.5, "precision_px": 20.0},
    "bench": {"sizes": [16, 32, 64], "targets": [1, 8], "dim": 64, "pool_size": 7, "repeats": 9},
}

# short names accepted in overrides
ALIASES = {"K": "tracker.pool_size", "L": "tracker.iterations", "threshold": "tracking.threshold"}

_CHOICES = {
    "mode": TRAIN_MODES,
    "tracker.mca_source": ("tracking", "reference"),
    "train.dtype": ("float32", "float64"),
    "tracking.lost_proposal": ("last_box", "redetect"),
    "tracking.detector": ("oracle", "noisy"),
}


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_open_closed(v):
    return 0 < v <= 1


def _unit_closed(v):
    return 0 <= v <= 1


_RANGES = {
    "tracker.stride": (_positive, "> 0"),
    "tracker.dim": (_positive, "> 0"),
    "tracker.heads": (_positive, "> 0"),
    "tracker.ffn_hidden": (_positive, "> 0"),
    "tracker.pool_size": (_positive, ">= 1"),
    "tracker.iterations": (_non_negative, ">= 0"),
    "train.iterations": (_non_negative, ">= 0"),
    "train.lr": (_positive, "> 0"),
    "train.lr_min": (_non_negative, ">= 0"),
    "train.weight_decay": (_non_negative, ">= 0"),
    "train.grad_clip": (_non_negative, ">= 0"),
    "train.sot_batch": (_positive, ">= 1"),
    "train.mot_batch": (_positive, ">= 1"),
    "train.noise_sigma": (_positive, "> 0"),
    "train.min_proposal_iou": (_unit_closed, "in [0, 1]"),
    "train.max_frame_interval": (_non_negative, ">= 0"),
    "train.mot_frame_interval": (_non_negative, ">= 0"),
    "train.lambda_giou": (_non_negative, ">= 0"),
    "train.lambda_l1": (_non_negative, ">= 0"),
    "train.log_every": (_positive, ">= 1"),
    "train.checkpoint_every": (_non_negative, ">= 0"),
    "tracking.threshold": (_unit_open_closed, "in (0, 1]"),
    "tracking.max_lost_age": (_non_negative, ">= 0"),
    "tracking.detector_sigma": (_non_negative, ">= 0"),
    "tracking.detector_miss_rate": (_unit_closed, "in [0, 1]"),
    "eval.iou_gate": (_unit_open_closed, "in (0, 1]"),
    "eval.precision_px": (_non_negative, ">= 0"),
    "bench.dim": (_positive, "> 0"),
    "bench.pool_size": (_positive, ">= 1"),
    "bench.repeats": (_positive, ">= 1"),
}


@dataclass(frozen=True)
class DataStream:
    count: int
    seed: int
    scene: SceneSpec


@dataclass(frozen=True)
class TrackingConfig:
    threshold: float = 0.9
    max_lost_age: int = 30
    lost_proposal: str = "last_box"
    detector: str = "oracle"
    detector_sigma: float = 0.02
    detector_miss_rate: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    seed: int
    out: str | None
    checkpoint: str | None
    tracker: TrackerConfig
    train: TrainConfig
    dtype: str
    checkpoint_every: int
    data: dict
    tracking: TrackingConfig
    eval: dict
    bench: dict
    tree: dict  # the resolved key-value tree this config was built from

    def needs(self, stream):
        """Whether the training mode consumes the ``sot`` or ``mot`` data stream."""
        return self.mode == "unified" or self.mode == f"{stream}_only"


def _all_keys(tree, prefix=""):
    for k, v in tree.items():
        path = f"{prefix}{k}"
        yield path
        if isinstance(v, dict):
            yield from _all_keys(v, path + ".")


def _unknown(path, siblings):
    name = path.rsplit(".", 1)[-1]
    candidates = list(siblings)
    prefix = path[: len(path) - len(name)]
    close = [prefix + c for c in difflib.get_close_matches(name, candidates, n=1, cutoff=0.5)]
    if not close:
        full = difflib.get_close_matches(path, list(_all_keys(DEFAULTS)) + list(ALIASES), n=1, cutoff=0.5)
        close = full
    hint = f"; did you mean {close[0]!r}?" if close else f"; valid keys here: {sorted(candidates)}"
    return ConfigError(f"unknown config key {path!r}{hint}")


def _coerce(path, value, default):
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path} must be a string or null, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        if default and all(isinstance(d, int) and not isinstance(d, bool) for d in default):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{path} must be a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _merge(defaults, tree, prefix=""):
    out = copy.deepcopy(defaults)
    if tree is None:
        return out
    if not isinstance(tree, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping, got {tree!r}")
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise _unknown(path, defaults.keys())
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _coerce(path, value, defaults[key])
    return out


def _check_ranges(tree):
    def get(path):
        node = tree
        for part in path.split("."):
            node = node[part]
        return node

    for path, choices in _CHOICES.items():
        if get(path) not in choices:
            raise ConfigError(f"{path} must be one of {list(choices)}, got {get(path)!r}")
    for path, (ok, text) in _RANGES.items():
        if not ok(get(path)):
            raise ConfigError(f"{path} must be {text}, got {get(path)!r}")
    if tree["train"]["lambda_giou"] == 0 and tree["train"]["lambda_l1"] == 0:
        raise ConfigError("train.lambda_giou and train.lambda_l1 cannot both be 0")
    for name, stream in tree["data"].items():
        if stream["count"] < 1:
            raise ConfigError(f"data.{name}.count must be >= 1, got {stream['count']}")


def validate_config(tree=None) -> ExperimentConfig:
    """Merge ``tree`` over the defaults and build typed configs.

    Raises :class:`ConfigError` on unknown keys (with the closest valid key),
    type mismatches and out-of-range values.
    """
    resolved = _merge(DEFAULTS, tree or {})
    _check_ranges(resolved)
    t = resolved["tracker"]
    try:
        tracker = TrackerConfig(**{**t, "backbone_widths": tuple(t["backbone_widths"])})
        tracker.backbone  # noqa: B018 - validates stride against the stage count
    except ValueError as e:
        raise ConfigError(f"tracker: {e}") from e
    tr = dict(resolved["train"])
    loss = LossWeights(tr.pop("lambda_giou"), tr.pop("lambda_l1"))
    dtype = tr.pop("dtype")
    checkpoint_every = tr.pop("checkpoint_every")
    train = TrainConfig(mode=resolved["mode"], seed=resolved["seed"], loss=loss, **tr)
    data = {}
    for name, stream in resolved["data"].items():
        scene_tree = {k: (tuple(v) if isinstance(v, list) else v) for k, v in stream["scene"].items()}
        data[name] = DataStream(stream["count"], stream["seed"], SceneSpec(**scene_tree))
    return ExperimentConfig(
        mode=resolved["mode"], seed=resolved["seed"], out=resolved["out"], checkpoint=resolved["checkpoint"],
        tracker=tracker, train=train, dtype=dtype, checkpoint_every=checkpoint_every, data=data,
        tracking=TrackingConfig(**resolved["tracking"]), eval=dict(resolved["eval"]),
        bench=dict(resolved["bench"]), tree=resolved,
    )


def parse_override(text):
    """``"a.b=value"`` -> ``("a.b", parsed value)``; values are parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" (no dot) as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return ALIASES.get(key, key), value


def apply_overrides(tree, overrides):
    tree = copy.deepcopy(tree or {})
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        key = ALIASES.get(key, key)
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping value")
        node[parts[-1]] = value
    return tree


def load_config(path=None, overrides=()):
    tree = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            tree = yaml.safe_load(fh) or {}
    return validate_config(apply_overrides(tree, overrides))


def dump_config(cfg: ExperimentConfig, path):
    """Write the fully resolved tree; loading it back yields an equal config."""
    Path(path).write_text(yaml.safe_dump(cfg.tree, sort_keys=True))


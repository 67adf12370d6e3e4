#!/usr/bin/env python3
"""
Run configuration for the LSTR detector
Defaults with provenance, file/--set merging, validation, and builders for
the per-stage configuration objects
"""

import copy
import json
from typing import Any, Dict, Iterable, List, Optional, Tuple

from errors import ConfigError
from linking_eval import EvalConfig
from numerics import LrSchedule
from tpn import BackboneConfig
from tubelet_geometry import AnchorGrid

MODULE = "config"

DEFAULT_CONFIG: Dict[str, Any] = {
    "data": {
        "num_videos": 20,
        "heldout_videos": 10,
        "heldout_seed_offset": 1000,
        "frames_per_video": 16,
        "image_size": 64,
        "num_classes": 3,
        "min_actors": 1,
        "max_actors": 2,
        "min_size": 10,
        "max_size": 20,
        "min_speed": 0.5,
        "max_speed": 2.0,
        "noise": 0.02,
        "partial_presence_prob": 0.0,
        "clip_length": 8,
        "clip_stride": None,
    },
    "tpn": {
        "channels": [8, 16, 32],
        "spatial_kernel": 3,
        "temporal_kernel": 3,
        "anchor_scales": [8.0, 16.0, 32.0],
        "aspect_ratios": [0.5, 1.0, 2.0],
        "positive_iou": 0.5,
        "negative_iou_ceiling": None,
        "minibatch": 32,
        "positive_fraction": 0.5,
        "lambda": 1.0,
        "nms_threshold": 0.7,
        "proposal_cap": 300,
        "train_proposal_cap": 300,
    },
    "short_term": {
        "embed_dim": 32,
        "use_context": True,
        "use_erasing": True,
    },
    "long_term": {
        "enabled": True,
        "radius": 4,
        "gamma": 1.0,
        "edge_terms": "both",
        "neighbors_k": 10,
    },
    "classifier": {
        "mode": "single_label",
        "dropout": 0.5,
        "background_class": True,
        "rois_per_clip": 16,
        "positive_fraction": 0.5,
        "positive_iou": 0.5,
    },
    "train": {
        "epochs": 10,
        "base_lr": 0.001,
        "warmup_start_lr": 0.0001,
        "warmup_epochs": 0.3,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "schedule": "joint",
        "tpn_pretrain_epochs": 2,
        "grad_clip": 10.0,
    },
    "link": {
        "iou_weight": 1.0,
        "score_threshold": 0.0,
    },
    "eval": {
        "iou_threshold": 0.5,
        "modes": ["video", "frame"],
    },
    "experiments": {
        "seeds": [0, 1, 2, 3, 4],
        "variants": ["tpn_only", "short_term_only", "full"],
        "radii": [3, 4, 5, 6],
        "edge_terms": ["similarity", "overlap", "both"],
    },
    "ui": {
        "verbose": False,
        "quiet": False,
        "progress": True,
    },
    "paths": {
        "out": "runs/default",
        "data": None,
        "checkpoint": None,
    },
    "seed": 0,
}

_PUBLISHED = (
    "tpn.positive_iou", "tpn.lambda",
    "tpn.nms_threshold", "tpn.proposal_cap", "tpn.train_proposal_cap",
    "long_term.radius", "long_term.gamma", "long_term.neighbors_k",
    "classifier.mode", "classifier.dropout",
    "train.epochs", "train.base_lr", "train.warmup_start_lr", "train.warmup_epochs",
    "train.momentum", "train.weight_decay", "eval.iou_threshold",
    "short_term.use_context", "short_term.use_erasing", "long_term.enabled",
)
_ARTIFACT = (
    "ui.verbose", "ui.quiet", "ui.progress", "paths.out", "paths.data", "paths.checkpoint",
    "seed", "data.heldout_seed_offset", "eval.modes", "experiments.seeds",
    "experiments.variants", "experiments.radii", "experiments.edge_terms", "train.schedule", "train.grad_clip",
    "train.tpn_pretrain_epochs",
)

VARIANTS = {
    "tpn_only": {"short_term.use_context": False, "short_term.use_erasing": True, "long_term.enabled": False},
    "attention_no_erase": {"short_term.use_context": True, "short_term.use_erasing": False,
                           "long_term.enabled": False},
    "short_term_only": {"short_term.use_context": True, "short_term.use_erasing": True, "long_term.enabled": False},
    "full": {"short_term.use_context": True, "short_term.use_erasing": True, "long_term.enabled": True},
}


def flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested sections -> {'section.key': value}"""
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _provenance() -> Dict[str, str]:
    table = {}
    for key in flatten(DEFAULT_CONFIG):
        if key in _PUBLISHED:
            table[key] = "published"
        elif key in _ARTIFACT:
            table[key] = "artifact"
        else:
            table[key] = "desk-scale"
    return table


PROVENANCE: Dict[str, str] = _provenance()


def merge(base: Dict[str, Any], overrides: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    """Deep merge; keys absent from base are rejected"""
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        name = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown configuration key '{name}'", MODULE)
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{name}' is a section, got {type(value).__name__}", MODULE)
            out[key] = merge(out[key], value, f"{name}.")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"'{name}' is a value, got a section", MODULE)
            out[key] = value
    return out


def parse_assignment(text: str) -> Tuple[str, Any]:
    """'tpn.nms_threshold=0.6' -> ('tpn.nms_threshold', 0.6); non-JSON values stay strings"""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got '{text}'", MODULE)
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _nest(key: str, value: Any) -> Dict[str, Any]:
    node: Dict[str, Any] = value
    for part in reversed(key.split(".")):
        node = {part: node}
    return node


class RunConfig:
    """Resolved configuration with dotted access"""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = merge(DEFAULT_CONFIG, values or {})
        validate(self.values)

    def __getitem__(self, dotted: str) -> Any:
        node: Any = self.values
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown configuration key '{dotted}'", MODULE)
            node = node[part]
        return node

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Copy with dotted overrides applied"""
        values = self.values
        for key, value in overrides.items():
            values = merge(values, _nest(key, value))
        return RunConfig(values)

    def to_document(self) -> Dict[str, Any]:
        return {"config": copy.deepcopy(self.values), "provenance": dict(PROVENANCE)}

    def rows(self) -> List[Tuple[str, Any, str]]:
        return [(k, json.dumps(v), PROVENANCE.get(k, "")) for k, v in flatten(self.values).items()]

    # -- stage builders ---------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self["seed"])

    @property
    def clip_length(self) -> int:
        return int(self["data.clip_length"])

    @property
    def clip_stride(self) -> int:
        return int(self["data.clip_stride"] or self.clip_length)

    @property
    def multi_label(self) -> bool:
        return self["classifier.mode"] == "multi_label"

    @property
    def num_outputs(self) -> int:
        """Classifier width: K, plus a background column in single-label mode when enabled"""
        k = int(self["data.num_classes"])
        if not self.multi_label and self["classifier.background_class"]:
            return k + 1
        return k

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            T=self.clip_length,
            spatial_kernel=int(self["tpn.spatial_kernel"]),
            temporal_kernel=int(self["tpn.temporal_kernel"]),
            channels=tuple(int(c) for c in self["tpn.channels"]),
        )

    def anchor_grid(self) -> AnchorGrid:
        stride = self.backbone_config().total_stride
        size = int(self["data.image_size"])
        if size % stride:
            raise ConfigError(f"image size {size} not divisible by backbone stride {stride}", MODULE)
        return AnchorGrid(size // stride, size // stride, stride,
                          tuple(float(s) for s in self["tpn.anchor_scales"]),
                          tuple(float(r) for r in self["tpn.aspect_ratios"]),
                          self.clip_length)

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(float(self["train.base_lr"]), float(self["train.warmup_start_lr"]),
                          float(self["train.warmup_epochs"]), int(self["train.epochs"]))

    def eval_config(self, mode: str, iou_threshold: Optional[float] = None) -> EvalConfig:
        delta = self["eval.iou_threshold"] if iou_threshold is None else iou_threshold
        try:
            return EvalConfig(float(delta), mode)
        except ValueError as exc:
            raise ConfigError(str(exc), MODULE) from exc

    def synth_config(self, split: str = "train"):
        from data_synth import SynthConfig

        heldout = split != "train"
        return SynthConfig(
            num_videos=int(self["data.heldout_videos"] if heldout else self["data.num_videos"]),
            frames_per_video=int(self["data.frames_per_video"]),
            image_size=int(self["data.image_size"]),
            num_classes=int(self["data.num_classes"]),
            min_actors=int(self["data.min_actors"]),
            max_actors=int(self["data.max_actors"]),
            min_size=int(self["data.min_size"]),
            max_size=int(self["data.max_size"]),
            min_speed=float(self["data.min_speed"]),
            max_speed=float(self["data.max_speed"]),
            noise=float(self["data.noise"]),
            clip_length=self.clip_length,
            partial_presence_prob=float(self["data.partial_presence_prob"]),
            rng_seed=self.seed + (int(self["data.heldout_seed_offset"]) if heldout else 0),
            video_prefix="heldout" if heldout else "video",
        )


# value kinds for keys whose default is null
_NULLABLE_KINDS = {
    "data.clip_stride": int,
    "tpn.negative_iou_ceiling": float,
    "train.grad_clip": float,
    "paths.data": str,
    "paths.checkpoint": str,
}


def _kind_matches(value: Any, kind: type) -> bool:
    if kind is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if kind is float:
        return isinstance(value, (int, float))
    return isinstance(value, kind)


def check_types(values: Dict[str, Any]):
    """Every value must have the kind of its default; lists are checked element-wise"""
    flat = flatten(values)
    for key, default in flatten(DEFAULT_CONFIG).items():
        value = flat[key]
        if default is None or key in _NULLABLE_KINDS:
            kind = _NULLABLE_KINDS[key]
            ok = value is None or _kind_matches(value, kind)
        elif isinstance(default, list):
            kind = type(default[0])
            ok = isinstance(value, list) and all(_kind_matches(v, kind) for v in value)
        else:
            kind = type(default)
            ok = _kind_matches(value, kind)
        if not ok:
            raise ConfigError(f"'{key}' expects {kind.__name__} values, got {json.dumps(value)}", MODULE)


def _check(condition: bool, message: str):
    if not condition:
        raise ConfigError(message, MODULE)


def validate(values: Dict[str, Any]):
    """Range checks for every tunable that has one"""
    check_types(values)
    c = RunConfigView(values)
    _check(0.0 < c("tpn.nms_threshold") <= 1.0, "tpn.nms_threshold must be in (0, 1]")
    _check(c("tpn.proposal_cap") >= 1 and c("tpn.train_proposal_cap") >= 1, "proposal caps must be >= 1")
    _check(0.0 < c("tpn.positive_iou") < 1.0, "tpn.positive_iou must be in (0, 1)")
    ceiling = c("tpn.negative_iou_ceiling")
    _check(ceiling is None or 0.0 < ceiling <= c("tpn.positive_iou"),
           "tpn.negative_iou_ceiling must be null or in (0, positive_iou]")
    _check(c("tpn.minibatch") >= 1, "tpn.minibatch must be >= 1")
    _check(0.0 <= c("tpn.positive_fraction") <= 1.0, "tpn.positive_fraction must be in [0, 1]")
    _check(c("tpn.lambda") >= 0.0, "tpn.lambda must be >= 0")
    _check(len(c("tpn.channels")) >= 1 and min(c("tpn.channels")) >= 1, "tpn.channels must be positive")
    _check(c("tpn.spatial_kernel") % 2 == 1 and c("tpn.temporal_kernel") % 2 == 1, "kernels must be odd")
    _check(c("short_term.embed_dim") >= 1, "short_term.embed_dim must be >= 1")
    _check(c("long_term.radius") >= 0, "long_term.radius must be >= 0")
    _check(c("long_term.gamma") >= 0.0, "long_term.gamma must be >= 0")
    _check(c("long_term.edge_terms") in ("both", "similarity", "overlap"),
           "long_term.edge_terms must be both, similarity or overlap")
    _check(c("long_term.neighbors_k") >= 1, "long_term.neighbors_k must be >= 1")
    _check(c("classifier.mode") in ("single_label", "multi_label"),
           "classifier.mode must be single_label or multi_label")
    _check(0.0 <= c("classifier.dropout") < 1.0, "classifier.dropout must be in [0, 1)")
    _check(c("classifier.rois_per_clip") >= 1, "classifier.rois_per_clip must be >= 1")
    _check(0.0 < c("classifier.positive_iou") < 1.0, "classifier.positive_iou must be in (0, 1)")
    _check(c("data.num_classes") >= 1, "data.num_classes must be >= 1")
    _check(c("data.num_classes") + (1 if c("classifier.background_class")
                                    and c("classifier.mode") == "single_label" else 0) >= 2,
           "the classifier needs at least two outputs")
    _check(c("data.clip_length") >= 1, "data.clip_length must be >= 1")
    stride = c("data.clip_stride")
    _check(stride is None or 1 <= stride <= c("data.clip_length"),
           "data.clip_stride must be null or in 1..clip_length")
    _check(c("train.epochs") >= 1, "train.epochs must be >= 1")
    _check(0.0 <= c("train.warmup_epochs") <= c("train.epochs"), "train.warmup_epochs outside 0..epochs")
    _check(0.0 <= c("train.momentum") < 1.0, "train.momentum must be in [0, 1)")
    _check(c("train.weight_decay") >= 0.0, "train.weight_decay must be >= 0")
    _check(c("train.schedule") in ("joint", "staged"), "train.schedule must be joint or staged")
    _check(c("train.grad_clip") is None or c("train.grad_clip") > 0, "train.grad_clip must be null or > 0")
    _check(0.0 < c("eval.iou_threshold") < 1.0, "eval.iou_threshold must be in (0, 1)")
    _check(set(c("eval.modes")) <= {"video", "frame"} and len(c("eval.modes")) >= 1,
           "eval.modes must list video and/or frame")
    _check(all(v in VARIANTS for v in c("experiments.variants")), f"experiment variants must be in {list(VARIANTS)}")
    _check(all(r >= 0 for r in c("experiments.radii")), "experiment radii must be >= 0")
    _check(all(e in ("both", "similarity", "overlap") for e in c("experiments.edge_terms")),
           "experiment edge terms must be both, similarity or overlap")


class RunConfigView:
    """Dotted lookup over a raw nested dict"""

    def __init__(self, values: Dict[str, Any]):
        self.values = values

    def __call__(self, dotted: str) -> Any:
        node: Any = self.values
        for part in dotted.split("."):
            node = node[part]
        return node


def load_config_file(path) -> Dict[str, Any]:
    """A plain config document, or a resolved-config echo ({'config': ..., 'provenance': ...})"""
    from utils import load_json

    document = load_json(path)
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object", MODULE)
    if "config" in document and "provenance" in document:
        document = document["config"]
    return document


def resolve(config_path=None, assignments: Iterable[str] = (), seed: Optional[int] = None,
            out: Optional[str] = None) -> RunConfig:
    """Defaults <- config file <- --set assignments <- dedicated flags"""
    values = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        values = merge(values, load_config_file(config_path))
    for text in assignments:
        key, value = parse_assignment(text)
        values = merge(values, _nest(key, value))
    if seed is not None:
        values["seed"] = int(seed)
    if out is not None:
        values["paths"]["out"] = str(out)
    return RunConfig(values)

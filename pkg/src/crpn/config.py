"""Strict INI-style run configuration with full defaulting.

One file drives a whole experiment: sections scene/backbone/cascade/roi/
train/ablate plus [run] for the output directory. Every key is checked
against the known schema (unknown sections or keys are rejected by name),
and an empty or absent file yields the package defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .cascade import CascadeConfig
from .roi import RoiConfig
from .synth import SceneSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class AblateConfig:
    preset: str = "stages"
    r_values: tuple = (0.9, 0.99, 0.999)
    lambda_values: tuple = (0.0, 0.1, 0.3)
    seeds: tuple = (1, 2, 3)


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    output_dir: str | None = None

    def validate(self) -> None:
        self.scene.validate()
        self.backbone.validate()
        self.cascade.validate()
        self.roi.validate()
        self.train.validate()
        if self.scene.image_size != self.backbone.input_size:
            raise ConfigError(
                f"scene.image_size {self.scene.image_size} must equal "
                f"backbone.input_size {self.backbone.input_size}"
            )
        if self.roi.num_classes != len(self.scene.classes):
            raise ConfigError(
                f"roi.num_classes {self.roi.num_classes} must match the "
                f"{len(self.scene.classes)} scene classes"
            )


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _int_pair(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ConfigError(f"expected two integers, got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _float_pair(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ConfigError(f"expected two numbers, got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _int_list(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(",", " ").split() if p)


def _float_list(text: str) -> tuple:
    return tuple(float(p) for p in text.replace(",", " ").split() if p)


def _str_list(text: str) -> tuple:
    return tuple(p for p in text.replace(",", " ").split() if p)


def _lr_schedule(text: str) -> tuple:
    phases = []
    for chunk in text.replace(",", " ").split():
        if ":" not in chunk:
            raise ConfigError(f"lr_schedule phase must look like ITERS:LR, got {chunk!r}")
        iters, lr = chunk.split(":", 1)
        phases.append((int(iters), float(lr)))
    if not phases:
        raise ConfigError("lr_schedule must contain at least one ITERS:LR phase")
    return tuple(phases)


_SCHEMA = {
    "scene": {
        "image_size": int,
        "num_images": int,
        "classes": _str_list,
        "objects_per_image": _int_pair,
        "object_size": _float_pair,
        "clutter_density": float,
        "noise_std": float,
        "seed": int,
    },
    "backbone": {
        "channels": int,
        "stem_channels": int,
        "input_size": int,
        "stride_at_tap": int,
    },
    "cascade": {
        "num_stages": int,
        "reject_threshold": float,
        "lambda_f": float,
        "lambda_p": float,
        "stage_batches": _int_list,
        "pos_fraction": float,
        "assign_pos_iou": float,
        "assign_neg_iou": float,
        "proposal_nms_iou": float,
        "proposal_topk": int,
        "anchor_scales": _float_list,
        "anchor_ratios": _float_list,
        "use_feature_chain": _parse_bool,
        "use_score_chain": _parse_bool,
    },
    "roi": {
        "pool_size": int,
        "num_classes": int,
        "roi_batch": int,
        "fg_fraction": float,
        "fg_iou": float,
        "hidden": int,
        "det_score_thresh": float,
        "det_nms_iou": float,
        "max_dets": int,
        "include_gt_proposals": _parse_bool,
    },
    "train": {
        "lr_schedule": _lr_schedule,
        "momentum": float,
        "weight_decay": float,
        "seed": int,
        "eval_every": int,
        "max_iterations": int,
    },
    "ablate": {
        "preset": str,
        "r_values": _float_list,
        "lambda_values": _float_list,
        "seeds": _int_list,
    },
    "run": {
        "output_dir": str,
    },
}


def load_run_config(path=None) -> RunConfig:
    """Parse and validate a config file; None gives pure defaults."""
    cfg = RunConfig()
    if path is None:
        cfg.validate()
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(strict=True, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"{path}: unknown section [{section}], expected one of {sorted(_SCHEMA)}"
            )
        schema = _SCHEMA[section]
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in section [{section}] "
                    f"(known keys: {sorted(schema)})"
                )
            convert = schema[key]
            try:
                value = convert(raw)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc
            if section == "run":
                cfg.output_dir = value
            else:
                setattr(getattr(cfg, section), key, value)

    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg

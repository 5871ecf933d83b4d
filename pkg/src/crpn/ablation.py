"""Ablation runner: train variant configs across seeds and tabulate AP.

Presets mirror the studies the cascade design calls for: stage count
(deepest stages kept), feature/score chain switches, and grids over the
reject threshold and the fusion weight. Variants differ only in the
ablated switch; everything else (data, seeds, schedule) is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backbone import BackboneConfig
from .cascade import CascadeConfig
from .detector import Detector
from .evaluate import evaluate_detector
from .roi import RoiConfig
from .train import TrainConfig, train

PRESETS = ("stages", "chains", "reject", "fusion")


@dataclass
class Variant:
    name: str
    cascade_cfg: CascadeConfig
    sweep: str | None = None  # "r" or "lambda_f" for grid presets
    x: float | None = None


def build_preset_variants(
    preset: str,
    base: CascadeConfig,
    r_values=(0.9, 0.99, 0.999),
    lambda_values=(0.0, 0.1, 0.3),
) -> list:
    if preset == "stages":
        return [
            Variant(
                name=f"stages_{t}",
                cascade_cfg=replace(base, num_stages=t, stage_batches=tuple(base.stage_batches[-t:])),
            )
            for t in range(1, base.num_stages + 1)
        ]
    if preset == "chains":
        combos = [
            ("chains_none", False, False),
            ("chains_feature", True, False),
            ("chains_score", False, True),
            ("chains_both", True, True),
        ]
        return [
            Variant(name=n, cascade_cfg=replace(base, use_feature_chain=f, use_score_chain=s))
            for n, f, s in combos
        ]
    if preset == "reject":
        return [
            Variant(
                name=f"reject_{r:g}",
                cascade_cfg=replace(base, reject_threshold=float(r)),
                sweep="r",
                x=float(r),
            )
            for r in r_values
        ]
    if preset == "fusion":
        return [
            Variant(
                name=f"fusion_{lf:g}",
                cascade_cfg=replace(base, lambda_f=float(lf), lambda_p=1.0 - float(lf)),
                sweep="lambda_f",
                x=float(lf),
            )
            for lf in lambda_values
        ]
    raise ValueError(f"unknown ablation preset {preset!r}, expected one of {PRESETS}")


@dataclass
class AblationResult:
    rows: list  # [variant, seed, map50, ap_class1, ...]
    summary: list  # [variant, mean_map50, std_map50, n_seeds]
    variants: list


def ablate(
    train_records: list,
    test_records: list,
    variants: list,
    seeds: list,
    backbone_cfg: BackboneConfig,
    roi_cfg: RoiConfig,
    train_cfg: TrainConfig,
    progress=None,
) -> AblationResult:
    """Run every (variant, seed) pair; returns per-run rows plus mean/std."""
    if len(variants) < 2:
        raise ValueError("ablation needs at least 2 variants to compare")
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    rows = []
    scores: dict[str, list] = {v.name: [] for v in variants}
    for variant in variants:
        for seed in seeds:
            detector = Detector(backbone_cfg, variant.cascade_cfg, roi_cfg, seed=seed)
            cfg = replace(train_cfg, seed=seed)
            train(train_records, detector, cfg)
            report = evaluate_detector(detector, test_records)
            rows.append([variant.name, seed, report.map50] + list(report.ap50_per_class))
            scores[variant.name].append(report.map50)
            if progress is not None:
                progress(variant.name, seed, report.map50)
    summary = []
    for variant in variants:
        values = np.array(scores[variant.name])
        summary.append([variant.name, float(values.mean()), float(values.std()), len(values)])
    return AblationResult(rows=rows, summary=summary, variants=variants)

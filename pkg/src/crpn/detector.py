"""Full two-stage detector: trunk taps -> cascade stages -> RoI head.

One Detector owns the merged parameter dict, the anchor grid, and the
forward paths for training (joint loss over sampled batches) and
inference (proposal generation plus per-class detections). Sampling and
rejection decisions can be frozen into a TrainingStructure so the loss
becomes a smooth function of the parameters, which finite-difference
gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone_params
from .cascade import (
    Assignment,
    CascadeConfig,
    ProposalSet,
    assign_labels,
    inference_keep_mask,
    init_cascade_params,
    propose,
    regression_head,
    run_cascade,
    sample_stage_batch,
)
from .geometry import Box, boxes_to_array, clip_array, decode_array, generate_anchors, nms_array
from .losses import LossBreakdown, cascade_cls_loss, detection_loss, loc_loss, stage_weights
from .rng import Rng
from .roi import (
    RoiBatch,
    RoiConfig,
    assign_and_sample_rois,
    init_roi_params,
    roi_forward,
    roi_loss,
    roi_max_pool,
)
from .snapshot import load_snapshot, save_snapshot
from .synth import SceneRecord
from .tensor import Tensor


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float


@dataclass
class TrainingStructure:
    """Frozen sampling decisions so the loss is smooth in the parameters."""

    stage_batches: list
    stage_mus: list
    roi_batch: RoiBatch


@dataclass
class StepDiagnostics:
    active_counts: list
    rejection_rates: list
    mean_true_scores: list
    num_proposals: int


@dataclass
class InferenceResult:
    detections: list
    stage_scores: list  # chained per-anchor score arrays, one per stage
    keep_mask: np.ndarray
    proposals: ProposalSet


class Detector:
    def __init__(
        self,
        backbone_cfg: BackboneConfig | None = None,
        cascade_cfg: CascadeConfig | None = None,
        roi_cfg: RoiConfig | None = None,
        seed: int = 0,
    ):
        self.backbone_cfg = backbone_cfg or BackboneConfig()
        self.cascade_cfg = cascade_cfg or CascadeConfig()
        self.roi_cfg = roi_cfg or RoiConfig()
        self.backbone_cfg.validate()
        self.cascade_cfg.validate()
        self.roi_cfg.validate()

        size = self.backbone_cfg.tap_size
        self.anchors = generate_anchors(
            size,
            size,
            self.backbone_cfg.stride_at_tap,
            list(self.cascade_cfg.anchor_scales),
            list(self.cascade_cfg.anchor_ratios),
        )
        self.image_size = self.backbone_cfg.input_size
        self.alphas = stage_weights(self.cascade_cfg.num_stages)

        rng = Rng(seed)
        self.params: dict[str, Tensor] = {}
        self.params.update(init_backbone_params(self.backbone_cfg, rng))
        self.params.update(init_cascade_params(self.cascade_cfg, self.backbone_cfg.channels, rng))
        self.params.update(init_roi_params(self.roi_cfg, self.backbone_cfg.channels, rng))

    # ------------------------------------------------------------------
    # parameter plumbing

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def save(self, path) -> None:
        save_snapshot(path, self.params)

    def load(self, path) -> None:
        arrays = load_snapshot(path)
        self.load_arrays(arrays)

    def load_arrays(self, arrays: dict) -> None:
        missing = sorted(set(self.params) - set(arrays))
        if missing:
            raise ValueError(f"snapshot lacks parameters: {missing[:4]}...")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ValueError(
                    f"snapshot parameter {name} has shape {arr.shape}, expected {p.values.shape}"
                )
            p.values = arr.copy()

    # ------------------------------------------------------------------
    # shared forward pieces

    def _cascade_forward(self, image: np.ndarray, labels: np.ndarray | None):
        x = Tensor(image[None] if image.ndim == 3 else image)
        taps = backbone_forward(x, self.backbone_cfg, self.params)
        states = run_cascade(taps.f, self.cascade_cfg, self.params, labels=labels)
        deltas = regression_head(states[-1].h, self.params, self.cascade_cfg.anchors_per_cell)
        return states, deltas

    def assignment_for(self, record: SceneRecord) -> Assignment:
        return assign_labels(self.anchors, [b for b, _ in record.gts], self.cascade_cfg)

    # ------------------------------------------------------------------
    # training

    def training_loss(
        self,
        record: SceneRecord,
        assignment: Assignment,
        rng: Rng,
        structure: TrainingStructure | None = None,
    ) -> tuple[LossBreakdown, StepDiagnostics, TrainingStructure]:
        cfg = self.cascade_cfg
        states, deltas = self._cascade_forward(record.image, assignment.labels)

        if structure is None:
            batches = [
                sample_stage_batch(st.active, assignment, batch_size, cfg.pos_fraction, rng)
                for st, batch_size in zip(states, cfg.stage_batches)
            ]
            mus = [st.mu for st in states]
            keep = inference_keep_mask(states, cfg.reject_threshold)
            proposals = propose(
                states[-1].s, deltas, self.anchors, keep, cfg, self.image_size, self.image_size
            )
            roi_batch = assign_and_sample_rois(proposals.boxes, record.gts, self.roi_cfg, rng)
            structure = TrainingStructure(batches, mus, roi_batch)
            num_proposals = len(proposals)
        else:
            num_proposals = len(structure.roi_batch)

        cls_total, per_stage = cascade_cls_loss(
            [st.s for st in states],
            assignment.labels,
            structure.stage_batches,
            structure.stage_mus,
            self.alphas,
        )
        last_batch = structure.stage_batches[-1]
        loc = loc_loss(
            T.take_rows(deltas, last_batch),
            assignment.deltas[last_batch],
            assignment.labels[last_batch],
        )

        if len(structure.roi_batch):
            pooled = roi_max_pool(
                states[-1].h,
                structure.roi_batch.boxes,
                self.backbone_cfg.stride_at_tap,
                self.roi_cfg.pool_size,
            )
            scores, class_deltas = roi_forward(pooled, self.params, self.roi_cfg)
            roi_cls, roi_loc = roi_loss(scores, class_deltas, structure.roi_batch)
        else:
            roi_cls, roi_loc = Tensor(0.0), Tensor(0.0)

        breakdown = detection_loss(cls_total, per_stage, loc, roi_cls, roi_loc)
        diag = self._diagnostics(states, assignment, num_proposals)
        return breakdown, diag, structure

    def _diagnostics(self, states, assignment: Assignment, num_proposals: int) -> StepDiagnostics:
        labeled = assignment.labels >= 0
        total = max(int(labeled.sum()), 1)
        active_counts = []
        rates = []
        means = []
        safe = np.where(labeled, assignment.labels, 0)
        for st in states:
            active = int((st.active & labeled).sum()) if st.mu is not None else int(st.active.sum())
            active_counts.append(active)
            rates.append(1.0 - active / total)
            true_scores = st.s.values[np.arange(len(safe)), safe]
            means.append(float(true_scores[labeled].mean()) if labeled.any() else 0.0)
        return StepDiagnostics(active_counts, rates, means, num_proposals)

    # ------------------------------------------------------------------
    # inference

    def detect(self, image: np.ndarray) -> InferenceResult:
        cfg = self.cascade_cfg
        states, deltas = self._cascade_forward(image, labels=None)
        keep = inference_keep_mask(states, cfg.reject_threshold)
        proposals = propose(
            states[-1].s, deltas, self.anchors, keep, cfg, self.image_size, self.image_size
        )
        detections: list[Detection] = []
        if len(proposals):
            pooled = roi_max_pool(
                states[-1].h, proposals.boxes, self.backbone_cfg.stride_at_tap, self.roi_cfg.pool_size
            )
            scores, class_deltas = roi_forward(pooled, self.params, self.roi_cfg)
            detections = self._decode_detections(proposals, scores.values, class_deltas.values)
        return InferenceResult(
            detections=detections,
            stage_scores=[st.s.values for st in states],
            keep_mask=keep,
            proposals=proposals,
        )

    def _decode_detections(self, proposals: ProposalSet, scores: np.ndarray, class_deltas: np.ndarray) -> list:
        cfg = self.roi_cfg
        prop_arr = boxes_to_array(proposals.boxes)
        found: list[Detection] = []
        for k in range(1, cfg.num_classes + 1):
            cls_scores = scores[:, k]
            picked = np.flatnonzero(cls_scores >= cfg.det_score_thresh)
            if picked.size == 0:
                continue
            boxes = decode_array(prop_arr[picked], class_deltas[picked, k])
            boxes = clip_array(boxes, self.image_size, self.image_size)
            keep = nms_array(boxes, cls_scores[picked], cfg.det_nms_iou)
            for i in keep:
                found.append(Detection(Box(*boxes[i]), k, float(cls_scores[picked[i]])))
        found.sort(key=lambda d: -d.score)
        return found[: cfg.max_dets]

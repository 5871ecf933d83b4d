"""Average-precision evaluation and cascade health diagnostics.

Per class, detections are ranked by score (ties: image index, then
detection index) and greedily matched to the highest-IoU unmatched
ground truth of the same class at the IoU threshold. AP is the area under
the monotone precision envelope over all recall points; mAP averages over
classes that have at least one ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import iou


@dataclass
class EvalReport:
    ap50_per_class: list = field(default_factory=list)
    map50: float = 0.0
    per_stage_rejection_rate: list = field(default_factory=list)
    stage4_hard_fraction: float = 0.0
    proposals_per_image: float = 0.0


def _ap_from_flags(flags: np.ndarray, num_gts: int) -> float:
    """All-point interpolated AP from ranked TP/FP flags."""
    if num_gts == 0:
        return 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gts
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def evaluate_ap(detections_per_image, gts_per_image, iou_thresh: float = 0.5) -> EvalReport:
    """AP per class and mAP over classes with ground truth.

    detections_per_image: per image, a list of (Box, class_id, score).
    gts_per_image: per image, a list of (Box, class_id).
    """
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    class_ids = sorted({cid for gts in gts_per_image for _, cid in gts})
    aps = []
    for cid in class_ids:
        ranked = []
        for img, dets in enumerate(detections_per_image):
            for di, (box, det_cid, score) in enumerate(dets):
                if det_cid == cid:
                    if not np.isfinite(score):
                        raise ValueError(f"non-finite detection score in image {img}")
                    ranked.append((-score, img, di, box))
        ranked.sort(key=lambda item: item[:3])
        num_gts = sum(1 for gts in gts_per_image for _, c in gts if c == cid)

        taken = [
            [False] * sum(1 for _, c in gts if c == cid) for gts in gts_per_image
        ]
        per_image_gts = [[box for box, c in gts if c == cid] for gts in gts_per_image]
        flags = np.zeros(len(ranked), dtype=bool)
        for rank, (_, img, _, box) in enumerate(ranked):
            best_iou = 0.0
            best_g = -1
            for g, gt in enumerate(per_image_gts[img]):
                if taken[img][g]:
                    continue
                overlap = iou(box, gt)
                if overlap >= iou_thresh and overlap > best_iou:
                    best_iou = overlap
                    best_g = g
            if best_g >= 0:
                taken[img][best_g] = True
                flags[rank] = True
        aps.append(_ap_from_flags(flags, num_gts))

    report = EvalReport(ap50_per_class=aps)
    report.map50 = float(np.mean(aps)) if aps else 0.0
    return report


def evaluate_detector(detector, records: list, iou_thresh: float = 0.5) -> EvalReport:
    """Run inference over ``records`` and score it, with cascade stats."""
    detections_per_image = []
    gts_per_image = []
    num_stages = detector.cascade_cfg.num_stages
    rejected_sums = np.zeros(num_stages)
    proposal_total = 0
    hard = 0
    final_active_labeled = 0
    for record in records:
        result = detector.detect(record.image)
        detections_per_image.append([(d.box, d.class_id, d.score) for d in result.detections])
        gts_per_image.append(list(record.gts))
        proposal_total += len(result.proposals)

        alive = np.ones(len(detector.anchors), dtype=bool)
        for t, s in enumerate(result.stage_scores):
            alive &= s[:, 0] < detector.cascade_cfg.reject_threshold
            rejected_sums[t] += 1.0 - alive.mean()

        assignment = detector.assignment_for(record)
        labeled = assignment.labels >= 0
        final_alive = np.ones(len(detector.anchors), dtype=bool)
        for s in result.stage_scores[:-1]:
            final_alive &= s[:, 0] < detector.cascade_cfg.reject_threshold
        active_labeled = labeled & final_alive
        if active_labeled.any():
            safe = np.where(labeled, assignment.labels, 0)
            true_scores = result.stage_scores[-1][np.arange(len(safe)), safe]
            hard += int((true_scores[active_labeled] < 0.5).sum())
            final_active_labeled += int(active_labeled.sum())

    report = evaluate_ap(detections_per_image, gts_per_image, iou_thresh)
    n = max(len(records), 1)
    report.per_stage_rejection_rate = list(rejected_sums / n)
    report.stage4_hard_fraction = hard / final_active_labeled if final_active_labeled else 0.0
    report.proposals_per_image = proposal_total / n
    return report

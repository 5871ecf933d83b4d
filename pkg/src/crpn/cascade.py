"""Cascade of region-proposal stages with easy-sample rejection.

Each stage fuses its backbone tap with the previous stage's features
(weighted pointwise sum), scores every anchor with a small conv head, and
blends the scores with the previous stage's (same weights). An anchor
whose chained true-class score crossed the reject threshold at any earlier
stage is marked easy and excluded from all later training batches; at
inference the background score plays that role, since true classes are
unknown. The final stage also regresses box offsets and emits proposals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import (
    AnchorGrid,
    Box,
    array_to_boxes,
    boxes_to_array,
    clip_array,
    decode_array,
    encode_array,
    iou_matrix,
    nms_array,
)
from .rng import Rng
from .tensor import Tensor

DEFAULT_STAGE_BATCHES = (1024, 768, 512, 256)


@dataclass
class CascadeConfig:
    num_stages: int = 4
    reject_threshold: float = 0.99
    lambda_f: float = 0.1
    lambda_p: float = 0.9
    stage_batches: tuple = DEFAULT_STAGE_BATCHES
    pos_fraction: float = 0.5
    assign_pos_iou: float = 0.7
    assign_neg_iou: float = 0.3
    proposal_nms_iou: float = 0.7
    proposal_topk: int = 300
    anchor_scales: tuple = (1.0, 2.0, 4.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    use_feature_chain: bool = True
    use_score_chain: bool = True

    def validate(self) -> None:
        if not 1 <= self.num_stages <= 4:
            raise ValueError(f"num_stages must be in 1..4, got {self.num_stages}")
        # reject_threshold == 1.0 is allowed as an explicit "never reject"
        if not 0.0 < self.reject_threshold <= 1.0:
            raise ValueError(f"reject_threshold must lie in (0, 1], got {self.reject_threshold}")
        if abs(self.lambda_f + self.lambda_p - 1.0) > 1e-12:
            raise ValueError(
                f"lambda_f + lambda_p must equal 1, got {self.lambda_f} + {self.lambda_p}"
            )
        if len(self.stage_batches) != self.num_stages:
            raise ValueError(
                f"stage_batches has {len(self.stage_batches)} entries for "
                f"{self.num_stages} stages"
            )
        if any(b <= 0 for b in self.stage_batches):
            raise ValueError("stage batch sizes must be positive")
        if any(a < b for a, b in zip(self.stage_batches, self.stage_batches[1:])):
            raise ValueError(f"stage_batches must be nonincreasing: {self.stage_batches}")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ValueError("pos_fraction must lie in [0, 1]")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ValueError("anchor scales and ratios must be nonempty")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)


@dataclass
class Assignment:
    """Per-anchor training targets: 1 object, 0 background, -1 ignored."""

    labels: np.ndarray
    deltas: np.ndarray  # [A, 4], valid where labels == 1
    matched_gt: np.ndarray  # [A], -1 where unmatched

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def num_negative(self) -> int:
        return int((self.labels == 0).sum())


@dataclass
class StageState:
    t: int
    h: Tensor  # fused features [N, C, S, S]
    c: Tensor  # raw per-anchor scores [A, 2]
    s: Tensor  # chained per-anchor scores [A, 2]
    mu: np.ndarray | None  # training rejection indicator, None at inference
    active: np.ndarray  # anchors still alive entering this stage


@dataclass
class ProposalSet:
    boxes: list = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    source_anchor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    def __len__(self) -> int:
        return len(self.boxes)


def assign_labels(anchors: AnchorGrid, gts: list, cfg: CascadeConfig) -> Assignment:
    """Faster R-CNN style anchor assignment against ground-truth boxes.

    Border-crossing anchors are ignored. Positives: IoU >= assign_pos_iou,
    plus each gt's best-IoU in-image anchors (so no gt goes unmatched).
    Negatives: max IoU < assign_neg_iou. Everything else is ignored.
    """
    num = len(anchors)
    if num == 0:
        raise ValueError("anchor grid is empty")
    img_w = anchors.fmap_w * anchors.stride
    img_h = anchors.fmap_h * anchors.stride
    inside = anchors.inside_mask(img_w, img_h)

    labels = np.full(num, -1, dtype=np.int64)
    deltas = np.zeros((num, 4), dtype=np.float64)
    matched = np.full(num, -1, dtype=np.int64)
    if not gts:
        labels[inside] = 0
        return Assignment(labels, deltas, matched)

    gt_arr = boxes_to_array(gts)
    ious = iou_matrix(anchors.array, gt_arr)
    ious[~inside] = -1.0  # border-crossers take no part in assignment

    best_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)
    labels[inside & (best_iou < cfg.assign_neg_iou)] = 0
    labels[best_iou >= cfg.assign_pos_iou] = 1
    for g in range(gt_arr.shape[0]):
        col_max = ious[:, g].max()
        if col_max > 0:
            labels[ious[:, g] == col_max] = 1

    pos = labels == 1
    matched[pos] = best_gt[pos]
    if pos.any():
        deltas[pos] = encode_array(gt_arr[best_gt[pos]], anchors.array[pos])
    return Assignment(labels, deltas, matched)


def feature_chain(h_prev: Tensor | None, f_t: Tensor, cfg: CascadeConfig) -> Tensor:
    """Fused features: the tap itself at stage 1, weighted sum afterwards."""
    if h_prev is None or not cfg.use_feature_chain:
        return f_t
    return T.add_scaled(h_prev, cfg.lambda_f, f_t, cfg.lambda_p)


def score_chain(s_prev: Tensor | None, c_t: Tensor, cfg: CascadeConfig) -> Tensor:
    """Chained scores: convex combination, so outputs stay distributions."""
    if s_prev is None or not cfg.use_score_chain:
        return c_t
    return T.add_scaled(s_prev, cfg.lambda_f, c_t, cfg.lambda_p)


def _headmap_to_rows(headmap: Tensor, per_anchor: int) -> Tensor:
    """[N, A*per_anchor, H, W] -> [N*H*W*A, per_anchor] in anchor-grid order."""
    n, ch, h, w = headmap.shape
    moved = T.transpose(headmap, (0, 2, 3, 1))
    return T.reshape(moved, (n * h * w * (ch // per_anchor), per_anchor))


def score_head(h_t: Tensor, params: dict, stage: int, anchors_per_cell: int) -> Tensor:
    """Per-anchor binary softmax scores from a 3x3 conv + 1x1 scoring conv."""
    prefix = f"cascade/stage{stage}"
    hidden = T.relu(
        T.conv2d(h_t, params[f"{prefix}/conv/w"], params[f"{prefix}/conv/b"], padding=1)
    )
    logits = T.conv2d(hidden, params[f"{prefix}/score/w"], params[f"{prefix}/score/b"])
    if logits.shape[1] != 2 * anchors_per_cell:
        raise ValueError(
            f"score head emits {logits.shape[1]} channels, expected {2 * anchors_per_cell}"
        )
    return T.softmax(_headmap_to_rows(logits, 2))


def regression_head(h_last: Tensor, params: dict, anchors_per_cell: int) -> Tensor:
    """Per-anchor box deltas [A, 4] from the final stage's fused features."""
    hidden = T.relu(
        T.conv2d(h_last, params["cascade/reg/conv/w"], params["cascade/reg/conv/b"], padding=1)
    )
    out = T.conv2d(hidden, params["cascade/reg/delta/w"], params["cascade/reg/delta/b"])
    if out.shape[1] != 4 * anchors_per_cell:
        raise ValueError(
            f"regression head emits {out.shape[1]} channels, expected {4 * anchors_per_cell}"
        )
    return _headmap_to_rows(out, 4)


def init_cascade_params(cfg: CascadeConfig, channels: int, rng: Rng, std: float = 0.01) -> dict:
    cfg.validate()
    a = cfg.anchors_per_cell
    params = {}
    for t in range(1, cfg.num_stages + 1):
        prefix = f"cascade/stage{t}"
        params[f"{prefix}/conv/w"] = T.param(None, rng=rng, shape=(channels, channels, 3, 3), std=std)
        params[f"{prefix}/conv/b"] = Tensor([0.0] * channels, requires_grad=True)
        params[f"{prefix}/score/w"] = T.param(None, rng=rng, shape=(2 * a, channels, 1, 1), std=std)
        params[f"{prefix}/score/b"] = Tensor([0.0] * (2 * a), requires_grad=True)
    params["cascade/reg/conv/w"] = T.param(None, rng=rng, shape=(channels, channels, 3, 3), std=std)
    params["cascade/reg/conv/b"] = Tensor([0.0] * channels, requires_grad=True)
    params["cascade/reg/delta/w"] = T.param(None, rng=rng, shape=(4 * a, channels, 1, 1), std=std)
    params["cascade/reg/delta/b"] = Tensor([0.0] * (4 * a), requires_grad=True)
    return params


def mu_mask(prev_stage_scores: list, k_star: np.ndarray, reject_threshold: float) -> np.ndarray:
    """Training rejection indicator for the stage after ``prev_stage_scores``.

    An anchor stays active (1.0) while every earlier stage scored its true
    class below the reject threshold; ignore-labeled anchors get 0 and must
    never be sampled.
    """
    labels = np.asarray(k_star)
    labeled = labels >= 0
    mu = labeled.astype(np.float64)
    safe = np.where(labeled, labels, 0)
    for s in prev_stage_scores:
        values = s.values if isinstance(s, Tensor) else np.asarray(s)
        true_class = values[np.arange(values.shape[0]), safe]
        mu *= true_class < reject_threshold
    return mu


def sample_stage_batch(
    active: np.ndarray,
    assignment: Assignment,
    batch_size: int,
    pos_fraction: float,
    rng: Rng,
) -> np.ndarray:
    """Sample up to pos_fraction*batch_size positives, fill with negatives.

    Uniform without replacement inside each pool; shortfalls on one side
    are filled from the other (the whole pool is taken when it is smaller
    than the batch).
    """
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    active = np.asarray(active, dtype=bool)
    pos_pool = np.flatnonzero(active & (assignment.labels == 1))
    neg_pool = np.flatnonzero(active & (assignment.labels == 0))
    want_pos = min(len(pos_pool), int(batch_size * pos_fraction))
    chosen_pos = rng.sample_without_replacement(list(pos_pool), want_pos)
    want_neg = min(len(neg_pool), batch_size - len(chosen_pos))
    chosen_neg = rng.sample_without_replacement(list(neg_pool), want_neg)
    return np.array(chosen_pos + chosen_neg, dtype=np.intp)


def run_cascade(taps: list, cfg: CascadeConfig, params: dict, labels: np.ndarray | None = None) -> list:
    """Run all stages over the last ``num_stages`` taps.

    With ``labels`` (training) the per-stage mask follows the true-class
    rejection rule; without (inference) it follows the background-score
    rule. Returns one StageState per stage.
    """
    cfg.validate()
    if cfg.num_stages > len(taps):
        raise ValueError(f"{cfg.num_stages} stages need {cfg.num_stages} taps, have {len(taps)}")
    states: list[StageState] = []
    used_taps = taps[-cfg.num_stages :]
    h_prev: Tensor | None = None
    s_prev: Tensor | None = None
    num_anchors = None
    inference_alive = None
    for t, f_t in enumerate(used_taps, start=1):
        h = feature_chain(h_prev, f_t, cfg)
        c = score_head(h, params, t, cfg.anchors_per_cell)
        s = score_chain(s_prev, c, cfg)
        if num_anchors is None:
            num_anchors = s.shape[0]
            inference_alive = np.ones(num_anchors, dtype=bool)
        if labels is not None:
            mu = mu_mask([state.s for state in states], labels, cfg.reject_threshold)
            active = mu == 1.0
        else:
            mu = None
            active = inference_alive.copy()
            inference_alive &= s.values[:, 0] < cfg.reject_threshold
        states.append(StageState(t=t, h=h, c=c, s=s, mu=mu, active=active))
        h_prev, s_prev = h, s
    return states


def inference_keep_mask(states: list, reject_threshold: float) -> np.ndarray:
    """Anchors whose chained background score stayed below r at every stage."""
    keep = np.ones(states[0].s.shape[0], dtype=bool)
    for state in states:
        keep &= state.s.values[:, 0] < reject_threshold
    return keep


def propose(
    s_last: np.ndarray,
    deltas: np.ndarray,
    anchors: AnchorGrid,
    active_inference: np.ndarray,
    cfg: CascadeConfig,
    img_w: float,
    img_h: float,
) -> ProposalSet:
    """Decode, clip, NMS and truncate surviving anchors into proposals."""
    scores_all = s_last.values if isinstance(s_last, Tensor) else np.asarray(s_last)
    deltas_all = deltas.values if isinstance(deltas, Tensor) else np.asarray(deltas)
    survivors = np.flatnonzero(np.asarray(active_inference, dtype=bool))
    if survivors.size == 0:
        return ProposalSet()
    boxes = decode_array(anchors.array[survivors], deltas_all[survivors])
    boxes = clip_array(boxes, img_w, img_h)
    scores = scores_all[survivors, 1]
    keep = nms_array(boxes, scores, cfg.proposal_nms_iou)[: cfg.proposal_topk]
    return ProposalSet(
        boxes=array_to_boxes(boxes[keep]),
        scores=scores[keep],
        source_anchor=survivors[keep],
    )


def anchor_imbalance(records: list, anchors: AnchorGrid, cfg: CascadeConfig) -> tuple:
    """(negatives, positives, ratio) summed over a dataset's assignments."""
    neg = pos = 0
    for record in records:
        assignment = assign_labels(anchors, [b for b, _ in record.gts], cfg)
        neg += assignment.num_negative
        pos += assignment.num_positive
    return neg, pos, (neg / pos if pos else float("inf"))

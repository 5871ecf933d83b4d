"""Loss terms: cascade classification, smooth-L1 localization, joint totals.

The cascade classification loss sums, over stages, the stage weight times
the mean of -mu * log(true-class chained score) over that stage's sampled
batch. Stage weights grow tenfold toward the final stage; rejected samples
(mu = 0) contribute exactly zero, including to gradients. Scores are
clamped at 1e-12 before the log because chained scores can saturate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import BoxDelta
from .tensor import Tensor

SCORE_CLAMP = 1e-12


class NonFiniteLossError(RuntimeError):
    pass


def stage_weights(num_stages: int, final_weight: float = 1.0) -> list:
    """Per-stage loss weights, one tenth per step away from the last stage."""
    if num_stages < 1:
        raise ValueError(f"num_stages must be >= 1, got {num_stages}")
    return [final_weight / 10 ** (num_stages - t) for t in range(1, num_stages + 1)]


@dataclass
class LossBreakdown:
    per_stage_cls: list
    loc: float
    crpn_total: float
    roi_cls: float
    roi_loc: float
    detection_total: float
    root: Tensor | None = None  # scalar graph node to backpropagate from


def cascade_cls_loss(
    stage_scores: list,
    k_star: np.ndarray,
    stage_batches: list,
    stage_mus: list,
    alphas: list,
) -> tuple:
    """Weighted cascade cross entropy.

    stage_scores: chained score Tensors [A, 2], one per stage.
    stage_batches: sampled anchor indices per stage (may be empty).
    stage_mus: per-anchor rejection indicators per stage, indexed by batch.
    Returns (scalar Tensor, per-stage weighted float terms).
    """
    if not len(stage_scores) == len(stage_batches) == len(stage_mus) == len(alphas):
        raise ValueError("per-stage argument lists must have equal length")
    labels = np.asarray(k_star)
    total: Tensor | None = None
    per_stage: list[float] = []
    for s_t, batch, mu, alpha in zip(stage_scores, stage_batches, stage_mus, alphas):
        batch = np.asarray(batch, dtype=np.intp)
        if batch.size == 0:
            per_stage.append(0.0)
            continue
        picked = T.take_pairs(s_t, batch, labels[batch])
        log_scores = T.log(T.clamp_min(picked, SCORE_CLAMP))
        weights = -np.asarray(mu, dtype=np.float64)[batch] / batch.size
        term = T.tsum(T.mul_const(log_scores, weights)) * alpha
        per_stage.append(term.item())
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    return total, per_stage


def smooth_l1(pred: BoxDelta, target: BoxDelta) -> float:
    """Sum over the 4 offsets of the piecewise quadratic/linear penalty."""
    total = 0.0
    for p, t in zip(pred.as_array(), target.as_array()):
        x = p - t
        total += 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5
    return total


def loc_loss(preds: Tensor, targets: np.ndarray, k_star: np.ndarray) -> Tensor:
    """Mean smooth-L1 over positive samples of a batch; 0 with no positives.

    preds are [B, 4] predicted offsets for a sampled batch, targets the
    matching encoded ground-truth offsets, k_star the batch labels.
    """
    labels = np.asarray(k_star)
    pos = np.flatnonzero(labels == 1)
    if pos.size == 0:
        return Tensor(0.0)
    residual = T.sub_const(T.take_rows(preds, pos), np.asarray(targets)[pos])
    return T.tsum(T.smooth_l1_elem(residual)) * (1.0 / pos.size)


def detection_loss(
    cls_total: Tensor,
    per_stage_cls: list,
    loc: Tensor,
    roi_cls: Tensor,
    roi_loc: Tensor,
) -> LossBreakdown:
    """Combine cascade and RoI terms; the result's root drives backward."""
    root = cls_total + loc + roi_cls + roi_loc
    breakdown = LossBreakdown(
        per_stage_cls=list(per_stage_cls),
        loc=loc.item(),
        crpn_total=cls_total.item() + loc.item(),
        roi_cls=roi_cls.item(),
        roi_loc=roi_loc.item(),
        detection_total=root.item(),
        root=root,
    )
    components = dict(
        zip(
            [f"stage{t + 1}_cls" for t in range(len(per_stage_cls))]
            + ["loc", "roi_cls", "roi_loc"],
            list(per_stage_cls) + [breakdown.loc, breakdown.roi_cls, breakdown.roi_loc],
        )
    )
    bad = {name: value for name, value in components.items() if not np.isfinite(value)}
    if bad:
        raise NonFiniteLossError(f"non-finite loss components: {bad}")
    return breakdown

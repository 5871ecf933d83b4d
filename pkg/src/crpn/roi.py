"""Second detection stage: RoI max pooling plus class/box heads.

Pooling partitions each proposal's feature-space footprint into an even
pool_size x pool_size grid of cell ranges and takes the channelwise max in
each bin; empty bins give 0. The backward pass routes gradient only to the
argmax locations. Heads are a shared hidden linear layer with separate
class-score and per-class box-delta outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Box, boxes_to_array, encode_array, iou_matrix
from .rng import Rng
from .tensor import Tensor, make_node


@dataclass
class RoiConfig:
    pool_size: int = 7
    num_classes: int = 3  # foreground classes; heads emit num_classes + 1
    roi_batch: int = 64
    fg_fraction: float = 0.25
    fg_iou: float = 0.5
    hidden: int = 64
    # inference-side detection filtering
    det_score_thresh: float = 0.05
    det_nms_iou: float = 0.3
    max_dets: int = 100
    include_gt_proposals: bool = True

    def validate(self) -> None:
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.roi_batch < 1:
            raise ValueError("roi_batch must be >= 1")
        if not 0.0 <= self.fg_fraction <= 1.0:
            raise ValueError("fg_fraction must lie in [0, 1]")


def _bin_edges(lo: np.ndarray, hi: np.ndarray, cells: int, bins: int) -> tuple:
    """Even partition of footprints [lo, hi) into per-bin cell ranges.

    lo/hi are per-roi floats in feature coordinates; returns integer
    arrays b0, b1 of shape [R, bins] (b0 >= b1 marks an empty bin).
    """
    start = np.clip(np.floor(lo), 0, cells).astype(np.intp)
    end = np.clip(np.ceil(hi), 0, cells).astype(np.intp)
    width = np.maximum(end - start, 0)
    b = np.arange(bins)
    b0 = start[:, None] + (b[None, :] * width[:, None]) // bins
    b1 = start[:, None] + -(-((b[None, :] + 1) * width[:, None]) // bins)  # ceil div
    return b0, np.maximum(b1, b0)


def roi_max_pool(features: Tensor, rois: list, stride: int, pool_size: int) -> Tensor:
    """Pool [1, C, S, S] features over each roi Box into [R, C, P, P].

    Bin maxima are gathered over a clamped index window covering the
    widest bin span; repeating a cell never changes a max, so clamping is
    exact. Empty bins yield 0 and receive no gradient.
    """
    if features.values.ndim != 4 or features.shape[0] != 1:
        raise ValueError(f"roi_max_pool expects [1, C, S, S] features, got {features.shape}")
    _, channels, fh, fw = features.shape
    count = len(rois)
    if count == 0:
        return Tensor(np.zeros((0, channels, pool_size, pool_size)))
    arr = np.array([[b.x1, b.y1, b.x2, b.y2] for b in rois], dtype=np.float64) / stride
    x0, x1 = _bin_edges(arr[:, 0], arr[:, 2], fw, pool_size)  # [R, P]
    y0, y1 = _bin_edges(arr[:, 1], arr[:, 3], fh, pool_size)
    span_x = max(int((x1 - x0).max()), 1)
    span_y = max(int((y1 - y0).max()), 1)
    # candidate cells per bin, clamped inside the bin (empty bins reuse b0)
    cand_x = np.minimum(x0[:, :, None] + np.arange(span_x), np.maximum(x1 - 1, x0)[:, :, None])
    cand_y = np.minimum(y0[:, :, None] + np.arange(span_y), np.maximum(y1 - 1, y0)[:, :, None])
    cand_x = np.clip(cand_x, 0, fw - 1)  # [R, P, sx]
    cand_y = np.clip(cand_y, 0, fh - 1)  # [R, P, sy]

    fmap = features.values[0]
    yy = cand_y[:, :, None, :, None]  # [R, P, 1, sy, 1]
    xx = cand_x[:, None, :, None, :]  # [R, 1, P, 1, sx]
    gathered = fmap[:, yy, xx]  # [C, R, P, P, sy, sx]
    flat = gathered.reshape(channels, count, pool_size, pool_size, span_y * span_x)
    arg = flat.argmax(axis=-1)  # [C, R, P, P]
    vals = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    mask = ((y1 - y0)[:, :, None] > 0) & ((x1 - x0)[:, None, :] > 0)  # [R, Py, Px]
    out = np.where(mask[None], vals, 0.0).transpose(1, 0, 2, 3).copy()  # [R, C, P, P]

    def backward_fn(grad):
        r_idx = np.arange(count)[None, :, None, None]
        py_idx = np.arange(pool_size)[None, None, :, None]
        px_idx = np.arange(pool_size)[None, None, None, :]
        rows = cand_y[r_idx, py_idx, arg // span_x]  # [C, R, P, P]
        cols = cand_x[r_idx, px_idx, arg % span_x]
        chan = np.broadcast_to(np.arange(channels)[:, None, None, None], rows.shape)
        g = np.where(mask[None], grad.transpose(1, 0, 2, 3), 0.0)
        gx = np.zeros_like(features.values)
        np.add.at(gx[0], (chan.reshape(-1), rows.reshape(-1), cols.reshape(-1)), g.reshape(-1))
        features._accumulate(gx)

    return make_node(out, (features,), backward_fn)


def roi_pool(features: Tensor, proposal: Box, stride: int, pool_size: int) -> Tensor:
    """Single-proposal pooling: [C, pool_size, pool_size]."""
    pooled = roi_max_pool(features, [proposal], stride, pool_size)
    return T.reshape(pooled, pooled.shape[1:])


def init_roi_params(cfg: RoiConfig, channels: int, rng: Rng, std: float = 0.01) -> dict:
    cfg.validate()
    in_dim = channels * cfg.pool_size * cfg.pool_size
    k = cfg.num_classes + 1
    params = {
        "roi/fc/w": T.param(None, rng=rng, shape=(in_dim, cfg.hidden), std=std),
        "roi/fc/b": Tensor([0.0] * cfg.hidden, requires_grad=True),
        "roi/cls/w": T.param(None, rng=rng, shape=(cfg.hidden, k), std=std),
        "roi/cls/b": Tensor([0.0] * k, requires_grad=True),
        "roi/reg/w": T.param(None, rng=rng, shape=(cfg.hidden, 4 * k), std=std),
        "roi/reg/b": Tensor([0.0] * (4 * k), requires_grad=True),
    }
    return params


def roi_forward(pooled: Tensor, params: dict, cfg: RoiConfig) -> tuple:
    """(class scores [R, C+1] on the simplex, per-class deltas [R, C+1, 4])."""
    r = pooled.shape[0]
    flat = T.reshape(pooled, (r, -1))
    if flat.shape[1] != params["roi/fc/w"].shape[0]:
        raise ValueError(
            f"pooled feature size {flat.shape[1]} does not match head input "
            f"{params['roi/fc/w'].shape[0]}"
        )
    hidden = T.relu(T.linear(flat, params["roi/fc/w"], params["roi/fc/b"]))
    scores = T.softmax(T.linear(hidden, params["roi/cls/w"], params["roi/cls/b"]))
    deltas = T.linear(hidden, params["roi/reg/w"], params["roi/reg/b"])
    return scores, T.reshape(deltas, (r, cfg.num_classes + 1, 4))


@dataclass
class RoiBatch:
    boxes: list = field(default_factory=list)  # sampled proposal boxes
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_deltas: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def num_foreground(self) -> int:
        return int((self.classes > 0).sum())


def assign_and_sample_rois(
    proposals: list,
    gts: list,
    cfg: RoiConfig,
    rng: Rng,
) -> RoiBatch:
    """Label proposals fg/bg by IoU and sample a training batch.

    gts are (Box, class_id) pairs with class_id in [1, num_classes].
    Ground-truth boxes join the candidate pool when configured, so the
    head sees clean foreground examples early in training.
    """
    pool = list(proposals)
    if cfg.include_gt_proposals:
        pool.extend(box for box, _ in gts)
    if not pool:
        return RoiBatch()
    arr = boxes_to_array(pool)
    classes = np.zeros(len(pool), dtype=np.int64)
    targets = np.zeros((len(pool), 4))
    if gts:
        gt_arr = boxes_to_array([box for box, _ in gts])
        gt_cls = np.array([cid for _, cid in gts], dtype=np.int64)
        ious = iou_matrix(arr, gt_arr)
        best = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        fg = best_iou >= cfg.fg_iou
        classes[fg] = gt_cls[best[fg]]
        if fg.any():
            targets[fg] = encode_array(gt_arr[best[fg]], arr[fg])

    fg_pool = np.flatnonzero(classes > 0)
    bg_pool = np.flatnonzero(classes == 0)
    want_fg = min(len(fg_pool), int(cfg.roi_batch * cfg.fg_fraction))
    chosen_fg = rng.sample_without_replacement(list(fg_pool), want_fg)
    want_bg = min(len(bg_pool), cfg.roi_batch - len(chosen_fg))
    chosen_bg = rng.sample_without_replacement(list(bg_pool), want_bg)
    chosen = np.array(chosen_fg + chosen_bg, dtype=np.intp)
    return RoiBatch(
        boxes=[pool[i] for i in chosen],
        classes=classes[chosen],
        target_deltas=targets[chosen],
    )


def roi_loss(class_scores: Tensor, class_deltas: Tensor, batch: RoiBatch) -> tuple:
    """(mean cross entropy over the batch, mean smooth-L1 over foreground).

    Localization uses each foreground row's matched-class delta slice;
    empty batch or no foreground gives zero for the respective term.
    """
    if len(batch) == 0:
        return Tensor(0.0), Tensor(0.0)
    n = len(batch)
    picked = T.take_pairs(class_scores, np.arange(n), batch.classes)
    cls = T.tsum(T.mul_const(T.log(T.clamp_min(picked, 1e-12)), -np.ones(n) / n))

    fg = np.flatnonzero(batch.classes > 0)
    if fg.size == 0:
        return cls, Tensor(0.0)
    flat = T.reshape(class_deltas, (n, -1))
    rows = np.repeat(fg, 4)
    cols = (4 * batch.classes[fg])[:, None] + np.arange(4)[None, :]
    picked_deltas = T.reshape(T.take_pairs(flat, rows, cols.reshape(-1)), (fg.size, 4))
    residual = T.sub_const(picked_deltas, batch.target_deltas[fg])
    loc = T.tsum(T.smooth_l1_elem(residual)) * (1.0 / fg.size)
    return cls, loc

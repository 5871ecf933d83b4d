"""Box algebra: anchors, IoU, regression offsets, NMS, clipping.

Boxes use the corner convention (x1, y1, x2, y2) with width = x2 - x1 and
no +1 anywhere. Scalar functions define the contracts; the ``*_array``
variants operate on [N, 4] float arrays and are what the detector calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class BoxDelta:
    """Regression offsets: center shifts normalized by anchor size, log size ratios."""

    lx: float
    ly: float
    lw: float
    lh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lw, self.lh], dtype=np.float64)


def boxes_to_array(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def array_to_boxes(arr: np.ndarray) -> list:
    return [Box(*row) for row in np.asarray(arr, dtype=np.float64)]


@dataclass
class AnchorGrid:
    """Anchors tiled over a feature map, row-major cells then scales then ratios."""

    stride: int
    scales: list
    ratios: list
    fmap_h: int
    fmap_w: int
    array: np.ndarray  # [num_anchors, 4]

    @property
    def boxes(self) -> list:
        return array_to_boxes(self.array)

    def __len__(self) -> int:
        return self.array.shape[0]

    def inside_mask(self, img_w: float, img_h: float) -> np.ndarray:
        a = self.array
        return (a[:, 0] >= 0) & (a[:, 1] >= 0) & (a[:, 2] <= img_w) & (a[:, 3] <= img_h)


def generate_anchors(fmap_h: int, fmap_w: int, stride: int, scales, ratios) -> AnchorGrid:
    """One anchor per (cell, scale, ratio), centered on the cell center.

    Each anchor has area (scale*stride)^2 and aspect ratio h/w = ratio;
    anchors may extend past the image.
    """
    scales = list(scales)
    ratios = list(ratios)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be nonempty")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ValueError("scales and ratios must be positive")

    shapes = []
    for s in scales:
        side = s * stride
        for r in ratios:
            w = side / math.sqrt(r)
            h = side * math.sqrt(r)
            shapes.append((w, h))
    shapes = np.array(shapes)  # [S*R, 2]

    ys, xs = np.meshgrid(np.arange(fmap_h), np.arange(fmap_w), indexing="ij")
    centers_x = (xs.reshape(-1) + 0.5) * stride
    centers_y = (ys.reshape(-1) + 0.5) * stride

    half_w = 0.5 * shapes[:, 0]
    half_h = 0.5 * shapes[:, 1]
    arr = np.empty((fmap_h * fmap_w, len(shapes), 4), dtype=np.float64)
    arr[:, :, 0] = centers_x[:, None] - half_w[None, :]
    arr[:, :, 1] = centers_y[:, None] - half_h[None, :]
    arr[:, :, 2] = centers_x[:, None] + half_w[None, :]
    arr[:, :, 3] = centers_y[:, None] + half_h[None, :]
    return AnchorGrid(stride, scales, ratios, fmap_h, fmap_w, arr.reshape(-1, 4))


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [N, 4] and [M, 4] box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode(gt: Box, anchor: Box) -> BoxDelta:
    """Offsets that map ``anchor`` onto ``gt``; inverse of decode."""
    if anchor.width <= 0 or anchor.height <= 0:
        raise ValueError(f"cannot encode against zero-sized anchor {anchor}")
    if gt.width <= 0 or gt.height <= 0:
        raise ValueError(f"cannot encode zero-sized ground truth {gt}")
    out = encode_array(gt.as_array()[None], anchor.as_array()[None])[0]
    return BoxDelta(*out)


def decode(anchor: Box, delta: BoxDelta) -> Box:
    if anchor.width <= 0 or anchor.height <= 0:
        raise ValueError(f"cannot decode from zero-sized anchor {anchor}")
    out = decode_array(anchor.as_array()[None], delta.as_array()[None])[0]
    return Box(*out)


def encode_array(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gx = gts[:, 0] + 0.5 * gw
    gy = gts[:, 1] + 0.5 * gh
    return np.stack(
        [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = np.exp(deltas[:, 2]) * aw
    h = np.exp(deltas[:, 3]) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_box(b: Box, img_w: float, img_h: float) -> Box:
    return Box(*clip_array(b.as_array()[None], img_w, img_h)[0])


def clip_array(boxes: np.ndarray, img_w: float, img_h: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, img_w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, img_h)
    return out


def nms(boxes, scores, iou_thresh: float) -> list:
    """Greedy NMS; returns kept indices in descending score order.

    A box is suppressed when its IoU with an already kept, higher-scored
    box exceeds ``iou_thresh``. Score ties break toward the lower index.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"nms got {len(boxes)} boxes but {len(scores)} scores")
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"nms iou_thresh must lie in (0, 1], got {iou_thresh}")
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64)
    else:
        arr = boxes_to_array(list(boxes))
    return nms_array(arr.reshape(-1, 4), np.asarray(scores, dtype=np.float64), iou_thresh)


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list:
    n = boxes.shape[0]
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        ix = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        iy = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        union = areas[i] + areas[rest] - inter
        overlap = np.zeros_like(inter)
        np.divide(inter, union, out=overlap, where=union > 0)
        order = rest[overlap <= iou_thresh]
    return keep

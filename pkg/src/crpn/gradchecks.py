"""Registered gradient-check suite for every differentiable piece.

Each check builds a scalar composite (cross entropy or smooth-L1 based,
so gradients are informative), evaluates it at a fixed-seed point chosen
away from ReLU/clamp/smooth-L1 kinks, and compares reverse-mode gradients
against central differences. The final check runs the complete detection
loss on a tiny scene with frozen sampling structure and probes every
parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone_params
from .cascade import CascadeConfig, score_head, regression_head, init_cascade_params
from .detector import Detector
from .geometry import Box
from .rng import Rng
from .roi import RoiConfig, init_roi_params, roi_forward, roi_max_pool
from .synth import SceneRecord
from .tensor import Tensor, gradcheck

OP_TOLERANCE = 1e-4
FULL_LOSS_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold


def _rand(rng: Rng, shape, lo=-1.0, hi=1.0) -> np.ndarray:
    flat = [rng.uniform_in(lo, hi) for _ in range(int(np.prod(shape)))]
    return np.array(flat).reshape(shape)


def _away_from_zero(rng: Rng, shape, margin=0.2) -> np.ndarray:
    arr = _rand(rng, shape)
    return np.where(np.abs(arr) < margin, np.sign(arr) * margin + arr, arr)


def _cross_entropy(rows: Tensor, labels: np.ndarray) -> Tensor:
    picked = T.take_pairs(T.softmax(rows), np.arange(len(labels)), labels)
    weights = -np.ones(len(labels)) / len(labels)
    return T.tsum(T.mul_const(T.log(T.clamp_min(picked, 1e-12)), weights))


def _check_conv_input() -> float:
    rng = Rng(11)
    kernel = Tensor(_rand(rng, (4, 3, 3, 3)))
    bias = Tensor(_rand(rng, (4,)))
    labels = np.array([rng.randint(4) for _ in range(9)])
    point = Tensor(_rand(rng, (1, 3, 6, 6)))

    def f(x):
        out = T.conv2d(x, kernel, bias, stride=2, padding=1)
        return _cross_entropy(T.reshape(T.transpose(out, (0, 2, 3, 1)), (9, 4)), labels)

    return gradcheck(f, point)


def _check_conv_kernel() -> float:
    rng = Rng(12)
    image = Tensor(_rand(rng, (2, 2, 5, 5)))
    bias = Tensor(_rand(rng, (3,)))
    labels = np.array([rng.randint(3) for _ in range(2 * 9)])
    point = Tensor(_rand(rng, (3, 2, 3, 3)))

    def f(k):
        out = T.conv2d(image, k, bias, stride=1, padding=0)
        return _cross_entropy(T.reshape(T.transpose(out, (0, 2, 3, 1)), (-1, 3)), labels)

    return gradcheck(f, point)


def _check_conv_bias() -> float:
    rng = Rng(13)
    image = Tensor(_rand(rng, (1, 2, 4, 4)))
    kernel = Tensor(_rand(rng, (3, 2, 2, 2)))
    labels = np.array([rng.randint(3) for _ in range(9)])

    def f(b):
        out = T.conv2d(image, kernel, b, stride=1, padding=0)
        return _cross_entropy(T.reshape(T.transpose(out, (0, 2, 3, 1)), (-1, 3)), labels)

    return gradcheck(f, Tensor(_rand(rng, (3,))))


def _check_avgpool() -> float:
    rng = Rng(14)
    labels = np.array([rng.randint(4) for _ in range(4)])

    def f(x):
        out = T.avgpool2d(x, 2)
        return _cross_entropy(T.reshape(T.transpose(out, (0, 2, 3, 1)), (-1, 4)), labels)

    return gradcheck(f, Tensor(_rand(rng, (1, 4, 4, 4))))


def _check_relu() -> float:
    rng = Rng(15)
    weights = _rand(rng, (24,))
    labels = np.array([rng.randint(2) for _ in range(12)])

    def f(x):
        out = T.mul_const(T.relu(x), weights)
        return _cross_entropy(T.reshape(out, (12, 2)), labels)

    return gradcheck(f, Tensor(_away_from_zero(rng, (24,))))


def _check_linear() -> float:
    rng = Rng(16)
    weight = Tensor(_rand(rng, (5, 3)))
    bias = Tensor(_rand(rng, (3,)))
    labels = np.array([rng.randint(3) for _ in range(4)])

    def f(x):
        return _cross_entropy(T.linear(x, weight, bias), labels)

    return gradcheck(f, Tensor(_rand(rng, (4, 5))))


def _check_softmax() -> float:
    rng = Rng(17)
    labels = np.array([rng.randint(5) for _ in range(6)])

    def f(x):
        return _cross_entropy(T.reshape(x, (6, 5)), labels)

    return gradcheck(f, Tensor(_rand(rng, (30,), -2.0, 2.0)))


def _check_add_scaled() -> float:
    rng = Rng(18)
    other = Tensor(_rand(rng, (8, 2)))
    labels = np.array([rng.randint(2) for _ in range(8)])

    def f(x):
        return _cross_entropy(T.add_scaled(x, 0.3, other, 0.7), labels)

    return gradcheck(f, Tensor(_rand(rng, (8, 2))))


def _check_smooth_l1() -> float:
    rng = Rng(19)
    targets = _rand(rng, (6, 4))

    def f(x):
        return T.tsum(T.smooth_l1_elem(T.sub_const(x, targets)))

    # keep residuals away from the |x| = 1 kink
    point = targets + np.where(_rand(rng, (6, 4)) > 0, 0.5, 1.6) * np.sign(_rand(rng, (6, 4)))
    return gradcheck(f, Tensor(point))


def _micro_cascade():
    cfg = CascadeConfig(
        num_stages=2,
        stage_batches=(4, 4),
        anchor_scales=(1.0,),
        anchor_ratios=(1.0,),
    )
    rng = Rng(20)
    params = init_cascade_params(cfg, channels=3, rng=rng, std=0.4)
    return cfg, params


def _check_score_head() -> float:
    cfg, params = _micro_cascade()
    rng = Rng(21)
    labels = np.array([rng.randint(2) for _ in range(4)])

    def f(h):
        scores = score_head(h, params, stage=1, anchors_per_cell=1)
        weights = -np.ones(4) / 4
        picked = T.take_pairs(scores, np.arange(4), labels)
        return T.tsum(T.mul_const(T.log(T.clamp_min(picked, 1e-12)), weights))

    return gradcheck(f, Tensor(_rand(rng, (1, 3, 2, 2))))


def _check_regression_head() -> float:
    cfg, params = _micro_cascade()
    rng = Rng(22)
    targets = _rand(rng, (4, 4)) * 2.0

    def f(h):
        deltas = regression_head(h, params, anchors_per_cell=1)
        return T.tsum(T.smooth_l1_elem(T.sub_const(deltas, targets)))

    return gradcheck(f, Tensor(_rand(rng, (1, 3, 2, 2))))


def _check_backbone() -> float:
    cfg = BackboneConfig(channels=2, stem_channels=2, input_size=8, stride_at_tap=2)
    rng = Rng(23)
    params = init_backbone_params(cfg, rng, std=0.5)
    labels = np.array([rng.randint(2) for _ in range(16)])

    def f(x):
        taps = backbone_forward(x, cfg, params)
        rows = T.reshape(T.transpose(taps.f[3], (0, 2, 3, 1)), (16, 2))
        return _cross_entropy(rows, labels)

    return gradcheck(f, Tensor(_rand(rng, (1, 3, 8, 8))))


def _check_backbone_weight() -> float:
    cfg = BackboneConfig(channels=2, stem_channels=2, input_size=8, stride_at_tap=2)
    rng = Rng(24)
    params = init_backbone_params(cfg, rng, std=0.5)
    image = Tensor(_rand(rng, (1, 3, 8, 8)))
    labels = np.array([rng.randint(2) for _ in range(16)])

    def f(w):
        saved = params["backbone/a1/w"]
        params["backbone/a1/w"] = w
        try:
            taps = backbone_forward(image, cfg, params)
            rows = T.reshape(T.transpose(taps.f[3], (0, 2, 3, 1)), (16, 2))
            return _cross_entropy(rows, labels)
        finally:
            params["backbone/a1/w"] = saved

    return gradcheck(f, Tensor(params["backbone/a1/w"].values.copy()))


def _check_roi_pool() -> float:
    rng = Rng(25)
    rois = [Box(1.0, 1.5, 6.5, 7.0), Box(0.0, 0.0, 4.0, 4.0), Box(3.2, 2.1, 7.9, 6.6)]
    weights = _rand(rng, (3, 2, 2, 2))

    def f(x):
        pooled = roi_max_pool(x, rois, stride=1, pool_size=2)
        return T.tsum(T.mul_const(pooled, weights))

    return gradcheck(f, Tensor(_rand(rng, (1, 2, 8, 8))))


def _check_roi_head() -> float:
    cfg = RoiConfig(pool_size=2, num_classes=2, hidden=5)
    rng = Rng(26)
    params = init_roi_params(cfg, channels=3, rng=rng, std=0.4)
    labels = np.array([rng.randint(3) for _ in range(3)])
    targets = _rand(rng, (3, 3, 4)) * 2.0

    def f(pooled):
        scores, deltas = roi_forward(pooled, params, cfg)
        picked = T.take_pairs(scores, np.arange(3), labels)
        weights = -np.ones(3) / 3
        cls = T.tsum(T.mul_const(T.log(T.clamp_min(picked, 1e-12)), weights))
        loc = T.tsum(T.smooth_l1_elem(T.sub_const(T.reshape(deltas, (3, 12)), targets.reshape(3, 12))))
        return cls + loc

    return gradcheck(f, Tensor(_rand(rng, (3, 3, 2, 2))))


def micro_scene_detector() -> tuple:
    """Tiny detector plus a scene whose sampled batches hold 2 anchors."""
    backbone_cfg = BackboneConfig(channels=4, stem_channels=4, input_size=16, stride_at_tap=4)
    cascade_cfg = CascadeConfig(
        num_stages=2,
        stage_batches=(2, 2),
        anchor_scales=(1.5,),
        anchor_ratios=(1.0,),
        proposal_topk=8,
    )
    roi_cfg = RoiConfig(pool_size=2, num_classes=3, roi_batch=4, hidden=8)
    detector = Detector(backbone_cfg, cascade_cfg, roi_cfg, seed=27)
    # large weights keep activations away from relu kinks under perturbation
    init_rng = Rng(28)
    for name, p in detector.params.items():
        p.values = _rand(init_rng, p.values.shape, -0.35, 0.35)

    img_rng = Rng(29)
    image = np.clip(_rand(img_rng, (3, 16, 16), 0.0, 1.0), 0.0, 1.0)
    record = SceneRecord(image=image, gts=[(Box(5.0, 5.0, 11.0, 11.0), 2)])
    return detector, record


def _check_detection_loss() -> float:
    detector, record = micro_scene_detector()
    assignment = detector.assignment_for(record)
    _, _, structure = detector.training_loss(record, assignment, Rng(30))

    worst = 0.0
    for name in sorted(detector.params):
        base = detector.params[name]

        def f(x, _name=name, _base=base):
            detector.params[_name] = x
            try:
                breakdown, _, _ = detector.training_loss(
                    record, assignment, Rng(30), structure=structure
                )
                return breakdown.root
            finally:
                detector.params[_name] = _base

        worst = max(worst, gradcheck(f, Tensor(base.values.copy())))
    return worst


CHECKS = [
    ("conv2d/input", OP_TOLERANCE, _check_conv_input),
    ("conv2d/kernel", OP_TOLERANCE, _check_conv_kernel),
    ("conv2d/bias", OP_TOLERANCE, _check_conv_bias),
    ("avgpool2d", OP_TOLERANCE, _check_avgpool),
    ("relu", OP_TOLERANCE, _check_relu),
    ("linear", OP_TOLERANCE, _check_linear),
    ("softmax_cross_entropy", OP_TOLERANCE, _check_softmax),
    ("add_scaled", OP_TOLERANCE, _check_add_scaled),
    ("smooth_l1", OP_TOLERANCE, _check_smooth_l1),
    ("score_head", OP_TOLERANCE, _check_score_head),
    ("regression_head", OP_TOLERANCE, _check_regression_head),
    ("backbone/input", OP_TOLERANCE, _check_backbone),
    ("backbone/weights", OP_TOLERANCE, _check_backbone_weight),
    ("roi_pool", OP_TOLERANCE, _check_roi_pool),
    ("roi_head", OP_TOLERANCE, _check_roi_head),
    ("detection_loss/full", FULL_LOSS_TOLERANCE, _check_detection_loss),
]


def run_suite(checks=None) -> list:
    results = []
    for name, threshold, fn in checks or CHECKS:
        results.append(CheckResult(name=name, max_error=fn(), threshold=threshold))
    return results

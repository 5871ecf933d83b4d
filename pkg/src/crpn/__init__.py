"""Miniature two-stage detector built around a cascade of proposal stages.

Layers: a from-scratch float64 autodiff core (tensor), box algebra
(geometry), a four-tap conv trunk (backbone), the cascade proposal stages
with easy-sample rejection and feature/score chains (cascade), loss terms
(losses), an RoI classification head (roi), synthetic scene data (synth),
SGD training and AP evaluation (train, evaluate), ablations (ablation),
and a CLI (cli).
"""

from .backbone import BackboneConfig, TapSet, backbone_forward, init_backbone_params
from .cascade import (
    Assignment,
    CascadeConfig,
    ProposalSet,
    StageState,
    assign_labels,
    feature_chain,
    mu_mask,
    propose,
    run_cascade,
    sample_stage_batch,
    score_chain,
)
from .detector import Detection, Detector
from .evaluate import EvalReport, evaluate_ap, evaluate_detector
from .geometry import (
    AnchorGrid,
    Box,
    BoxDelta,
    clip_box,
    decode,
    encode,
    generate_anchors,
    iou,
    nms,
)
from .losses import LossBreakdown, cascade_cls_loss, detection_loss, loc_loss, smooth_l1, stage_weights
from .rng import Rng, mix_seed, splitmix64
from .roi import RoiConfig, roi_forward, roi_loss, roi_pool
from .snapshot import load_snapshot, save_snapshot
from .synth import SceneRecord, SceneSpec, generate_dataset, read_annotations, write_annotations
from .tensor import Tensor, gradcheck
from .train import TrainConfig, sgd_step, train

__version__ = "0.1.0"

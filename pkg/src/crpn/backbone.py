"""Small convolutional trunk exposing four equal-shape feature taps.

Two taps come from a higher-resolution block and are 2x2 average-pooled
(after their ReLU) down to the resolution of the two later taps, so all
four can be fused pointwise by the cascade. The stem is a run of stride-2
convs sized so the later block sits at ``stride_at_tap`` total
downsampling.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


@dataclass
class BackboneConfig:
    channels: int = 32
    stem_channels: int = 16
    input_size: int = 96
    stride_at_tap: int = 16

    def validate(self) -> None:
        if self.channels < 1 or self.stem_channels < 1:
            raise ValueError("channel counts must be >= 1")
        s = self.stride_at_tap
        if s < 2 or (s & (s - 1)) != 0:
            raise ValueError(f"stride_at_tap must be a power of two >= 2, got {s}")
        if self.input_size % (2 * s) != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2*stride_at_tap {2 * s}"
            )

    @property
    def num_stem_convs(self) -> int:
        return (self.stride_at_tap // 2).bit_length() - 1

    @property
    def tap_size(self) -> int:
        return self.input_size // self.stride_at_tap


@dataclass
class TapSet:
    f: list  # four Tensors [N, channels, S, S]


def _layer_shapes(cfg: BackboneConfig):
    """(name, out_channels, in_channels) for every conv in the trunk."""
    layers = []
    prev = 3
    for i in range(cfg.num_stem_convs):
        layers.append((f"stem{i}", cfg.stem_channels, prev))
        prev = cfg.stem_channels
    for name in ("a1", "a2"):
        layers.append((name, cfg.channels, prev))
        prev = cfg.channels
    for name in ("b1", "b2"):
        layers.append((name, cfg.channels, prev))
    return layers


def init_backbone_params(cfg: BackboneConfig, rng: Rng, std: float = 0.01) -> dict:
    """Zero-mean Gaussian weights (given std), zero biases."""
    cfg.validate()
    params = {}
    for name, out_c, in_c in _layer_shapes(cfg):
        params[f"backbone/{name}/w"] = T.param(None, rng=rng, shape=(out_c, in_c, 3, 3), std=std)
        params[f"backbone/{name}/b"] = Tensor([0.0] * out_c, requires_grad=True)
    return params


def param_count(cfg: BackboneConfig) -> int:
    return sum(out_c * in_c * 9 + out_c for _, out_c, in_c in _layer_shapes(cfg))


def backbone_forward(image: Tensor, cfg: BackboneConfig, params: dict) -> TapSet:
    """Run the trunk; returns four aligned taps at ``tap_size`` resolution."""
    n, c, h, w = image.shape
    if h != cfg.input_size or w != cfg.input_size:
        raise ValueError(
            f"backbone expects {cfg.input_size}x{cfg.input_size} input, got {h}x{w}"
        )
    if c != 3:
        raise ValueError(f"backbone expects 3 input channels, got {c}")

    def conv(name: str, x: Tensor, stride: int) -> Tensor:
        return T.relu(
            T.conv2d(x, params[f"backbone/{name}/w"], params[f"backbone/{name}/b"],
                     stride=stride, padding=1)
        )

    x = image
    for i in range(cfg.num_stem_convs):
        x = conv(f"stem{i}", x, stride=2)
    a1 = conv("a1", x, stride=1)
    a2 = conv("a2", a1, stride=1)
    tap1 = T.avgpool2d(a1, 2)
    tap2 = T.avgpool2d(a2, 2)
    b1 = conv("b1", tap2, stride=1)
    b2 = conv("b2", b1, stride=1)
    return TapSet(f=[tap1, tap2, b1, b2])

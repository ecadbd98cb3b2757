"""FF-CNN encoder, KeyNet and RefineNet, six convolutional blocks each."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .keypoints import render_gaussians, soft_argmax, transport


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 4
    keypoints: int = 10
    encoder_widths: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    encoder_strides: tuple[int, ...] = (1, 1, 2, 1, 2, 1)
    decoder_widths: tuple[int, ...] = (128, 128, 64, 64, 32, 32)
    decoder_upsample: tuple[bool, ...] = (False, False, True, False, True, False)
    heatmap_sigma: float = 0.1
    reconstruct_all_channels: bool = False
    upsample_mode: str = "bilinear"
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in ("encoder_widths", "encoder_strides", "decoder_widths", "decoder_upsample"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.in_channels < 1 or self.keypoints < 1:
            raise ValueError("in_channels and keypoints must be >= 1")
        if len(self.encoder_widths) != len(self.encoder_strides):
            raise ValueError("encoder widths and strides must have equal length")
        if len(self.decoder_widths) != len(self.decoder_upsample):
            raise ValueError("decoder widths and upsample flags must have equal length")
        if any(w < 1 for w in self.encoder_widths + self.decoder_widths):
            raise ValueError("channel widths must be positive")
        if any(s not in (1, 2) for s in self.encoder_strides):
            raise ValueError("strides must be 1 or 2")
        if self.downsample != 2 ** sum(self.decoder_upsample):
            raise ValueError("decoder upsampling must undo encoder striding")
        if self.heatmap_sigma <= 0:
            raise ValueError("heatmap_sigma must be positive")

    @property
    def feature_channels(self) -> int:
        return self.encoder_widths[-1]

    @property
    def downsample(self) -> int:
        return math.prod(self.encoder_strides)

    @property
    def out_channels(self) -> int:
        return self.in_channels if self.reconstruct_all_channels else 1

    def feature_side(self, input_side: int) -> int:
        if input_side % self.downsample:
            raise ValueError(f"input side {input_side} is not divisible by {self.downsample}")
        return input_side // self.downsample


class ConvBlock(nn.Module):
    """3x3 convolution, ReLU, then batch normalisation."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, momentum: float = 0.1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(out_channels, momentum=momentum)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(F.relu(self.conv(x)))


def _encoder(spec: NetworkSpec) -> nn.Sequential:
    blocks = []
    c = spec.in_channels
    for width, stride in zip(spec.encoder_widths, spec.encoder_strides):
        blocks.append(ConvBlock(c, width, stride, spec.bn_momentum))
        c = width
    return nn.Sequential(*blocks)


class FeatureEncoder(nn.Module):
    """FF-CNN: fuses the TGA frame with the multi-scale bone maps."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.blocks = _encoder(spec)

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(x)


class KeyNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.blocks = _encoder(spec)
        self.regressor = nn.Conv2d(spec.encoder_widths[-1], spec.keypoints, 1)
        self.sigma = spec.heatmap_sigma

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(coords, heatmaps, confidence)`` for a ``(B, C, H, W)`` batch."""
        raw = self.regressor(self.blocks(x))
        coords, confidence = soft_argmax(raw)
        heatmaps = render_gaussians(coords, raw.shape[-2:], self.sigma)
        return coords, heatmaps, confidence


class RefineNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        blocks = []
        c = spec.feature_channels
        for width in spec.decoder_widths:
            blocks.append(ConvBlock(c, width, 1, spec.bn_momentum))
            c = width
        self.blocks = nn.ModuleList(blocks)
        self.upsample = spec.decoder_upsample
        self.mode = spec.upsample_mode
        self.head = nn.Conv2d(c, spec.out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        for block, up in zip(self.blocks, self.upsample):
            if up:
                kw = {"align_corners": False} if self.mode == "bilinear" else {}
                x = F.interpolate(x, scale_factor=2, mode=self.mode, **kw)
            x = block(x)
        return torch.sigmoid(self.head(x))


class Transporter(nn.Module):
    def __init__(self, spec: NetworkSpec = NetworkSpec()):
        super().__init__()
        self.spec = spec
        self.ffcnn = FeatureEncoder(spec)
        self.keynet = KeyNet(spec)
        self.refinenet = RefineNet(spec)

    def forward(self, source: Tensor, target: Tensor) -> Tensor:
        """Reconstruct ``target`` from ``source`` features plus transported target features.

        Both frames share one pass through each network. Source features and
        heatmaps are detached; only the target branch and RefineNet learn.
        """
        if source.shape != target.shape:
            raise ValueError("source and target batches differ in shape")
        if source.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {source.shape[1]}")
        b = source.shape[0]
        both = torch.cat([source, target])
        psi = self.ffcnn(both)
        _, heat, _ = self.keynet(both)
        mixed = transport(psi[:b].detach(), psi[b:], heat[:b].detach(), heat[b:])
        return self.refinenet(mixed)


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Centred uniform fan-in initialisation drawn from a dedicated generator."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
    return model

"""Refinement decoder and the edge-area alignment (E2A) deep supervision head."""

from __future__ import annotations

from typing import List, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import SpatialGate, conv_bn_relu
from .core import binarize, boundary_extract_torch
from .encoder import he_init
from .losses import combined_loss


class ChannelAttention(nn.Module):
    """Squeeze by global avg- and max-pooling, shared bottleneck, sigmoid channel weights."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.gate = SpatialGate(kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class DecoderBlock(nn.Module):
    """Upsample ``deep`` x2, fuse with the C2A skip feature, refine.

    transpose conv -> CAM on ``[up; skip]`` -> 2 x (conv, BN, ReLU) -> SAM
    """

    def __init__(self, deep_ch: int, skip_ch: int, out_ch: int, reduction: int = 16):
        super().__init__()
        self.up = nn.ConvTranspose2d(deep_ch, deep_ch, kernel_size=2, stride=2)
        self.cam = ChannelAttention(deep_ch + skip_ch, reduction)
        self.body = nn.Sequential(
            conv_bn_relu(deep_ch + skip_ch, out_ch), conv_bn_relu(out_ch, out_ch)
        )
        self.sam = SpatialAttention()

    def forward(self, deep: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        up = self.up(deep)
        if up.shape[-2:] != skip.shape[-2:]:
            raise ValueError(
                f"upsampled {tuple(up.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}"
            )
        x = self.cam(torch.cat([up, skip], dim=1))
        return self.sam(self.body(x))


class Refinement(nn.Module):
    """Four decoder blocks (skips of levels 4..1) and a 3x3 head to one channel."""

    def __init__(self, channels: Sequence[int], reduction: int = 16):
        super().__init__()
        c = list(channels)
        if len(c) != 5:
            raise ValueError("expected five encoder channel widths")
        # block for level y: deep comes from level y+1
        self.blocks = nn.ModuleList(
            DecoderBlock(c[y + 1], c[y], c[y], reduction) for y in (3, 2, 1, 0)
        )
        self.head = nn.Conv2d(c[0], 1, 3, padding=1)
        he_init(self)

    def forward(self, deep: torch.Tensor, skips: Sequence[torch.Tensor]):
        """``skips`` are the C2A features of levels 4, 3, 2, 1 in that order.

        Returns ``(intensity, prob, states)`` where ``states`` lists the
        decoder outputs from level 4 down to level 1.
        """
        if len(skips) != 4:
            raise ValueError(f"expected 4 skip features, got {len(skips)}")
        x = deep
        states: List[torch.Tensor] = []
        for block, skip in zip(self.blocks, skips):
            x = block(x, skip)
            states.append(x)
        intensity = self.head(x)
        return intensity, torch.sigmoid(intensity), states


def refine(decoder: Refinement, deep, skips):
    intensity, prob, _ = decoder(deep, skips)
    return intensity, prob


class E2AHead(nn.Module):
    """1x1 conv to one channel + sigmoid on the deepest encoder feature."""

    def __init__(self, channels: int):
        super().__init__()
        self.in_ch = channels
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, deep: torch.Tensor) -> torch.Tensor:
        if deep.shape[1] != self.in_ch:
            raise ValueError(f"E2A head expects {self.in_ch} channels, got {deep.shape[1]}")
        return torch.sigmoid(self.conv(deep))


class E2AOutput(NamedTuple):
    prob: torch.Tensor
    gt: torch.Tensor  # ground truth at the deep resolution
    edge_target: torch.Tensor
    pred_edges: torch.Tensor
    area: torch.Tensor
    edge: torch.Tensor
    total: torch.Tensor


def downsample_mask(gt: torch.Tensor, factor: int) -> torch.Tensor:
    """Max-pool a binary mask: a coarse cell is changed if any covered pixel is."""
    return F.max_pool2d(gt.to(torch.float32), factor, factor).to(gt.dtype)


def e2a_supervise(pred: torch.Tensor, gt_full: torch.Tensor, mode: str = "bce+iou") -> E2AOutput:
    """Supervise a deep probability map against the full-resolution label."""
    h, w = gt_full.shape[-2:]
    if h % 16 or w % 16:
        raise ValueError(f"label resolution {h}x{w} is not divisible by 16")
    factor = h // pred.shape[-2]
    if factor * pred.shape[-2] != h or factor * pred.shape[-1] != w:
        raise ValueError(f"prediction {tuple(pred.shape[-2:])} does not tile label {h}x{w}")
    gt = downsample_mask(gt_full, factor).to(pred.dtype)
    terms = combined_loss(pred, gt, mode)
    with torch.no_grad():
        edge_target = boundary_extract_torch(gt)
        pred_edges = boundary_extract_torch(binarize(pred.detach()))
    return E2AOutput(pred, gt, edge_target, pred_edges, *terms)

"""Three-branch localization encoder.

B1 and B2 share a VGG16-style backbone (max-pooling between blocks); the
difference branch BD has its own blocks and downsamples the C2A output with
learnable optimal pooling (LOP).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn

from .alignment import DEFAULT_T, C2AOutput, ChangeAlignment, hca_propagate
from .core import difference_image

log = logging.getLogger(__name__)

VGG16_CHANNELS = (64, 128, 256, 512, 512)
VGG16_DEPTHS = (2, 2, 3, 3, 3)
# conv indices of torchvision's vgg16().features
_TORCHVISION_VGG16_CONVS = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)


def channel_plan(width: float = 1.0) -> tuple[int, ...]:
    """VGG16 channel widths scaled by ``width`` (1.0 gives 64..512)."""
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    return tuple(max(1, int(round(c * width))) for c in VGG16_CHANNELS)


def he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.kernel_size[0] > 2:
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ConvBlock(nn.Module):
    """VGG16 block: ``n`` x (3x3 conv, BN, ReLU), optionally preceded by 2x2 max-pool."""

    def __init__(self, in_ch: int, out_ch: int, n_convs: int, pool: bool = False):
        super().__init__()
        self.in_ch = in_ch
        self.pool = nn.MaxPool2d(2, 2) if pool else nn.Identity()
        layers = []
        for k in range(n_convs):
            layers += [
                nn.Conv2d(in_ch if k == 0 else out_ch, out_ch, 3, stride=1, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
        self.body = nn.Sequential(*layers)

    @property
    def convs(self) -> List[nn.Conv2d]:
        return [m for m in self.body if isinstance(m, nn.Conv2d)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"block expects {self.in_ch} input channels, got {x.shape[1]}")
        return self.body(self.pool(x))


class LOP(nn.Module):
    """Learnable optimal pooling: depthwise 2x2 stride-2 convolution with bias.

    Initialised to 2x2 average pooling (all kernel cells 0.25, zero bias).
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels <= 0:
            raise ValueError("channels must be positive")
        self.conv = nn.Conv2d(channels, channels, 2, stride=2, groups=channels, bias=True)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        with torch.no_grad():
            self.conv.weight.fill_(0.25)
            self.conv.bias.zero_()

    @property
    def kernels(self) -> torch.Tensor:
        """Per-channel kernels, shape ``(c, 2, 2)``."""
        return self.conv.weight[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"LOP needs even spatial dims, got {tuple(x.shape[-2:])}")
        return self.conv(x)


def lop_init(channels: int) -> LOP:
    return LOP(channels)


@dataclass
class EncoderOutput:
    features: List[torch.Tensor]  # F_Ly^C2A, y = 1..5
    finals: List[torch.Tensor] = field(default_factory=list)  # C2AM_Final^Ly
    branches: List[tuple] = field(default_factory=list)  # (F_B1, F_B2, F_BD) per level
    c2a: List[C2AOutput] = field(default_factory=list)

    @property
    def deep(self) -> torch.Tensor:
        return self.features[-1]


class LocalizationEncoder(nn.Module):
    def __init__(
        self,
        in_ch: int = 3,
        width: float = 1.0,
        use_lop: bool = True,
        use_c2a: bool = True,
        use_hca: bool = True,
        T: float = DEFAULT_T,
    ):
        super().__init__()
        if use_hca and not use_c2a:
            raise ValueError("HCA requires C2A")
        self.channels = channel_plan(width)
        self.use_lop, self.use_c2a, self.use_hca = use_lop, use_c2a, use_hca

        ins = (in_ch,) + self.channels[:-1]
        self.siamese = nn.ModuleList(
            ConvBlock(i, o, n, pool=y > 0)
            for y, (i, o, n) in enumerate(zip(ins, self.channels, VGG16_DEPTHS))
        )
        self.diff = nn.ModuleList(
            ConvBlock(i, o, n) for i, o, n in zip(ins, self.channels, VGG16_DEPTHS)
        )
        if use_lop:
            self.down = nn.ModuleList(LOP(c) for c in self.channels[:4])
        else:
            self.down = nn.ModuleList(nn.MaxPool2d(2, 2) for _ in range(4))
        self.c2a = (
            nn.ModuleList(ChangeAlignment(c, T) for c in self.channels) if use_c2a else None
        )
        he_init(self)
        for m in self.down:
            if isinstance(m, LOP):
                m.reset_parameters()

    def forward(self, t1: torch.Tensor, t2: torch.Tensor) -> EncoderOutput:
        if t1.shape != t2.shape:
            raise ValueError(f"tile shapes differ: {tuple(t1.shape)} vs {tuple(t2.shape)}")
        h, w = t1.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"tile sides must be divisible by 16, got {h}x{w}")

        out = EncoderOutput(features=[])
        x1, x2, xd = t1, t2, difference_image(t1, t2)
        for y in range(5):
            x1 = self.siamese[y](x1)
            x2 = self.siamese[y](x2)
            fd = self.diff[y](xd)
            out.branches.append((x1, x2, fd))
            if self.c2a is not None:
                pre = hca_propagate(out.finals, y + 1) if (self.use_hca and y > 0) else None
                res = self.c2a[y](x1, x2, fd, pre)
                out.c2a.append(res)
                out.finals.append(res.final)
                fused = res.enhanced
            else:
                fused = fd + torch.abs(x1 - x2)
            out.features.append(fused)
            if y < 4:
                xd = self.down[y](fused)
        return out


# ---------------------------------------------------------------------------
# Backbone weight archives
# ---------------------------------------------------------------------------


def backbone_keys(depths=VGG16_DEPTHS):
    for y, n in enumerate(depths, start=1):
        for k in range(1, n + 1):
            yield f"level{y}.conv{k}"


def vgg16_to_archive(state_dict) -> dict:
    """Map a torchvision ``vgg16().features`` state dict onto the archive key schema.

    Accepts keys with or without the ``features.`` prefix.
    """
    sd = {k.removeprefix("features."): v for k, v in state_dict.items()}
    archive = {}
    for key, idx in zip(backbone_keys(), _TORCHVISION_VGG16_CONVS):
        archive[f"{key}.weight"] = np.asarray(sd[f"{idx}.weight"])
        archive[f"{key}.bias"] = np.asarray(sd[f"{idx}.bias"])
    return archive


def save_backbone_archive(archive: dict, path) -> None:
    np.savez(Path(path), **{k: np.asarray(v) for k, v in archive.items()})


def _read_archive(path) -> dict:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            return {k: torch.as_tensor(data[k]) for k in data.files}
    obj = torch.load(path, map_location="cpu", weights_only=True)
    return {k: torch.as_tensor(v) for k, v in obj.items()}


def load_backbone_weights(
    encoder: LocalizationEncoder, path_or_archive, include_diff: bool = False
) -> dict:
    """Copy ``level{y}.conv{k}.weight/bias`` tensors into the encoder blocks.

    Returns a report with the loaded keys, archive keys that matched nothing
    and expected keys the archive lacks. A shape mismatch raises.
    """
    if isinstance(path_or_archive, dict):
        archive = {k: torch.as_tensor(v) for k, v in path_or_archive.items()}
    else:
        archive = _read_archive(path_or_archive)

    targets = [encoder.siamese] + ([encoder.diff] if include_diff else [])
    expected = {}
    for y, block in enumerate(encoder.siamese, start=1):
        for k, conv in enumerate(block.convs, start=1):
            expected[f"level{y}.conv{k}.weight"] = [
                blocks[y - 1].convs[k - 1].weight for blocks in targets
            ]
            expected[f"level{y}.conv{k}.bias"] = [
                blocks[y - 1].convs[k - 1].bias for blocks in targets
            ]

    loaded = []
    with torch.no_grad():
        for key, params in expected.items():
            if key not in archive:
                continue
            value = archive[key]
            if tuple(value.shape) != tuple(params[0].shape):
                raise ValueError(
                    f"{key}: archive shape {tuple(value.shape)} != model {tuple(params[0].shape)}"
                )
            for p in params:
                p.copy_(value.to(p.dtype))
            loaded.append(key)
    report = {
        "loaded": loaded,
        "unmatched": sorted(set(archive) - set(expected)),
        "missing": sorted(set(expected) - set(loaded)),
    }
    if report["unmatched"] or report["missing"]:
        log.warning(
            "backbone archive: %d unmatched, %d missing keys",
            len(report["unmatched"]),
            len(report["missing"]),
        )
    return report

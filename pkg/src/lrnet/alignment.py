"""Change alignment attention (C2A) and its hierarchical propagation (HCA).

All tensors are ``N x C x H x W``; attention maps carry a single channel.
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_T = 0.5


def conv_bn_relu(in_ch: int, out_ch: int, kernel_size: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, stride=1, padding=kernel_size // 2),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def channel_pool(x: torch.Tensor) -> torch.Tensor:
    """Stack channel-wise max and mean into a 2-channel map ``[max; avg]``."""
    return torch.cat(
        [x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1
    )


class SpatialGate(nn.Module):
    """sigmoid(conv7x7([max; avg])) over the channel axis, values in (0, 1)."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(channel_pool(x)))


def change_flags(m: torch.Tensor) -> torch.Tensor:
    """True where the preliminary attention marks a change (``m >= 0.5``)."""
    return m >= 0.5


def pixel_cosine_similarity(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of the per-pixel channel vectors, ``N x 1 x H x W``.

    Pixels where either vector is zero get similarity 0. The result is
    clamped to [-1, 1] so float rounding cannot push alpha above 2.
    """
    if d1.shape != d2.shape:
        raise ValueError(f"shape mismatch: {tuple(d1.shape)} vs {tuple(d2.shape)}")
    dot = (d1 * d2).sum(dim=1, keepdim=True)
    norms = d1.norm(dim=1, keepdim=True) * d2.norm(dim=1, keepdim=True)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    sim = torch.where(norms > 0, dot / safe, torch.zeros_like(dot))
    return sim.clamp(-1.0, 1.0)


def alignment_coefficients(
    sim: torch.Tensor,
    flags1: torch.Tensor,
    flags2: torch.Tensor,
    T: float = DEFAULT_T,
) -> torch.Tensor:
    """Piecewise attention weight from similarity and the two change flags.

    ``sim <= T`` and disagreeing flags keep the neutral weight ``T``; when
    both branches agree on change the weight is ``2 * sim``, when both agree
    on no change it is ``1 - sim``.
    """
    if not 0.0 < T < 1.0:
        raise ValueError(f"T must lie in (0, 1), got {T}")
    both_chg = flags1 & flags2
    both_unchg = ~flags1 & ~flags2
    high = sim > T
    alpha = torch.full_like(sim, T)
    alpha = torch.where(high & both_chg, 2.0 * sim, alpha)
    alpha = torch.where(high & both_unchg, 1.0 - sim, alpha)
    return alpha


def fuse_attention(
    alpha: torch.Tensor,
    m1: torch.Tensor,
    m2: torch.Tensor,
    pre: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(cur, final)``; ``final`` averages ``cur`` with ``pre`` if given."""
    if not (alpha.shape == m1.shape == m2.shape):
        raise ValueError("alpha, m1 and m2 must share a shape")
    cur = alpha * (m1 + m2) / 2
    if pre is None:
        return cur, cur
    if pre.shape[-2:] != cur.shape[-2:]:
        raise ValueError(
            f"pre map {tuple(pre.shape[-2:])} does not match {tuple(cur.shape[-2:])}"
        )
    return cur, (cur + pre) / 2


def hca_propagate(finals: Sequence[torch.Tensor], target_level: int) -> torch.Tensor:
    """Fuse the final attention maps of levels ``1..y-1`` at level ``y``.

    ``finals[j]`` belongs to level ``j + 1``; each is average-pooled with
    kernel and stride ``2 ** (y - level)`` and the pooled maps are averaged.
    """
    y = target_level
    if not 2 <= y <= 5:
        raise ValueError(f"target level must be in 2..5, got {y}")
    if len(finals) < y - 1:
        raise ValueError(f"need {y - 1} final maps for level {y}, got {len(finals)}")
    pooled = []
    for level, m in enumerate(finals[: y - 1], start=1):
        k = 2 ** (y - level)
        pooled.append(F.avg_pool2d(m, kernel_size=k, stride=k) if k > 1 else m)
    size = pooled[-1].shape[-2:]
    if any(p.shape[-2:] != size for p in pooled):
        raise RuntimeError(
            "pooled attention maps disagree in resolution: "
            + ", ".join(str(tuple(p.shape[-2:])) for p in pooled)
        )
    return torch.stack(pooled, dim=0).mean(dim=0)


class C2AOutput(NamedTuple):
    enhanced: torch.Tensor
    final: torch.Tensor
    cur: torch.Tensor
    alpha: torch.Tensor
    m1: torch.Tensor
    m2: torch.Tensor
    sim: torch.Tensor


class ChangeAlignment(nn.Module):
    """C2A block for one encoder level.

    ``alpha`` may be supplied to freeze the similarity gate; by default it
    is recomputed and detached from the graph.
    """

    def __init__(self, channels: int, T: float = DEFAULT_T, kernel_size: int = 7):
        super().__init__()
        self.T = T
        self.conv_d1 = conv_bn_relu(channels, channels)
        self.conv_d2 = conv_bn_relu(channels, channels)
        self.gate_d1 = SpatialGate(kernel_size)
        self.gate_d2 = SpatialGate(kernel_size)

    def original_change_features(self, f1, f2, fd):
        if not (f1.shape == f2.shape == fd.shape):
            raise ValueError(
                f"branch features disagree: {tuple(f1.shape)}, {tuple(f2.shape)}, {tuple(fd.shape)}"
            )
        return self.conv_d1(torch.abs(f1 - f2)), self.conv_d2(fd)

    def forward(self, f1, f2, fd, pre=None, alpha=None) -> C2AOutput:
        d1, d2 = self.original_change_features(f1, f2, fd)
        m1 = self.gate_d1(d1)
        m2 = self.gate_d2(d2)
        with torch.no_grad():
            sim = pixel_cosine_similarity(d1, d2)
            if alpha is None:
                alpha = alignment_coefficients(
                    sim, change_flags(m1), change_flags(m2), self.T
                )
        alpha = alpha.detach()
        cur, final = fuse_attention(alpha, m1, m2, pre)
        return C2AOutput(final * fd, final, cur, alpha, m1, m2, sim)

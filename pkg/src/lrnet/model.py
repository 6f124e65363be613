"""The assembled localization-then-refinement network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .alignment import DEFAULT_T
from .encoder import EncoderOutput, LocalizationEncoder
from .refinement import E2AHead, Refinement


@dataclass
class LRNetOutput:
    intensity: torch.Tensor  # F_R1, logits at input resolution
    prob: torch.Tensor
    deep_prob: Optional[torch.Tensor]  # E2A head, input/16 resolution
    encoder: EncoderOutput
    decoder_states: list


class LRNet(nn.Module):
    """Three-branch encoder, C2A/HCA interaction, E2A deep head and CAM/SAM decoder.

    The four toggles reproduce the ablation variants; all off gives the
    plain three-branch VGG16 base model.
    """

    def __init__(
        self,
        in_ch: int = 3,
        width: float = 1.0,
        use_lop: bool = True,
        use_c2a: bool = True,
        use_hca: bool = True,
        use_e2a: bool = True,
        T: float = DEFAULT_T,
        reduction: int = 16,
    ):
        super().__init__()
        self.encoder = LocalizationEncoder(in_ch, width, use_lop, use_c2a, use_hca, T)
        channels = self.encoder.channels
        self.decoder = Refinement(channels, reduction)
        self.e2a = E2AHead(channels[-1]) if use_e2a else None

    def forward(self, t1: torch.Tensor, t2: torch.Tensor) -> LRNetOutput:
        enc = self.encoder(t1, t2)
        deep = enc.deep
        deep_prob = self.e2a(deep) if self.e2a is not None else None
        intensity, prob, states = self.decoder(deep, enc.features[3::-1])
        return LRNetOutput(intensity, prob, deep_prob, enc, states)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)

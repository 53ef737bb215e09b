"""Discardable segmentation head and the training losses.

The head is a single 1x1 convolution to one channel followed by a sigmoid;
it is trained jointly with the adapters and never used at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import ShapeError
from .matching import diff_tensor, stfpm_loss

PROB_CLAMP = 1e-7


class SegHead(nn.Module):
    """1x1 conv projecting the stacked feature differences to one logit map."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, kernel_size=1, bias=True)

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    def forward(self, d: Tensor) -> Tensor:
        if d.shape[-3] != self.conv.in_channels:
            raise ShapeError(f"head expects {self.conv.in_channels} channels, got {d.shape[-3]}")
        return torch.sigmoid(self.conv(d)).squeeze(-3)


def init_seg_head(in_channels: int, seed: int) -> SegHead:
    head = SegHead(in_channels)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        head.conv.weight.normal_(0.0, math.sqrt(1.0 / in_channels), generator=gen)
        head.conv.bias.zero_()
    return head


def seg_forward(head: SegHead, d: Tensor) -> Tensor:
    """Probability map in (0,1): sigmoid of the projected difference tensor."""
    return head(d)


def downsample_mask(mask: Tensor, size: tuple[int, int]) -> Tensor:
    """Area (average-pool) downsampling, binarized strictly above 0.5."""
    m = mask.to(torch.float32)
    squeeze = m.dim() == 2
    if squeeze:
        m = m.unsqueeze(0)
    pooled = F.adaptive_avg_pool2d(m.unsqueeze(1), size).squeeze(1)
    out = (pooled > 0.5).to(torch.float32)
    return out.squeeze(0) if squeeze else out


def focal_loss(pred: Tensor, mask: Tensor, gamma: float = 2.0) -> Tensor:
    """Mean of -(1-p)^gamma log(p) with p the probability of the true class."""
    if pred.shape != mask.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs mask {tuple(mask.shape)}")
    y = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    m = mask.to(y.dtype)
    p = m * y + (1.0 - m) * (1.0 - y)
    return (-((1.0 - p) ** gamma) * torch.log(p)).mean()


def l1_loss(pred: Tensor, mask: Tensor) -> Tensor:
    if pred.shape != mask.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs mask {tuple(mask.shape)}")
    return (mask.to(pred.dtype) - pred).abs().mean()


@dataclass
class LossBreakdown:
    """Scalar loss tensors; `total` is the exact sum of the three components."""

    stfpm: Tensor
    focal: Tensor
    l1: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        """Logged values; `total` is recomposed from the component floats so the
        identity total == stfpm + focal + l1 is exact for CSV consumers."""
        stfpm = float(self.stfpm.detach())
        focal = float(self.focal.detach())
        l1 = float(self.l1.detach())
        return {"stfpm": stfpm, "focal": focal, "l1": l1, "total": stfpm + focal + l1}


def total_loss(
    ft: dict[int, Tensor],
    fs: dict[int, Tensor],
    head: SegHead,
    mask: Tensor,
    gamma: float = 2.0,
) -> LossBreakdown:
    """Matching loss plus segmentation guidance (focal + L1) on the head output.

    Clean samples carry an all-zero mask, so the head is also penalized for
    false positives.
    """
    d = diff_tensor(ft, fs)
    pred = seg_forward(head, d)
    m = downsample_mask(mask, tuple(d.shape[-2:]))
    matching = stfpm_loss(ft, fs)
    focal = focal_loss(pred, m, gamma)
    l1 = l1_loss(pred, m)
    return LossBreakdown(stfpm=matching, focal=focal, l1=l1, total=matching + focal + l1)

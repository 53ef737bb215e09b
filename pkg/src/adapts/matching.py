"""Student pathway, feature-pyramid matching loss, and anomaly maps.

The student shares the frozen trunk with the teacher; at every adapted stage
the stage output is replaced by the adapter output before feeding the next
stage, so downstream taps depend on all earlier adapters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .adapters import AdapterSet
from .backbone import Backbone
from .exceptions import ConfigError, ShapeError

EPS_NORM = 1e-12


def student_forward(
    backbone: Backbone, adapters: AdapterSet, x: Tensor, taps: tuple[int, ...] | None = None
) -> dict[int, Tensor]:
    """Single pass through the frozen trunk with adapters applied at their stages."""
    taps = tuple(taps) if taps is not None else backbone.spec.tap_layers
    if not set(adapters.layers) <= set(backbone.spec.tap_layers):
        raise ConfigError(
            f"adapter stages {adapters.layers} outside backbone taps {backbone.spec.tap_layers}"
        )
    out = backbone.normalize_input(x)
    feats: dict[int, Tensor] = {}
    for i, stage in enumerate(backbone.stages, start=1):
        out = stage(out)
        if i in adapters.modules:
            out = adapters.modules[i](out)
        if i in taps:
            feats[i] = out
    return feats


def channel_normalize(feat: Tensor) -> Tensor:
    """Divide each spatial location's channel vector by its Euclidean norm.

    Zero vectors map to zero; the epsilon inside the square root keeps the
    operation differentiable everywhere.
    """
    norm = torch.sqrt((feat * feat).sum(dim=-3, keepdim=True) + EPS_NORM**2)
    return feat / norm


def _check_pyramids(ft: dict[int, Tensor], fs: dict[int, Tensor]) -> None:
    if set(ft) != set(fs):
        raise ShapeError(f"pyramid tap sets differ: {sorted(ft)} vs {sorted(fs)}")
    for l in ft:
        if ft[l].shape != fs[l].shape:
            raise ShapeError(f"stage {l} shapes differ: {tuple(ft[l].shape)} vs {tuple(fs[l].shape)}")


def stfpm_loss(ft: dict[int, Tensor], fs: dict[int, Tensor]) -> Tensor:
    """Sum over layers of the mean-per-location squared distance between
    normalized teacher and student features, averaged over the batch."""
    _check_pyramids(ft, fs)
    total = None
    for l in sorted(ft):
        d = channel_normalize(ft[l]) - channel_normalize(fs[l])
        h, w = d.shape[-2:]
        per_item = (d * d).sum(dim=(1, 2, 3)) / (h * w)
        total = per_item if total is None else total + per_item
    return total.mean()


def layer_diff_map(ft_l: Tensor, fs_l: Tensor) -> Tensor:
    """Per-location squared distance between normalized channel vectors, in [0, 4]."""
    if ft_l.shape != fs_l.shape:
        raise ShapeError(f"shapes differ: {tuple(ft_l.shape)} vs {tuple(fs_l.shape)}")
    d = channel_normalize(ft_l) - channel_normalize(fs_l)
    return (d * d).sum(dim=-3)


def gaussian_blur(maps: Tensor, sigma: float) -> Tensor:
    """Separable normalized Gaussian on (N, H, W) fields with reflect padding,
    so constant fields pass through unchanged."""
    if sigma <= 0:
        return maps
    x = maps.unsqueeze(1)
    for dim in (-2, -1):
        size = x.shape[dim]
        radius = min(int(4.0 * sigma + 0.5), size - 1)
        if radius < 1:
            continue
        coords = torch.arange(-radius, radius + 1, dtype=x.dtype)
        kernel = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
        kernel = kernel / kernel.sum()
        if dim == -2:
            weight = kernel.view(1, 1, -1, 1)
            pad = (0, 0, radius, radius)
        else:
            weight = kernel.view(1, 1, 1, -1)
            pad = (radius, radius, 0, 0)
        x = F.conv2d(F.pad(x, pad, mode="reflect"), weight)
    return x.squeeze(1)


@dataclass
class AnomalyMap:
    """Per-pixel anomaly field at the requested resolution plus its max score."""

    map: np.ndarray  # (H, W) float32, non-negative
    image_score: float


def anomaly_map_batch(
    ft: dict[int, Tensor],
    fs: dict[int, Tensor],
    out_size: tuple[int, int],
    combine: str = "sum",
    smooth_sigma: float = 4.0,
) -> Tensor:
    """Upsample per-layer difference maps to `out_size`, combine, and smooth.

    Returns an (N, H, W) tensor; image scores are its per-item maxima.
    """
    _check_pyramids(ft, fs)
    if not ft:
        raise ConfigError("cannot build an anomaly map from an empty tap set")
    if combine not in ("sum", "product"):
        raise ConfigError(f"combine must be 'sum' or 'product', got {combine!r}")
    combined = None
    for l in sorted(ft):
        m = layer_diff_map(ft[l], fs[l]).unsqueeze(1)
        m = F.interpolate(m, size=out_size, mode="bilinear", align_corners=False).squeeze(1)
        if combined is None:
            combined = m
        elif combine == "sum":
            combined = combined + m
        else:
            combined = combined * m
    return gaussian_blur(combined, smooth_sigma)


def image_scores(maps: Tensor) -> Tensor:
    return maps.amax(dim=(-2, -1))


def anomaly_map(
    ft: dict[int, Tensor],
    fs: dict[int, Tensor],
    out_size: tuple[int, int],
    combine: str = "sum",
    smooth_sigma: float = 4.0,
) -> AnomalyMap:
    """Single-image convenience wrapper around `anomaly_map_batch`."""
    maps = anomaly_map_batch(ft, fs, out_size, combine=combine, smooth_sigma=smooth_sigma)
    if maps.shape[0] != 1:
        raise ShapeError(f"expected a single-image pyramid, got batch of {maps.shape[0]}")
    m = maps[0].detach().cpu().numpy().astype(np.float32)
    return AnomalyMap(map=m, image_score=float(m.max()))


def diff_tensor(ft: dict[int, Tensor], fs: dict[int, Tensor]) -> Tensor:
    """Per-channel normalized differences, upsampled to the largest tap
    resolution and concatenated along channels: (N, sum C_l, Hs, Ws)."""
    _check_pyramids(ft, fs)
    if not ft:
        raise ConfigError("empty tap set")
    layers = sorted(ft)
    hs, ws = max((tuple(ft[l].shape[-2:]) for l in layers), key=lambda s: s[0] * s[1])
    parts = []
    for l in layers:
        d = channel_normalize(ft[l]) - channel_normalize(fs[l])
        if tuple(d.shape[-2:]) != (hs, ws):
            d = F.interpolate(d, size=(hs, ws), mode="bilinear", align_corners=False)
        parts.append(d)
    return torch.cat(parts, dim=-3)

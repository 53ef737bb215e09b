"""Frozen multi-stage convolutional feature extractor.

One network serves as both the teacher and, with adapters injected after
stage outputs, as the student's trunk. Stage taps are post-activation
outputs; the pooled embedding is the global average of the final stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from . import container as wc
from .exceptions import ConfigError, ContainerError, ShapeError


@dataclass(frozen=True)
class StageSpec:
    channels: int
    stride: int


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture descriptor: stage channels/strides, tap set, embedding dim."""

    name: str
    stages: tuple[StageSpec, ...]
    tap_layers: tuple[int, ...]  # 1-based stage indices
    embed_dim: int
    input_size: tuple[int, int]
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for i, st in enumerate(self.stages, start=1):
            if st.channels < 1:
                raise ConfigError(f"stage {i} has non-positive channel count {st.channels}")
            if st.stride < 1:
                raise ConfigError(f"stage {i} has non-positive stride {st.stride}")
        if not self.tap_layers:
            raise ConfigError("tap_layers must be non-empty")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ConfigError("tap_layers must be strictly ascending")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > len(self.stages):
            raise ConfigError(f"tap_layers {self.tap_layers} outside stage range 1..{len(self.stages)}")
        if self.embed_dim != self.stages[-1].channels:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must equal final stage channels {self.stages[-1].channels}"
            )
        h, w = self.input_size
        for l in range(1, len(self.stages) + 1):
            sh, sw = self.stage_size(l)
            if sh < 1 or sw < 1:
                raise ConfigError(f"stage {l} output collapses to {sh}x{sw} for input {h}x{w}")
            f = self.cumulative_stride(l)
            if h % f or w % f:
                raise ConfigError(f"input {h}x{w} not divisible by cumulative stride {f} at stage {l}")

    def cumulative_stride(self, layer: int) -> int:
        f = 1
        for st in self.stages[:layer]:
            f *= st.stride
        return f

    def stage_channels(self, layer: int) -> int:
        return self.stages[layer - 1].channels

    def stage_size(self, layer: int) -> tuple[int, int]:
        f = self.cumulative_stride(layer)
        return self.input_size[0] // f, self.input_size[1] // f

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "stages": [[s.channels, s.stride] for s in self.stages],
            "tap_layers": list(self.tap_layers),
            "embed_dim": self.embed_dim,
            "input_size": list(self.input_size),
            "mean": list(self.mean),
            "std": list(self.std),
        }

    @staticmethod
    def from_json(d: dict) -> "BackboneSpec":
        return BackboneSpec(
            name=d["name"],
            stages=tuple(StageSpec(int(c), int(s)) for c, s in d["stages"]),
            tap_layers=tuple(int(t) for t in d["tap_layers"]),
            embed_dim=int(d["embed_dim"]),
            input_size=(int(d["input_size"][0]), int(d["input_size"][1])),
            mean=tuple(float(v) for v in d["mean"]),
            std=tuple(float(v) for v in d["std"]),
        )


TOY_SPEC = BackboneSpec(
    name="toy",
    stages=(StageSpec(16, 2), StageSpec(32, 2), StageSpec(64, 2)),
    tap_layers=(1, 2, 3),
    embed_dim=64,
    input_size=(64, 64),
)

# Reference descriptor mirroring WideResNet50-2 stage widths; used for memory
# accounting and as the shape contract for externally loaded weights.
WIDE_RESNET50_2_SPEC = BackboneSpec(
    name="wide_resnet50_2",
    stages=(StageSpec(256, 4), StageSpec(512, 2), StageSpec(1024, 2), StageSpec(2048, 2)),
    tap_layers=(1, 2, 3),
    embed_dim=2048,
    input_size=(256, 256),
    mean=(0.485, 0.456, 0.406),
    std=(0.229, 0.224, 0.225),
)

NAMED_SPECS = {s.name: s for s in (TOY_SPEC, WIDE_RESNET50_2_SPEC)}


class Backbone(nn.Module):
    """Frozen trunk of 3x3 conv + ReLU stages. Weights never receive gradients."""

    def __init__(self, spec: BackboneSpec, stages: nn.ModuleList):
        super().__init__()
        self.spec = spec
        self.stages = stages
        self.register_buffer("input_mean", torch.tensor(spec.mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(spec.std).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):  # noqa: D102 - the trunk is permanently frozen
        return super().train(False)

    def normalize_input(self, x: Tensor) -> Tensor:
        """Validate batch shape and apply per-channel standardization."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != tuple(self.spec.input_size):
            raise ShapeError(
                f"input spatial size {tuple(x.shape[-2:])} != expected {self.spec.input_size}"
            )
        return (x - self.input_mean.to(x.dtype)) / self.input_std.to(x.dtype)

    def run_stages(self, x: Tensor) -> list[Tensor]:
        """Return the post-activation output of every stage, in order."""
        out = self.normalize_input(x)
        feats = []
        for stage in self.stages:
            out = stage(out)
            feats.append(out)
        return feats

    def forward_features(self, x: Tensor, taps: tuple[int, ...] | None = None) -> dict[int, Tensor]:
        taps = tuple(taps) if taps is not None else self.spec.tap_layers
        if not set(taps) <= set(self.spec.tap_layers):
            raise ConfigError(f"taps {taps} not a subset of spec taps {self.spec.tap_layers}")
        feats = self.run_stages(x)
        return {l: feats[l - 1] for l in taps}

    def forward_embedding(self, x: Tensor) -> Tensor:
        """Global-average-pooled final-stage features, shape (N, embed_dim)."""
        return self.run_stages(x)[-1].mean(dim=(2, 3))


def _make_stage(c_in: int, c_out: int, stride: int, gen: torch.Generator) -> nn.Sequential:
    conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1, bias=True)
    fan_in = c_in * 9
    with torch.no_grad():
        conv.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
        bound = 1.0 / math.sqrt(fan_in)
        conv.bias.uniform_(-bound, bound, generator=gen)
    return nn.Sequential(conv, nn.ReLU(inplace=False))


def make_toy_backbone(seed: int, spec: BackboneSpec = TOY_SPEC) -> Backbone:
    """Deterministic frozen backbone with He-initialized random weights."""
    gen = torch.Generator().manual_seed(int(seed))
    stages = nn.ModuleList()
    c_in = 3
    for st in spec.stages:
        stages.append(_make_stage(c_in, st.channels, st.stride, gen))
        c_in = st.channels
    return Backbone(spec, stages)


def backbone_tensors(backbone: Backbone) -> dict[str, np.ndarray]:
    out = {}
    for i, stage in enumerate(backbone.stages, start=1):
        conv = stage[0]
        out[f"stage{i}.conv.weight"] = conv.weight.detach().numpy().astype(np.float32)
        out[f"stage{i}.conv.bias"] = conv.bias.detach().numpy().astype(np.float32)
    return out


def save_backbone(backbone: Backbone, path) -> None:
    wc.save_container(path, backbone_tensors(backbone), meta={"kind": "backbone", "spec": backbone.spec.to_json()})


def load_backbone(path, spec: BackboneSpec | None = None) -> Backbone:
    """Load a frozen backbone, validating tensor names and shapes against the spec."""
    cont = wc.load_container(path)
    stored = cont.meta.get("spec")
    if spec is None:
        if stored is None:
            raise ContainerError("container has no backbone spec and none was provided")
        spec = BackboneSpec.from_json(stored)

    stages = nn.ModuleList()
    c_in = 3
    for i, st in enumerate(spec.stages, start=1):
        w = cont.require(f"stage{i}.conv.weight")
        b = cont.require(f"stage{i}.conv.bias")
        expected = (st.channels, c_in, 3, 3)
        if tuple(w.shape) != expected:
            raise ContainerError(
                f"tensor 'stage{i}.conv.weight' has shape {tuple(w.shape)}, expected {expected}"
            )
        if tuple(b.shape) != (st.channels,):
            raise ContainerError(
                f"tensor 'stage{i}.conv.bias' has shape {tuple(b.shape)}, expected {(st.channels,)}"
            )
        conv = nn.Conv2d(c_in, st.channels, kernel_size=3, stride=st.stride, padding=1, bias=True)
        with torch.no_grad():
            conv.weight.copy_(torch.from_numpy(w.copy()))
            conv.bias.copy_(torch.from_numpy(b.copy()))
        stages.append(nn.Sequential(conv, nn.ReLU(inplace=False)))
        c_in = st.channels
    return Backbone(spec, stages)


def backbone_memory_bytes(backbone_or_spec: Backbone | BackboneSpec) -> int:
    """Float32 bytes of all trunk weights (the component shared by every task)."""
    if isinstance(backbone_or_spec, Backbone):
        spec = backbone_or_spec.spec
    else:
        spec = backbone_or_spec
    total = 0
    c_in = 3
    for st in spec.stages:
        total += st.channels * c_in * 9 + st.channels
        c_in = st.channels
    return total * 4


def preprocess_images(images: np.ndarray | Tensor, spec: BackboneSpec) -> Tensor:
    """Resize a batch of [0,1] images to the spec input size (values stay in [0,1]).

    Per-channel standardization happens inside the backbone forward.
    """
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N,3,H,W) or (3,H,W) images, got {tuple(x.shape)}")
    if tuple(x.shape[-2:]) != tuple(spec.input_size):
        x = torch.nn.functional.interpolate(
            x, size=spec.input_size, mode="bilinear", align_corners=False
        )
    return x.clamp(0.0, 1.0)

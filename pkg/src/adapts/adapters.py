"""Residual 1x1-conv adapter blocks injected into the student pathway.

Every adapter computes ``y = x + conv2(relu(bn(conv1(x))))`` and the three
variants differ only in the latent width: linear keeps it, bottleneck shrinks
it by a factor R, expansion grows it by a factor E.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from . import container as wc
from .exceptions import ConfigError, ContainerError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

# Names of the stored tensors of a single adapter, in serialization order.
PARAM_NAMES = (
    "conv1.weight",
    "conv1.bias",
    "bn.weight",
    "bn.bias",
    "bn.running_mean",
    "bn.running_var",
    "conv2.weight",
    "conv2.bias",
)


@dataclass(frozen=True)
class AdapterKind:
    variant: str  # "linear" | "bottleneck" | "expansion"
    factor: float | None = None  # R for bottleneck (0<R<1), E for expansion (E>1)

    def __post_init__(self):
        if self.variant == "linear":
            if self.factor is not None:
                raise ConfigError("linear adapters take no factor")
        elif self.variant == "bottleneck":
            if self.factor is None or not 0.0 < self.factor < 1.0:
                raise ConfigError(f"bottleneck reduction factor must be in (0,1), got {self.factor}")
        elif self.variant == "expansion":
            if self.factor is None or self.factor <= 1.0:
                raise ConfigError(f"expansion factor must be > 1, got {self.factor}")
        else:
            raise ConfigError(f"unknown adapter variant {self.variant!r}")

    def label(self) -> str:
        if self.variant == "linear":
            return "linear"
        return f"{self.variant}:{self.factor:g}"

    @staticmethod
    def parse(text: str) -> "AdapterKind":
        name = text.strip().lower()
        if name in PRESET_KINDS:
            return PRESET_KINDS[name]
        if ":" in name:
            variant, factor = name.split(":", 1)
            return AdapterKind(variant, float(factor))
        raise ConfigError(f"unknown adapter kind {text!r}")


LINEAR = AdapterKind("linear")
BN25 = AdapterKind("bottleneck", 0.25)
BN50 = AdapterKind("bottleneck", 0.5)
EXP2 = AdapterKind("expansion", 2.0)

PRESET_KINDS = {"linear": LINEAR, "bn25": BN25, "bn50": BN50, "exp2": EXP2}


def latent_dim(kind: AdapterKind, channels: int) -> int:
    if channels < 1:
        raise ConfigError(f"channel count must be >= 1, got {channels}")
    if kind.variant == "linear":
        return channels
    if kind.variant == "bottleneck":
        return max(1, math.floor(channels * kind.factor))
    return int(round(channels * kind.factor))


class Adapter(nn.Module):
    """One residual adapter block for a fixed channel width."""

    def __init__(self, channels: int, kind: AdapterKind = LINEAR, eps: float = BN_EPS):
        super().__init__()
        latent = latent_dim(kind, channels)
        self.channels = channels
        self.latent = latent
        self.conv1 = nn.Conv2d(channels, latent, kernel_size=1, bias=True)
        self.bn = nn.BatchNorm2d(latent, eps=eps, momentum=BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=False)
        self.conv2 = nn.Conv2d(latent, channels, kernel_size=1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.channels:
            raise ShapeError(f"adapter expects {self.channels} channels, got {x.shape[-3]}")
        return x + self.conv2(self.relu(self.bn(self.conv1(x))))


def init_adapter(kind: AdapterKind, channels: int, seed: int, eps: float = BN_EPS) -> Adapter:
    """He-initialized adapter: random conv weights, zero biases, identity BN affine.

    Deliberately not the identity map, so a freshly attached student differs
    from the teacher and the matching loss has something to minimize.
    """
    adapter = Adapter(channels, kind, eps=eps)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        adapter.conv1.weight.normal_(0.0, math.sqrt(2.0 / channels), generator=gen)
        adapter.conv1.bias.zero_()
        adapter.conv2.weight.normal_(0.0, math.sqrt(2.0 / adapter.latent), generator=gen)
        adapter.conv2.bias.zero_()
    return adapter


@dataclass
class AdapterSet:
    """Adapters keyed by backbone stage index, plus precision bookkeeping.

    For int8 sets, `quantized` holds the stored payload (int8 data + scales)
    and `modules` the dequantized float realization used for inference.
    """

    kind: AdapterKind
    modules: dict[int, Adapter]
    precision: str = "f32"
    quantized: dict[int, dict[str, "QuantizedParam"]] | None = None

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.modules))

    def train(self, mode: bool = True) -> None:
        for m in self.modules.values():
            m.train(mode)

    def eval(self) -> None:
        self.train(False)

    def parameters(self):
        for m in self.modules.values():
            yield from m.parameters()


@dataclass(frozen=True)
class QuantizedParam:
    data: np.ndarray  # int8, same shape as the source tensor
    scale: float

    def dequantize(self) -> np.ndarray:
        # float64 product so that e.g. (1/127) * 127 reconstructs 1.0 exactly
        return (np.float64(self.scale) * self.data.astype(np.float64)).astype(np.float32)


def init_adapter_set(
    kind: AdapterKind, layers: tuple[int, ...], channels: dict[int, int], seed: int
) -> AdapterSet:
    modules = {}
    for l in sorted(layers):
        if l not in channels:
            raise ConfigError(f"no channel count known for stage {l}")
        modules[l] = init_adapter(kind, channels[l], seed=int(seed) + l)
    return AdapterSet(kind=kind, modules=modules)


def stored_tensors(adapter: Adapter) -> dict[str, Tensor]:
    """The eight stored tensors of an adapter (running stats included,
    num_batches_tracked excluded)."""
    sd = adapter.state_dict()
    return {name: sd[name] for name in PARAM_NAMES}


def stored_param_count(kind: AdapterKind, channels: int) -> int:
    """Stored parameters of one adapter: conv1 + conv2 weights and biases,
    BN affine pair and BN running statistics."""
    latent = latent_dim(kind, channels)
    return 2 * channels * latent + latent + channels + 4 * latent


def adapter_param_count(adapters: AdapterSet) -> int:
    total = 0
    for m in adapters.modules.values():
        total += sum(t.numel() for t in stored_tensors(m).values())
    return total


def adapter_memory_bytes(adapters: AdapterSet) -> int:
    """Payload bytes of the stored tensors: 4 per parameter for f32, 1 for int8.

    Per-tensor dequantization scales live in the container manifest and are
    not counted here.
    """
    count = adapter_param_count(adapters)
    return count * (1 if adapters.precision == "int8" else 4)


def accounted_memory_bytes(
    kind: AdapterKind, layers: tuple[int, ...], channels: dict[int, int], precision: str = "f32"
) -> int:
    """Closed-form adapter_memory_bytes for a hypothetical set (nothing materialized)."""
    count = sum(stored_param_count(kind, channels[l]) for l in layers)
    return count * (1 if precision == "int8" else 4)


def save_adapter_set(adapters: AdapterSet, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    scales: dict[str, float] = {}
    if adapters.precision == "int8":
        assert adapters.quantized is not None
        for l, params in adapters.quantized.items():
            for name, qp in params.items():
                tensors[f"stage{l}.{name}"] = qp.data
                scales[f"stage{l}.{name}"] = qp.scale
    else:
        for l, m in adapters.modules.items():
            for name, t in stored_tensors(m).items():
                tensors[f"stage{l}.{name}"] = t.detach().numpy().astype(np.float32)
    meta = {
        "kind": "adapter_set",
        "adapter_kind": adapters.kind.variant,
        "adapter_factor": adapters.kind.factor,
        "layers": list(adapters.layers),
        "precision": adapters.precision,
        "channels": {str(l): m.channels for l, m in adapters.modules.items()},
    }
    wc.save_container(path, tensors, scales=scales, meta=meta)


def _adapter_from_tensors(
    kind: AdapterKind, channels: int, tensors: dict[str, np.ndarray]
) -> Adapter:
    adapter = Adapter(channels, kind)
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in tensors.items()}
    state["bn.num_batches_tracked"] = torch.tensor(0, dtype=torch.long)
    adapter.load_state_dict(state)
    adapter.eval()
    return adapter


def load_adapter_set(path) -> AdapterSet:
    cont = wc.load_container(path)
    meta = cont.meta
    if meta.get("kind") != "adapter_set":
        raise ContainerError(f"{path} is not an adapter-set container")
    factor = meta.get("adapter_factor")
    kind = AdapterKind(meta["adapter_kind"], None if factor is None else float(factor))
    precision = meta.get("precision", "f32")
    layers = [int(l) for l in meta["layers"]]
    channels = {int(k): int(v) for k, v in meta["channels"].items()}

    modules: dict[int, Adapter] = {}
    quantized: dict[int, dict[str, QuantizedParam]] | None = {} if precision == "int8" else None
    for l in layers:
        per_layer: dict[str, np.ndarray] = {}
        if quantized is not None:
            quantized[l] = {}
        for name in PARAM_NAMES:
            key = f"stage{l}.{name}"
            arr = cont.require(key)
            if quantized is not None:
                if key not in cont.scales:
                    raise ContainerError(f"tensor {key!r} is int8 but has no scale")
                qp = QuantizedParam(data=arr.astype(np.int8), scale=cont.scales[key])
                quantized[l][name] = qp
                per_layer[name] = qp.dequantize()
            else:
                per_layer[name] = arr
        modules[l] = _adapter_from_tensors(kind, channels[l], per_layer)

    return AdapterSet(kind=kind, modules=modules, precision=precision, quantized=quantized)


def adapter_checksums(adapters: AdapterSet) -> dict[int, str]:
    """Stable per-stage digests of all stored tensors (for determinism checks)."""
    import hashlib

    out = {}
    for l, m in adapters.modules.items():
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(stored_tensors(m)[name].detach().numpy().astype(np.float32).tobytes())
        out[l] = h.hexdigest()
    return out

"""Symmetric per-tensor INT8 post-training quantization of adapter sets.

Arithmetic stays in float: stored tensors are dequantized on load, so the
scheme trades memory for a bounded round-trip error of scale/2 per element.
"""

from __future__ import annotations

import numpy as np
import torch

from .adapters import Adapter, AdapterSet, QuantizedParam, stored_tensors
from .exceptions import ConfigError

QMAX = 127


def quantize_tensor(w: np.ndarray | torch.Tensor) -> QuantizedParam:
    """scale = max|w| / 127 (1.0 for an all-zero tensor); data = round(w/scale)."""
    arr = np.asarray(w.detach().numpy() if isinstance(w, torch.Tensor) else w, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("cannot quantize a tensor with NaN or Inf entries")
    amax = float(np.abs(arr).max()) if arr.size else 0.0
    scale = amax / QMAX if amax > 0 else 1.0
    data = np.clip(np.rint(arr / scale), -QMAX, QMAX).astype(np.int8)
    return QuantizedParam(data=data, scale=scale)


def dequantize_tensor(q: QuantizedParam) -> np.ndarray:
    return q.dequantize()


def quantize_adapter_set(adapters: AdapterSet) -> AdapterSet:
    """Quantize every stored tensor of every adapter; returns an int8-precision
    set whose float modules hold the dequantized values."""
    if adapters.precision != "f32":
        raise ConfigError(f"expected an f32 adapter set, got {adapters.precision!r}")
    quantized: dict[int, dict[str, QuantizedParam]] = {}
    modules: dict[int, Adapter] = {}
    for l, m in adapters.modules.items():
        per_layer = {name: quantize_tensor(t) for name, t in stored_tensors(m).items()}
        quantized[l] = per_layer
        deq = Adapter(m.channels, adapters.kind, eps=m.bn.eps)
        state = {name: torch.from_numpy(dequantize_tensor(qp)) for name, qp in per_layer.items()}
        state["bn.num_batches_tracked"] = torch.tensor(0, dtype=torch.long)
        deq.load_state_dict(state)
        deq.eval()
        modules[l] = deq
    return AdapterSet(kind=adapters.kind, modules=modules, precision="int8", quantized=quantized)


def quantize_bundle(bundle):
    """Bundle copy with every task's adapters INT8-quantized; the backbone and
    prototype store are shared unchanged."""
    from .pipeline import ModelBundle

    qb = ModelBundle(bundle.backbone, bundle.config, scenario=bundle.scenario)
    qb.store = bundle.store
    qb.adapters = {name: quantize_adapter_set(ad) for name, ad in bundle.adapters.items()}
    return qb

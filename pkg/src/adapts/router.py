"""Prototype-based task identification.

Each task's prototype is the mean pre-head embedding of its normal training
images; a query is routed to the nearest prototype in Euclidean distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
from torch import Tensor

from . import container as wc
from .backbone import Backbone
from .exceptions import ConfigError, ContainerError, ShapeError


@dataclass
class PrototypeStore:
    """Append-only store of per-task mean embeddings."""

    dim: int
    prototypes: list[np.ndarray] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.prototypes)

    def add_task(self, prototype: np.ndarray, name: str) -> int:
        p = np.asarray(prototype, dtype=np.float32).reshape(-1)
        if p.shape[0] != self.dim:
            raise ShapeError(f"prototype dim {p.shape[0]} != store dim {self.dim}")
        if name in self.names:
            raise ConfigError(f"task {name!r} already present")
        self.prototypes.append(p)
        self.names.append(name)
        return len(self.prototypes) - 1

    def task_id(self, name: str) -> int:
        return self.names.index(name)

    def memory_bytes(self) -> int:
        return len(self.prototypes) * self.dim * 4

    def as_matrix(self) -> np.ndarray:
        return np.stack(self.prototypes).astype(np.float32)


def compute_prototype(backbone: Backbone, images: Iterable[Tensor], batch_size: int = 16) -> np.ndarray:
    """Streaming mean of `forward_embedding` over the given [0,1] images."""
    total = None
    count = 0
    batch: list[Tensor] = []

    def flush(acc, n):
        if not batch:
            return acc, n
        with torch.no_grad():
            emb = backbone.forward_embedding(torch.stack(batch)).to(torch.float64)
        acc = emb.sum(dim=0) if acc is None else acc + emb.sum(dim=0)
        n += emb.shape[0]
        batch.clear()
        return acc, n

    for img in images:
        batch.append(torch.as_tensor(img, dtype=torch.float32))
        if len(batch) >= batch_size:
            total, count = flush(total, count)
    total, count = flush(total, count)
    if count == 0:
        raise ConfigError("cannot compute a prototype from an empty dataset")
    return (total / count).numpy().astype(np.float32)


def nearest_prototype(store: PrototypeStore, embedding: np.ndarray) -> tuple[int, np.ndarray]:
    """Return (task id, per-task distances); ties break toward the lowest id."""
    if len(store) == 0:
        raise ConfigError("prototype store is empty")
    z = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if z.shape[0] != store.dim:
        raise ShapeError(f"embedding dim {z.shape[0]} != store dim {store.dim}")
    mat = store.as_matrix().astype(np.float64)
    distances = np.sqrt(((mat - z[None, :]) ** 2).sum(axis=1))
    return int(np.argmin(distances)), distances.astype(np.float64)


def identify_task(store: PrototypeStore, x: Tensor, backbone: Backbone) -> tuple[int, np.ndarray]:
    """Route one [0,1] image (3,H,W) to its nearest task prototype."""
    t = torch.as_tensor(x, dtype=torch.float32)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    with torch.no_grad():
        emb = backbone.forward_embedding(t)[0].numpy()
    return nearest_prototype(store, emb)


def save_store(store: PrototypeStore, path) -> None:
    tensors = {"prototypes": store.as_matrix() if len(store) else np.zeros((0, store.dim), np.float32)}
    wc.save_container(path, tensors, meta={"kind": "prototype_store", "dim": store.dim, "names": store.names})


def load_store(path) -> PrototypeStore:
    cont = wc.load_container(path)
    if cont.meta.get("kind") != "prototype_store":
        raise ContainerError(f"{path} is not a prototype-store container")
    mat = cont.require("prototypes")
    store = PrototypeStore(dim=int(cont.meta["dim"]))
    for row, name in zip(mat, cont.meta.get("names", [])):
        store.add_task(row, name)
    return store

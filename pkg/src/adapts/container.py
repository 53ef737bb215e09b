"""Weight container: a directory with `manifest.json` plus `tensors.bin`.

The manifest maps tensor names to shape, dtype ("f32" or "i8"), byte offset
into the concatenated payload, a sha256 digest, and (for "i8" entries) a
dequantization scale. Payloads are raw little-endian bytes, so float32
round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContainerError

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "tensors.bin"
FORMAT_TAG = "adapts-weights-v1"

_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.int8:
        return "i8"
    raise ContainerError(f"unsupported tensor dtype {arr.dtype}; expected float32 or int8")


@dataclass
class Container:
    """In-memory view of a loaded weight container."""

    tensors: dict[str, np.ndarray]
    scales: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def require(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise ContainerError(f"missing tensor {name!r}")
        return self.tensors[name]


def save_container(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    scales: dict[str, float] | None = None,
    meta: dict | None = None,
) -> None:
    """Write tensors to `path` (created if needed). Names are stored sorted."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    scales = scales or {}

    entries: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        entry = {
            "shape": list(arr.shape),
            "dtype": tag,
            "byte_offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        if name in scales:
            entry["scale"] = float(scales[name])
        entries[name] = entry
        chunks.append(raw)
        offset += len(raw)

    manifest = {"format": FORMAT_TAG, "tensors": entries, "meta": meta or {}}
    (path / PAYLOAD_NAME).write_bytes(b"".join(chunks))
    with open(path / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_container(path: str | Path) -> Container:
    """Load and verify a container; raises ContainerError naming the offending tensor."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    payload_path = path / PAYLOAD_NAME
    if not manifest_path.is_file() or not payload_path.is_file():
        raise ContainerError(f"{path} is not a weight container (missing manifest or payload)")

    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_TAG:
        raise ContainerError(f"unknown container format {manifest.get('format')!r}")

    payload = payload_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    scales: dict[str, float] = {}
    for name, entry in manifest["tensors"].items():
        tag = entry["dtype"]
        if tag not in _DTYPES:
            raise ContainerError(f"tensor {name!r} has unknown dtype {tag!r}")
        start, nbytes = entry["byte_offset"], entry["nbytes"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise ContainerError(f"tensor {name!r} payload is truncated")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ContainerError(f"tensor {name!r} failed its checksum")
        arr = np.frombuffer(raw, dtype=_DTYPES[tag]).reshape(entry["shape"])
        tensors[name] = arr.astype(np.float32) if tag == "f32" else arr.copy()
        if "scale" in entry:
            scales[name] = float(entry["scale"])

    return Container(tensors=tensors, scales=scales, meta=manifest.get("meta", {}))


def payload_bytes(path: str | Path) -> int:
    return (Path(path) / PAYLOAD_NAME).stat().st_size

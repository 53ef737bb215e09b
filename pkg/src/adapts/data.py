"""Dataset ingestion (MVTec-style layout), image IO, and the procedural toy
dataset used for desk-scale end-to-end runs.

Layout per category::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

Normal test images live in ``test/good`` and carry implicit all-zero masks.
"""

from __future__ import annotations

import colorsys
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import DataError
from .synth import PerlinConfig, fractal_perlin, make_mask, synthesize_anomaly

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class TestItem:
    path: Path
    mask_path: Path | None  # None for normal images
    label: int  # 1 = anomalous
    defect_type: str


@dataclass
class CategoryData:
    name: str
    train_images: list[Path]
    test_items: list[TestItem]


@dataclass
class DatasetLayout:
    root: Path
    categories: list[CategoryData]

    def category_names(self) -> list[str]:
        return [c.name for c in self.categories]

    def category(self, name: str) -> CategoryData:
        for c in self.categories:
            if c.name == name:
                return c
        raise DataError(f"category {name!r} not in dataset (have {self.category_names()})")


def _image_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size[1], img.size[0]  # (H, W)


def scan_dataset(root: str | Path) -> DatasetLayout:
    """Validate the directory layout; file ordering is lexicographic throughout."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")

    categories = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        train_dir = cat_dir / "train" / "good"
        if not train_dir.is_dir():
            continue
        train_images = _image_files(train_dir)
        if not train_images:
            raise DataError(f"category {cat_dir.name!r} has an empty train/good split")

        test_items: list[TestItem] = []
        test_dir = cat_dir / "test"
        if test_dir.is_dir():
            for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
                defect = defect_dir.name
                for img_path in _image_files(defect_dir):
                    if defect == "good":
                        test_items.append(TestItem(img_path, None, 0, defect))
                        continue
                    mask_path = cat_dir / "ground_truth" / defect / f"{img_path.stem}_mask.png"
                    if not mask_path.is_file():
                        raise DataError(f"anomalous image {img_path} has no mask at {mask_path}")
                    if _image_size(mask_path) != _image_size(img_path):
                        raise DataError(
                            f"mask {mask_path} size {_image_size(mask_path)} does not match "
                            f"image size {_image_size(img_path)}"
                        )
                    test_items.append(TestItem(img_path, mask_path, 1, defect))
        categories.append(CategoryData(cat_dir.name, train_images, test_items))

    if not categories:
        raise DataError(f"no categories with a train/good split under {root}")
    return DatasetLayout(root=root, categories=categories)


def load_image(path: str | Path) -> np.ndarray:
    """8-bit image file to float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_image(image: np.ndarray | torch.Tensor, path: str | Path) -> None:
    arr = np.asarray(image.numpy() if isinstance(image, torch.Tensor) else image)
    arr = np.clip(arr, 0.0, 1.0)
    u8 = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="RGB").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Binary float32 (H, W) mask from an 8-bit grayscale PNG."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.float32)


def save_mask(mask: np.ndarray | torch.Tensor, path: str | Path) -> None:
    arr = np.asarray(mask.numpy() if isinstance(mask, torch.Tensor) else mask)
    u8 = (arr > 0.5).astype(np.uint8) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="L").save(path)


def save_heatmap_png(heatmap: np.ndarray, path: str | Path) -> None:
    """Min-max normalized 8-bit grayscale rendering of an anomaly map."""
    arr = np.asarray(heatmap, dtype=np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(norm * 255.0).astype(np.uint8), mode="L").save(path)


def save_heatmap_raw(heatmap: np.ndarray, path: str | Path, image_score: float | None = None) -> None:
    """Lossless float32 export of an anomaly map as a weight container."""
    from .container import save_container

    meta = {"kind": "heatmap"}
    if image_score is not None:
        meta["image_score"] = float(image_score)
    save_container(path, {"heatmap": np.asarray(heatmap, dtype=np.float32)}, meta=meta)


def load_heatmap_raw(path: str | Path) -> np.ndarray:
    from .container import load_container

    return load_container(path).require("heatmap")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary string/int parts (platform independent)."""
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


def _category_style(index: int, n_categories: int, seed: int) -> dict:
    """Per-category pattern parameters: orientation, frequency, two palette colors."""
    gen = torch.Generator().manual_seed(derive_seed(seed, "style", index))
    hue = index / n_categories
    color_a = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
    color_b = colorsys.hsv_to_rgb((hue + 0.15) % 1.0, 0.55, 0.45)
    return {
        "hue": hue,
        "theta": math.pi * index / n_categories + 0.1 * float(torch.rand(1, generator=gen)),
        "freq": 2.0 + 2.0 * index,
        "color_a": np.array(color_a, dtype=np.float32),
        "color_b": np.array(color_b, dtype=np.float32),
    }


def _toy_normal_image(style: dict, size: int, gen: torch.Generator) -> np.ndarray:
    phase1 = 2 * math.pi * float(torch.rand(1, generator=gen))
    phase2 = 2 * math.pi * float(torch.rand(1, generator=gen))
    freq = style["freq"] * (1.0 + 0.05 * (float(torch.rand(1, generator=gen)) - 0.5))
    theta = style["theta"]

    u = np.linspace(0.0, 1.0, size, endpoint=False, dtype=np.float32)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    axis1 = uu * math.cos(theta) + vv * math.sin(theta)
    axis2 = -uu * math.sin(theta) + vv * math.cos(theta)
    g1 = np.sin(2 * math.pi * freq * axis1 + phase1)
    g2 = np.sin(2 * math.pi * 0.5 * freq * axis2 + phase2)
    s = 0.5 + 0.35 * g1 + 0.15 * g2  # in [0, 1]

    img = style["color_a"][:, None, None] * (1.0 - s) + style["color_b"][:, None, None] * s
    noise = 0.01 * torch.randn(3, size, size, generator=gen).numpy()
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


def _toy_anomaly_texture(style: dict, size: int, gen: torch.Generator) -> torch.Tensor:
    """A foreign-looking texture: a color field whose hue sits roughly opposite
    the category palette, modulated by medium-frequency noise."""
    hue = (style["hue"] + 0.5 + 0.15 * (float(torch.rand(1, generator=gen)) - 0.5)) % 1.0
    base = np.array(colorsys.hsv_to_rgb(hue, 0.95, 0.95), dtype=np.float32)
    cfg = PerlinConfig(scale_range=(4, 8), rotation=False)
    grain = fractal_perlin(size, size, cfg, gen=gen).numpy()
    tex = base[:, None, None] * (0.35 + 0.65 * grain[None, :, :])
    return torch.from_numpy(np.clip(tex, 0.0, 1.0).astype(np.float32))


def make_toy_dataset(
    out_dir: str | Path,
    n_categories: int = 3,
    n_train: int = 40,
    n_test: int = 10,
    seed: int = 0,
    image_size: int = 64,
) -> DatasetLayout:
    """Procedural dataset: one distinct smooth pattern per category, plus
    Perlin-corrupted test anomalies with ground-truth masks."""
    if n_categories < 1 or n_train < 1 or n_test < 1:
        raise DataError("category and split counts must all be >= 1")
    out_dir = Path(out_dir)
    mask_cfg = PerlinConfig(scale_range=(2, 8), threshold=0.6, rotation=True)

    for c in range(n_categories):
        name = f"pattern{c:02d}"
        style = _category_style(c, n_categories, seed)
        cat_dir = out_dir / name

        for i in range(n_train):
            gen = torch.Generator().manual_seed(derive_seed(seed, name, "train", i))
            save_image(_toy_normal_image(style, image_size, gen), cat_dir / "train" / "good" / f"{i:03d}.png")

        for i in range(n_test):
            gen = torch.Generator().manual_seed(derive_seed(seed, name, "test_good", i))
            save_image(_toy_normal_image(style, image_size, gen), cat_dir / "test" / "good" / f"{i:03d}.png")

        for i in range(n_test):
            gen = torch.Generator().manual_seed(derive_seed(seed, name, "test_bad", i))
            normal = torch.from_numpy(_toy_normal_image(style, image_size, gen))
            mask = _draw_toy_mask(image_size, mask_cfg, gen)
            texture = _toy_anomaly_texture(style, image_size, gen)
            beta = 0.6 + 0.35 * float(torch.rand(1, generator=gen))
            sample = synthesize_anomaly(normal, texture, mask, beta)
            save_image(sample.image, cat_dir / "test" / "synthetic" / f"{i:03d}.png")
            save_mask(sample.mask, cat_dir / "ground_truth" / "synthetic" / f"{i:03d}_mask.png")

    return scan_dataset(out_dir)


def _draw_toy_mask(size: int, cfg: PerlinConfig, gen: torch.Generator) -> torch.Tensor:
    """Resample until the blob covers between 4% and 35% of the image."""
    for _ in range(50):
        noise_field = fractal_perlin(size, size, cfg, gen=gen)
        mask = make_mask(noise_field, cfg.threshold)
        if 0.04 <= mask.mean().item() <= 0.35:
            return mask
    raise DataError("failed to draw a toy anomaly mask within coverage bounds")

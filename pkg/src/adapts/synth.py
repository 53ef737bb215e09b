"""Synthetic anomalies for segmentation-guided training.

Fractal Perlin fields are thresholded into binary masks and a texture is
blended into the masked region of a normal image. The texture source is
either a directory of images or a heavily augmented copy of the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .exceptions import ConfigError, DataError, ShapeError


@dataclass(frozen=True)
class PerlinConfig:
    scale_range: tuple[int, int] = (2, 16)  # power-of-two lattice resolutions per axis
    octaves: int = 1
    persistence: float = 0.5
    threshold: float = 0.5
    beta_range: tuple[float, float] = (0.15, 1.0)
    rotation: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        for v in (lo, hi):
            if v < 1 or (v & (v - 1)) != 0:
                raise ConfigError(f"scale_range values must be powers of two, got {self.scale_range}")
        if lo > hi:
            raise ConfigError(f"scale_range must be increasing, got {self.scale_range}")
        if self.octaves < 1:
            raise ConfigError(f"octaves must be >= 1, got {self.octaves}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0,1), got {self.threshold}")
        b0, b1 = self.beta_range
        if not (0.0 < b0 <= b1 <= 1.0):
            raise ConfigError(f"beta_range must satisfy 0 < min <= max <= 1, got {self.beta_range}")


@dataclass
class SyntheticSample:
    image: Tensor  # (3, H, W) in [0, 1]
    mask: Tensor  # (H, W) binary


def _fade(t: Tensor) -> Tensor:
    return 6 * t**5 - 15 * t**4 + 10 * t**3


def perlin_noise(h: int, w: int, res: tuple[int, int], seed: int | torch.Generator) -> Tensor:
    """Classic 2D gradient noise on an (rh+1) x (rw+1) lattice of seeded unit
    gradients, quintic-smoothstep interpolated. Values lie in [-1, 1] and
    vanish at lattice points."""
    rh, rw = res
    if rh < 1 or rw < 1 or h % rh or w % rw:
        raise ConfigError(f"lattice resolution {res} must divide field size {(h, w)}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))

    dh, dw = h // rh, w // rw
    angles = 2 * math.pi * torch.rand(rh + 1, rw + 1, generator=gen)
    gradients = torch.stack((torch.cos(angles), torch.sin(angles)), dim=-1)

    ys = torch.arange(h, dtype=torch.float32) * rh / h
    xs = torch.arange(w, dtype=torch.float32) * rw / w
    grid = torch.stack(torch.meshgrid(ys % 1, xs % 1, indexing="ij"), dim=-1)

    def tile(gy: slice, gx: slice) -> Tensor:
        return gradients[gy, gx].repeat_interleave(dh, 0).repeat_interleave(dw, 1)

    def dot(grad: Tensor, shift: tuple[float, float]) -> Tensor:
        offs = torch.stack((grid[..., 0] + shift[0], grid[..., 1] + shift[1]), dim=-1)
        return (offs * grad).sum(dim=-1)

    n00 = dot(tile(slice(0, -1), slice(0, -1)), (0.0, 0.0))
    n10 = dot(tile(slice(1, None), slice(0, -1)), (-1.0, 0.0))
    n01 = dot(tile(slice(0, -1), slice(1, None)), (0.0, -1.0))
    n11 = dot(tile(slice(1, None), slice(1, None)), (-1.0, -1.0))

    t = _fade(grid)
    top = torch.lerp(n00, n10, t[..., 0])
    bottom = torch.lerp(n01, n11, t[..., 0])
    return math.sqrt(2.0) * torch.lerp(top, bottom, t[..., 1])


def fractal_perlin(
    h: int,
    w: int,
    cfg: PerlinConfig,
    base_res: tuple[int, int] | None = None,
    gen: torch.Generator | None = None,
) -> Tensor:
    """Octave sum of Perlin fields, min-max normalized to [0, 1]."""
    gen = gen if gen is not None else torch.Generator().manual_seed(cfg.seed)
    if base_res is None:
        base_res = (_sample_scale(cfg, gen), _sample_scale(cfg, gen))
    rh, rw = base_res
    top = 2 ** (cfg.octaves - 1)
    if rh * top > h or rw * top > w:
        raise ConfigError(f"octave resolution {(rh * top, rw * top)} exceeds field size {(h, w)}")

    total = torch.zeros(h, w)
    for o in range(cfg.octaves):
        total = total + (cfg.persistence**o) * perlin_noise(h, w, (rh * 2**o, rw * 2**o), gen)

    lo, hi = total.min(), total.max()
    if hi > lo:
        total = (total - lo) / (hi - lo)
    else:
        total = torch.zeros_like(total)
    if cfg.rotation:
        choices = (0, 1, 2, 3) if h == w else (0, 2)
        k = choices[int(torch.randint(len(choices), (1,), generator=gen))]
        total = torch.rot90(total, k)
    return total


def _sample_scale(cfg: PerlinConfig, gen: torch.Generator) -> int:
    lo, hi = cfg.scale_range
    exps = list(range(int(math.log2(lo)), int(math.log2(hi)) + 1))
    return 2 ** exps[int(torch.randint(len(exps), (1,), generator=gen))]


def make_mask(noise_field: Tensor, threshold: float) -> Tensor:
    """Binarize a normalized field; emptiness/coverage is the caller's contract."""
    return (noise_field > threshold).to(torch.float32)


def synthesize_anomaly(x: Tensor, texture: Tensor, mask: Tensor, beta: float) -> SyntheticSample:
    """Blend `texture` into `x` under `mask` with opacity beta; off-mask pixels
    are copied from `x` exactly."""
    if x.shape != texture.shape:
        raise ShapeError(f"image {tuple(x.shape)} and texture {tuple(texture.shape)} differ")
    if tuple(mask.shape) != tuple(x.shape[-2:]):
        raise ShapeError(f"mask {tuple(mask.shape)} does not match image {tuple(x.shape[-2:])}")
    m = mask.unsqueeze(0).to(x.dtype)
    blended = beta * texture + (1.0 - beta) * x
    image = torch.where(m > 0, blended, x).clamp(0.0, 1.0)
    return SyntheticSample(image=image, mask=mask.to(torch.float32))


def sample_texture(
    x: Tensor,
    gen: torch.Generator,
    texture_dir: str | Path | None = None,
    patch_grid: int = 4,
) -> Tensor:
    """Pick a texture: a seeded choice from `texture_dir` when configured,
    otherwise a color-jittered, patch-shuffled copy of the input."""
    if texture_dir is not None:
        from .data import load_image  # local import to avoid a cycle

        files = sorted(p for p in Path(texture_dir).iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise ConfigError(f"texture bank {texture_dir} contains no PNG images")
        idx = int(torch.randint(len(files), (1,), generator=gen))
        tex = torch.from_numpy(load_image(files[idx]))
        if tex.shape[-2:] != x.shape[-2:]:
            tex = torch.nn.functional.interpolate(
                tex.unsqueeze(0), size=x.shape[-2:], mode="bilinear", align_corners=False
            ).squeeze(0)
        return tex.clamp(0.0, 1.0)

    # Self-augmentation: per-channel affine jitter then a patch shuffle.
    scale = 0.5 + torch.rand(3, 1, 1, generator=gen)  # in [0.5, 1.5)
    offset = 0.5 * torch.rand(3, 1, 1, generator=gen) - 0.25
    tex = (x * scale + offset).clamp(0.0, 1.0)

    h, w = tex.shape[-2:]
    g = patch_grid
    while g > 1 and (h % g or w % g):
        g //= 2
    if g > 1:
        ph, pw = h // g, w // g
        patches = tex.reshape(3, g, ph, g, pw).permute(1, 3, 0, 2, 4).reshape(g * g, 3, ph, pw)
        perm = torch.randperm(g * g, generator=gen)
        patches = patches[perm]
        tex = patches.reshape(g, g, 3, ph, pw).permute(2, 0, 3, 1, 4).reshape(3, h, w)
    return tex


def random_anomaly(
    x: Tensor,
    cfg: PerlinConfig,
    gen: torch.Generator,
    texture_dir: str | Path | None = None,
    max_tries: int = 25,
) -> SyntheticSample:
    """End-to-end synthesis: fractal field, mask (resampled until non-empty and
    covering at most 90% of pixels), texture, blend."""
    h, w = x.shape[-2:]
    mask = None
    for _ in range(max_tries):
        noise_field = fractal_perlin(h, w, cfg, gen=gen)
        candidate = make_mask(noise_field, cfg.threshold)
        cover = candidate.mean().item()
        if 0.0 < cover <= 0.9:
            mask = candidate
            break
    if mask is None:
        raise DataError(f"could not draw a valid anomaly mask in {max_tries} tries")
    b0, b1 = cfg.beta_range
    beta = b0 + (b1 - b0) * float(torch.rand(1, generator=gen))
    texture = sample_texture(x, gen, texture_dir=texture_dir)
    return synthesize_anomaly(x, texture, mask, beta)

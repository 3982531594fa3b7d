"""Image sources: folder ingestion, random crops and a synthetic texture generator.

Pixels are float32 in [0, 1], shaped (H, W, 3).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")

# block kinds emitted by synth_texture
CONSTANT, GRADIENT, NOISE_LOW, NOISE_HIGH = 0, 1, 2, 3
BLOCK_KINDS = (CONSTANT, GRADIENT, NOISE_LOW, NOISE_HIGH)
NOISE_SIGMA = {NOISE_LOW: 0.05, NOISE_HIGH: 0.3}


class IngestError(RuntimeError):
    pass


class DatasetSpecError(ValueError):
    pass


@dataclass
class SourceImage:
    pixels: np.ndarray
    id: str
    # (H/block, W/block) map of block kinds, only set for synthetic images
    blocks: Optional[np.ndarray] = field(default=None, repr=False)
    block_size: int = 8

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {p.shape}")
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError(f"pixels of {self.id!r} outside [0, 1]")
        self.pixels = p

    @property
    def shape(self):
        return self.pixels.shape

    def check_divisible(self, factor: int) -> None:
        h, w, _ = self.pixels.shape
        if h % factor or w % factor:
            raise ValueError(f"image {self.id!r} of size {h}x{w} not divisible by {factor}")


@dataclass
class DatasetSpec:
    kind: str = "synthetic-gauss-texture"
    crop: int = 32
    seed: int = 0
    count: int = 100
    path: Optional[str] = None
    # total downsampling of the analysis transform (2 ** stages)
    factor: int = 4

    def validate(self) -> None:
        if self.kind not in ("image-folder", "synthetic-gauss-texture"):
            raise DatasetSpecError(f"unknown dataset kind {self.kind!r}")
        if self.crop < self.factor:
            raise DatasetSpecError(f"crop {self.crop} smaller than downsample factor {self.factor}")
        if self.crop % self.factor:
            raise DatasetSpecError(f"crop {self.crop} not divisible by downsample factor {self.factor}")
        if self.kind == "synthetic-gauss-texture" and self.crop % 8:
            raise DatasetSpecError(f"synthetic crop {self.crop} must be a multiple of the 8-pixel block")
        if self.count < 0:
            raise DatasetSpecError("count must be non-negative")
        if self.kind == "image-folder":
            if not self.path or not os.path.isdir(self.path):
                raise DatasetSpecError(f"image folder {self.path!r} does not exist")


def read_image(path: str) -> np.ndarray:
    """Read a PNG or binary PPM file into float32 [0, 1] HxWx3."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise IngestError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def synth_texture(seed: int, size: int, factor: int = 4, block: int = 8) -> SourceImage:
    """Tile an image with 8x8 blocks of constant colour, linear gradients or clipped noise.

    Each block independently draws its kind uniformly from ``BLOCK_KINDS``.
    """
    if size % factor or size % block or size <= 0:
        raise ValueError(f"size {size} must be a positive multiple of {factor} and of the {block}-pixel block")
    rng = np.random.default_rng(seed)
    nb = size // block
    img = np.empty((size, size, 3), dtype=np.float64)
    kinds = rng.integers(0, len(BLOCK_KINDS), size=(nb, nb))
    ramp = (np.arange(block) + 0.5) / block - 0.5
    for bi in range(nb):
        for bj in range(nb):
            kind = kinds[bi, bj]
            base = rng.uniform(0.15, 0.85, size=3)
            if kind == CONSTANT:
                patch = np.broadcast_to(base, (block, block, 3))
            elif kind == GRADIENT:
                angle = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.2, 0.6, size=3)
                t = np.cos(angle) * ramp[:, None] + np.sin(angle) * ramp[None, :]
                patch = base + t[..., None] * amp
            else:
                sigma = NOISE_SIGMA[kind]
                patch = base + rng.normal(0.0, sigma, size=(block, block, 3))
            img[bi * block:(bi + 1) * block, bj * block:(bj + 1) * block] = patch
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SourceImage(img, id=f"synth-{seed}-{size}", blocks=kinds.astype(np.int8), block_size=block)


def _random_crop(pixels: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = pixels.shape
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return pixels[top:top + crop, left:left + crop]


def load_dataset(spec: DatasetSpec) -> Iterator[SourceImage]:
    """Yield images described by ``spec``; the stream is a pure function of the spec.

    For folders, each file in sorted order contributes one random crop, cycling
    through the folder until ``count`` images were emitted (``count=0`` means
    one pass). Images smaller than the crop are skipped and counted.
    """
    spec.validate()
    if spec.kind == "synthetic-gauss-texture":
        seeds = np.random.SeedSequence(spec.seed).generate_state(spec.count, dtype=np.uint32)
        for s in seeds:
            yield synth_texture(int(s), spec.crop, factor=spec.factor)
        return

    files = sorted(
        os.path.join(spec.path, f) for f in os.listdir(spec.path)
        if f.lower().endswith(IMAGE_SUFFIXES)
    )
    if not files:
        raise IngestError(f"no PNG/PPM images in {spec.path}")
    rng = np.random.default_rng(spec.seed)
    target = spec.count or len(files)
    emitted = skipped = 0
    usable = len(files)
    while emitted < target and usable:
        usable = 0
        for path in files:
            if emitted >= target:
                break
            pixels = read_image(path)
            if pixels.shape[0] < spec.crop or pixels.shape[1] < spec.crop:
                skipped += 1
                continue
            usable += 1
            crop = _random_crop(pixels, spec.crop, rng)
            yield SourceImage(np.ascontiguousarray(crop), id=f"{os.path.basename(path)}#{emitted}")
            emitted += 1
    if skipped:
        log.warning("skipped %d image reads smaller than crop %d", skipped, spec.crop)


def to_batch(images) -> "np.ndarray":
    """Stack SourceImages into an (N, H, W, 3) float32 array."""
    return np.stack([im.pixels for im in images]).astype(np.float32)

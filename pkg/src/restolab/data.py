"""Image I/O, synthetic clean-image generation, paired-task layout, and
seeded patch sampling.

Images travel as float arrays shaped [3, H, W] with values in [0, 1].
On disk they are 8-bit PNG or binary PPM; conversion is value/255.

A paired task directory looks like

    task/
      clean/     a.png b.png ...
      degraded/  a.png b.png ...   (same filenames)
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .degrade import (DegradationRecipe, SamplerConfig, apply_recipe,
                      max_sampled_kernel, sample_recipe, write_manifest)

IMAGE_SUFFIXES = (".png", ".ppm")


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM into a [3, H, W] float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1)).copy()


def save_image(img: np.ndarray, path) -> None:
    """Write a [3, H, W] float array in [0, 1] as 8-bit PNG or PPM (by suffix)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"unsupported image suffix: {path.suffix!r}")
    quant = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255)
    hwc = np.transpose(quant.astype(np.uint8), (1, 2, 0))
    Image.fromarray(hwc, mode="RGB").save(path)


def _soft_mask(dist: np.ndarray, edge: float) -> np.ndarray:
    # smoothstep on signed distance; edge controls the blur width in pixels
    t = np.clip(0.5 - dist / max(edge, 1e-6), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def synth_clean_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One synthetic clean image: smooth color ramps plus soft-edged shapes.

    Gives the restorer actual structure to preserve (gradients, edges,
    corners) without shipping a photo corpus.
    """
    if size < 8:
        raise ValueError("size must be >= 8")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        gx, gy = rng.uniform(-1, 1, size=2)
        img[c] = 0.5 + 0.3 * (gx * (xx - 0.5) + gy * (yy - 0.5))
    # large soft blobs tint regions; shared geometry, per-channel color
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.15, 0.45) * size
        dist = np.sqrt((xx * size - cx * size) ** 2 + (yy * size - cy * size) ** 2) - radius
        mask = _soft_mask(dist, edge=0.25 * radius)
        color = rng.uniform(0.0, 1.0, size=3)
        for c in range(3):
            img[c] = img[c] * (1 - 0.6 * mask) + color[c] * 0.6 * mask
    # crisp-ish rectangles supply edges and corners
    for _ in range(rng.integers(1, 4)):
        x0, y0 = rng.uniform(0.05, 0.7, size=2) * size
        w, h = rng.uniform(0.1, 0.35, size=2) * size
        dx = np.maximum(x0 - xx * size, xx * size - (x0 + w))
        dy = np.maximum(y0 - yy * size, yy * size - (y0 + h))
        dist = np.maximum(dx, dy)
        mask = _soft_mask(dist, edge=rng.uniform(1.0, 2.5))
        color = rng.uniform(0.0, 1.0, size=3)
        for c in range(3):
            img[c] = img[c] * (1 - mask) + color[c] * mask
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image generator; (seed, index) keyed so parallel == sequential."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def make_clean_corpus(out_dir, count: int, size: int = 64, seed: int = 0,
                      threads: int = 1) -> list[Path]:
    """Write `count` synthetic clean PNGs into out_dir. Returns the paths."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i: int) -> Path:
        img = synth_clean_image(image_rng(seed, i), size=size)
        path = out_dir / f"clean_{i:04d}.png"
        save_image(img, path)
        return path

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(count)))
    return [one(i) for i in range(count)]


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def degrade_corpus(input_dir, output_dir, config: SamplerConfig, seed: int = 0,
                   count: int | None = None, threads: int = 1) -> list[dict]:
    """Degrade images from input_dir into output_dir with freshly sampled
    recipes, one per image. Writes output_dir/manifest.jsonl and returns the
    manifest records ({"file", "source", "recipe"}).
    """
    sources = list_images(input_dir)
    if not sources:
        raise ValueError(f"no images in {input_dir}")
    if count is not None:
        if count < 1:
            raise ValueError("count must be >= 1")
        sources = sources[:count]
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    def one(item) -> dict:
        i, src = item
        recipe = sample_recipe(image_rng(seed, i), config)
        save_image(apply_recipe(load_image(src), recipe), output_dir / src.name)
        return {"file": src.name, "source": str(src), "recipe": recipe.to_dict()}

    items = list(enumerate(sources))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, items))
    else:
        records = [one(it) for it in items]
    write_manifest(records, output_dir / "manifest.jsonl")
    return records


def make_task_pairs(task_dir, count: int, config: SamplerConfig, size: int = 64,
                    seed: int = 0, threads: int = 1) -> None:
    """Build a paired task directory: synthetic clean images in task/clean,
    recipe-degraded twins in task/degraded."""
    task_dir = Path(task_dir)
    # reject impossible size/kernel combinations before writing anything,
    # instead of leaving a partial tree when a late image draws a big kernel
    kmax = max_sampled_kernel(config)
    if kmax > size:
        raise ValueError(
            f"size {size} cannot fit sampled kernels up to {kmax}; "
            f"raise size or cap kernel_size in the sampler overrides")
    make_clean_corpus(task_dir / "clean", count, size=size, seed=seed, threads=threads)
    degrade_corpus(task_dir / "clean", task_dir / "degraded", config,
                   seed=seed + 1, threads=threads)


def list_pairs(task_dir) -> list[tuple[Path, Path]]:
    """(degraded, clean) path pairs matched by filename."""
    task_dir = Path(task_dir)
    clean = {p.name: p for p in list_images(task_dir / "clean")}
    degraded = list_images(task_dir / "degraded")
    pairs = []
    for d in degraded:
        if d.name not in clean:
            raise ValueError(f"degraded image {d.name} has no clean twin")
        pairs.append((d, clean[d.name]))
    if not pairs:
        raise ValueError(f"no image pairs under {task_dir}")
    return pairs


def load_pairs(task_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for d, c in list_pairs(task_dir):
        degraded, clean = load_image(d), load_image(c)
        if degraded.shape != clean.shape:
            raise ValueError(f"pair {d.name}: degraded {degraded.shape} "
                             f"vs clean {clean.shape}")
        out.append((degraded, clean))
    return out


def random_patch_coords(rng: np.random.Generator, shape: tuple, patch: int) -> tuple[int, int]:
    _, h, w = shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image {h}x{w}")
    return int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))


def crop(img: np.ndarray, top: int, left: int, patch: int) -> np.ndarray:
    return img[:, top:top + patch, left:left + patch]


def augment(img: np.ndarray, flip: bool, quarter_turns: int) -> np.ndarray:
    """Horizontal flip then k*90-degree rotation over the spatial axes."""
    if flip:
        img = img[:, :, ::-1]
    k = quarter_turns % 4
    if k:
        img = np.rot90(img, k=k, axes=(1, 2))
    return np.ascontiguousarray(img)


def sample_augmentation(rng: np.random.Generator) -> tuple[bool, int]:
    return bool(rng.integers(0, 2)), int(rng.integers(0, 4))

"""Tiny synthetic dataset and config for smoke runs on the toy backbone."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .compositor import CompositeSpec, composite
from .config import RunConfig, config_from_dict
from .data import Sample

TOY_CLASSES = ["clean", "ghosting", "lens_flare", "moire"]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.normal(size=(size, size, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(size / 6, size / 6, 0))
    smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-9)
    return 0.25 + 0.4 * smooth


def _flare(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size] / size
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    glow = np.exp(-r2 / 0.08)
    tint = np.array([1.0, 0.9, 0.6])
    return np.clip(glow[..., None] * tint + 0.15, 0, 1)


def _moire(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size].astype(float)
    theta = rng.uniform(0, np.pi)
    f = rng.uniform(0.9, 1.3)
    wave = 0.5 + 0.5 * np.sin(f * (xx * np.cos(theta) + yy * np.sin(theta)))
    return np.stack([wave, 1 - wave, 0.5 * wave + 0.25], axis=-1)


def _ghost(region: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    shift = rng.integers(2, 5, size=2)
    echo = np.roll(region, tuple(shift), axis=(0, 1))
    return np.clip(0.5 * region + 0.5 * (1.0 - echo), 0, 1)


def make_toy_dataset(per_class: int = 3, size: int = 32, patch: int = 16, seed: int = 0,
                     object_name: str = "object") -> list[Sample]:
    """``per_class`` samples of each class, artifacts filling one patch-aligned cell."""
    rng = np.random.default_rng(seed)
    cells = size // patch
    out = []
    for class_id in range(len(TOY_CLASSES)):
        for j in range(per_class):
            image = _background(rng, size)
            mask = np.zeros((size, size), dtype=bool)
            phi = None
            if class_id:
                r, c = rng.integers(cells, size=2) * patch
                mask[r:r + patch, c:c + patch] = True
                if class_id == 1:
                    image[mask] = _ghost(image[r:r + patch, c:c + patch], rng).reshape(-1, 3)
                else:
                    pattern = np.zeros_like(image)
                    gen = _flare if class_id == 2 else _moire
                    pattern[r:r + patch, c:c + patch] = gen(patch, rng)
                    phi = float(rng.uniform(0.6, 0.95) if class_id == 2 else rng.uniform(0.5, 0.8))
                    image = composite(CompositeSpec(image, pattern, mask, phi))
            out.append(Sample(image=image, mask=mask, class_id=class_id,
                              origin="clean" if class_id == 0 else "synthetic",
                              image_path=f"toy/{TOY_CLASSES[class_id]}_{j}.png",
                              id=f"toy-{class_id}-{j}", object_name=object_name, phi=phi))
    return out


def toy_config(**overrides) -> RunConfig:
    """RunConfig wired to the 4-layer toy backbone at 32x32 input."""
    base = {
        "class_names": TOY_CLASSES,
        "artifact_names": ["ghosting", "lens flare", "moire"],
        "input_size": 32,
        "backbone": {"kind": "toy", "layers": 4, "width": 16, "embed_dim": 8, "patch_size": 16,
                     "heads": 2, "seed": 0, "context_length": 32},
        "taps": [1, 2, 3, 4],
        "adapter_layers": 2,
        "prompt_length": 4,
        "deep_prompt_J": 2,
        "deep_prompt_depth": 3,
        "batch_size": 4,
        "epochs": {"I": 30, "II": 30, "III": 30},
    }
    base.update(overrides)
    return config_from_dict(base)

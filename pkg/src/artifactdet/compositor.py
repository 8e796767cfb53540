"""Pattern-based synthesis of flare / moire artifact images.

A pattern N is blended into a clean image only inside a placement mask M:

    I = I_gt * (1 - M) + ((1 - phi) * I_gt + phi * N) * M

Ghosting is not synthesized here; ghosting samples enter through manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from .data import DataValidationError, Sample, read_image, validate_sample

TAU_SUPPORT = 0.05
DEFAULT_BLEND_RANGES = {2: (0.6, 0.95), 3: (0.3, 0.8)}  # lens_flare, moire
_LUMA = np.array([0.299, 0.587, 0.114])


def luminance(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) @ _LUMA


@dataclass
class PatternBank:
    patterns: list[tuple[np.ndarray, int]]
    blend_ranges: dict[int, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_BLEND_RANGES))
    num_artifacts: int = 3

    def __post_init__(self):
        for pat, cid in self.patterns:
            if not 1 <= cid <= self.num_artifacts:
                raise DataValidationError(f"pattern class id {cid} outside 1..{self.num_artifacts}")
            if pat.ndim != 3 or pat.shape[2] != 3 or pat.size == 0:
                raise DataValidationError(f"pattern must be a nonempty hxwx3 array, got {pat.shape}")
        for cid, (lo, hi) in self.blend_ranges.items():
            if not 0.0 < lo <= hi < 1.0:
                raise DataValidationError(f"blend range for class {cid} must satisfy 0<lo<=hi<1, got {(lo, hi)}")

    def for_class(self, class_id: int) -> list[np.ndarray]:
        return [p for p, c in self.patterns if c == class_id]

    def blend_range(self, class_id: int) -> tuple[float, float]:
        return self.blend_ranges.get(class_id, (0.3, 0.9))


def load_pattern_bank(directory: str | Path, class_names) -> PatternBank:
    """Read ``<dir>/<class_name>/*.png`` plus an optional ``bank.yaml``.

    ``bank.yaml`` maps class names to ``[phi_min, phi_max]``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataValidationError(f"pattern directory not found: {directory}")
    name_to_id = {n: i for i, n in enumerate(class_names)}
    ranges = dict(DEFAULT_BLEND_RANGES)
    cfg_path = directory / "bank.yaml"
    if cfg_path.exists():
        cfg = yaml.safe_load(cfg_path.read_text()) or {}
        for name, rng in (cfg.get("blend_ranges") or cfg).items():
            if name not in name_to_id:
                raise DataValidationError(f"bank.yaml: unknown class {name!r}")
            ranges[name_to_id[name]] = (float(rng[0]), float(rng[1]))
    patterns = []
    for name, cid in name_to_id.items():
        sub = directory / name
        if cid == 0 or not sub.is_dir():
            continue
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() in (".png", ".jpg", ".jpeg"):
                patterns.append((read_image(f), cid))
    return PatternBank(patterns, ranges, num_artifacts=len(class_names) - 1)


@dataclass
class CompositeSpec:
    clean: np.ndarray
    pattern: np.ndarray
    mask: np.ndarray
    phi: float


def composite(spec: CompositeSpec) -> np.ndarray:
    clean = np.asarray(spec.clean, dtype=np.float64)
    pattern = np.asarray(spec.pattern, dtype=np.float64)
    mask = np.asarray(spec.mask).astype(bool)
    if clean.shape != pattern.shape or clean.shape[:2] != mask.shape or clean.ndim != 3:
        raise ValueError(
            f"shape mismatch: clean {clean.shape}, pattern {pattern.shape}, mask {mask.shape}")
    phi = float(spec.phi)
    if not 0.0 < phi < 1.0:
        raise ValueError(f"phi must lie in (0, 1), got {phi}")
    blended = (1.0 - phi) * clean + phi * pattern
    # np.where keeps unmasked pixels bit-identical to the clean image
    return np.where(mask[..., None], blended, clean)


def _support_centroid(pattern: np.ndarray, tau: float) -> np.ndarray:
    support = luminance(pattern) > tau
    if not support.any():
        support = np.ones(pattern.shape[:2], dtype=bool)
    rows, cols = np.nonzero(support)
    return np.array([rows.mean(), cols.mean()])


def place_pattern(pattern: np.ndarray, anchor_mask: np.ndarray, target: tuple[int, int],
                  rng: np.random.Generator, *, extent: float = 1.0, min_size: int = 8,
                  jitter: float = 0.25, tau: float = TAU_SUPPORT) -> tuple[np.ndarray, np.ndarray]:
    """Scale and translate ``pattern`` onto an H x W canvas around the anchor region.

    The pattern's longer side is scaled to ``extent`` times the anchor
    bounding box's longer side (never below ``min_size`` pixels nor above the
    canvas), then shifted so its support centroid sits on the anchor
    centroid plus a uniform jitter of up to ``jitter`` half-extents of the
    bounding box. Returns (placed pattern, placement mask).
    """
    pattern = np.asarray(pattern, dtype=np.float64)
    anchor = np.asarray(anchor_mask).astype(bool)
    H, W = target
    if anchor.shape != (H, W):
        raise ValueError(f"anchor mask shape {anchor.shape} != target {(H, W)}")
    if not anchor.any():
        raise DataValidationError("empty anchor mask")
    if pattern.ndim != 3 or pattern.size == 0:
        raise ValueError("pattern must be a nonempty hxwx3 array")

    rows, cols = np.nonzero(anchor)
    box_h = rows.max() - rows.min() + 1
    box_w = cols.max() - cols.min() + 1
    h, w = pattern.shape[:2]
    side = float(np.clip(extent * max(box_h, box_w), min_size, max(H, W)))
    scale = side / max(h, w)
    if abs(scale - 1.0) > 1e-12:
        pattern = ndimage.zoom(pattern, (scale, scale, 1), order=1, mode="nearest", grid_mode=True)
        pattern = np.clip(pattern, 0.0, 1.0)

    center = np.array([rows.mean(), cols.mean()])
    half = np.array([box_h, box_w]) / 2.0
    center = center + rng.uniform(-1.0, 1.0, size=2) * jitter * half
    shift = np.rint(center - _support_centroid(pattern, tau)).astype(int)

    placed = np.zeros((H, W, 3))
    ph, pw = pattern.shape[:2]
    r0, c0 = shift
    dst_r = slice(max(r0, 0), min(r0 + ph, H))
    dst_c = slice(max(c0, 0), min(c0 + pw, W))
    if dst_r.start < dst_r.stop and dst_c.start < dst_c.stop:
        src_r = slice(dst_r.start - r0, dst_r.stop - r0)
        src_c = slice(dst_c.start - c0, dst_c.stop - c0)
        placed[dst_r, dst_c] = pattern[src_r, src_c]
    return placed, luminance(placed) > tau


def synthesize_sample(clean: Sample, bank: PatternBank, class_id: int, anchor_mask: np.ndarray,
                      rng: np.random.Generator, **placement) -> Sample:
    """Draw a pattern and a blend factor for ``class_id`` and composite it into ``clean``.

    The blend factor is recorded on the returned sample as ``phi``.
    """
    if clean.class_id != 0:
        raise DataValidationError("synthesis requires a clean (class 0) source sample")
    problems = validate_sample(clean)
    if problems:
        raise DataValidationError(f"invalid clean sample: {problems}")
    if not 1 <= class_id <= bank.num_artifacts:
        raise DataValidationError(f"class_id {class_id} is not an artifact class")
    candidates = bank.for_class(class_id)
    if not candidates:
        raise DataValidationError(f"pattern bank has no pattern for class {class_id}")

    pattern = candidates[int(rng.integers(len(candidates)))]
    lo, hi = bank.blend_range(class_id)
    phi = float(rng.uniform(lo, hi))
    H, W = clean.image.shape[:2]
    placed, mask = place_pattern(pattern, anchor_mask, (H, W), rng, **placement)
    if not mask.any():
        raise DataValidationError("placed pattern has empty support; pattern too dim for tau_support")
    image = composite(CompositeSpec(clean.image, placed, mask, phi))
    return Sample(image=image, mask=mask, class_id=class_id, origin="synthetic",
                  object_name=clean.object_name, phi=phi)

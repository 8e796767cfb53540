"""Samples, masks, class tables and dataset manifests.

Images live on disk as 8-bit RGB and are converted to [0, 1] floats when
read. Masks are single-channel 8-bit PNGs with 0/255 semantics, thresholded
at 128.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

DEFAULT_CLASS_NAMES = ("clean", "ghosting", "lens_flare", "moire")
ORIGINS = ("real", "synthetic", "clean")
SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 128


class DataValidationError(ValueError):
    """A record or sample breaks one of the dataset invariants."""


@dataclass(frozen=True)
class ArtifactClass:
    id: int
    name: str


def class_table(names: Sequence[str] = DEFAULT_CLASS_NAMES) -> tuple[ArtifactClass, ...]:
    if not names or names[0] != "clean":
        raise DataValidationError("class 0 must be named 'clean'")
    if len(set(names)) != len(names):
        raise DataValidationError(f"class names must be unique: {list(names)}")
    return tuple(ArtifactClass(i, n) for i, n in enumerate(names))


@dataclass
class Sample:
    """One loaded image with its label and mask."""

    image: np.ndarray  # H x W x 3, float in [0, 1]
    mask: np.ndarray  # H x W, bool
    class_id: int
    origin: str = "synthetic"
    image_path: str = ""
    mask_path: str | None = None
    id: str = ""
    object_name: str | None = None
    phi: float | None = None


@dataclass(frozen=True)
class SampleRecord:
    """Manifest entry: a sample referenced by path, not yet loaded."""

    id: str
    image_path: str
    class_id: int
    origin: str
    mask_path: str | None = None
    split: str | None = None
    phi: float | None = None
    object_name: str | None = None

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "class_id": self.class_id,
            "origin": self.origin,
            "split": self.split,
        }
        if self.phi is not None:
            out["phi"] = self.phi
        if self.object_name is not None:
            out["object_name"] = self.object_name
        return out


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[SampleRecord, ...]
    classes: tuple[ArtifactClass, ...] = field(default_factory=class_table)
    root: Path = Path(".")

    @property
    def split_assignments(self) -> dict[str, str | None]:
        return {s.id: s.split for s in self.samples}

    def class_histogram(self) -> dict[str, int]:
        counts = Counter(s.class_id for s in self.samples)
        return {c.name: counts.get(c.id, 0) for c in self.classes}

    def subset(self, split: str | None = None, origins: Iterable[str] | None = None,
               class_ids: Iterable[int] | None = None) -> "DatasetManifest":
        keep = list(self.samples)
        if split is not None:
            keep = [s for s in keep if s.split == split]
        if origins is not None:
            allowed = set(origins)
            keep = [s for s in keep if s.origin in allowed]
        if class_ids is not None:
            ids = set(class_ids)
            keep = [s for s in keep if s.class_id in ids]
        return replace(self, samples=tuple(keep))

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_sample(self, record: SampleRecord) -> Sample:
        image = read_image(self.resolve(record.image_path))
        if record.mask_path:
            mask = read_mask(self.resolve(record.mask_path))
        else:
            mask = np.zeros(image.shape[:2], dtype=bool)
        return Sample(
            image=image,
            mask=mask,
            class_id=record.class_id,
            origin=record.origin,
            image_path=record.image_path,
            mask_path=record.mask_path,
            id=record.id,
            object_name=record.object_name,
            phi=record.phi,
        )

    def __len__(self) -> int:
        return len(self.samples)


def sample_id(image_path: str) -> str:
    """Content-addressed id: hash of the (manifest-relative) image path."""
    return hashlib.sha1(str(image_path).encode("utf-8")).hexdigest()[:16]


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr >= MASK_THRESHOLD


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def validate_sample(sample: Sample, num_classes: int | None = None) -> list[str]:
    """Return every violated sample invariant; an empty list means ok."""
    problems = []
    image = np.asarray(sample.image)
    mask = np.asarray(sample.mask)
    if image.ndim != 3 or image.shape[2] != 3:
        problems.append(f"image must be HxWx3, got shape {image.shape}")
    elif image.size and (np.nanmin(image) < 0.0 or np.nanmax(image) > 1.0 or np.isnan(image).any()):
        problems.append("image values outside [0, 1]")
    if mask.ndim != 2:
        problems.append(f"mask must be HxW, got shape {mask.shape}")
    elif image.ndim >= 2 and mask.shape != image.shape[:2]:
        problems.append(f"mask/image shape mismatch: {mask.shape} vs {image.shape[:2]}")
    if mask.dtype != bool and mask.size and not np.isin(mask, (0, 1)).all():
        problems.append("mask is not binary")
    if num_classes is not None and not 0 <= sample.class_id < num_classes:
        problems.append(f"class_id {sample.class_id} out of range 0..{num_classes - 1}")
    if sample.origin not in ORIGINS:
        problems.append(f"unknown origin {sample.origin!r}")
    positive = bool(np.any(mask)) if mask.size else False
    if sample.class_id == 0 and positive:
        problems.append("clean sample with nonzero mask")
    if sample.class_id != 0 and not positive:
        problems.append("artifact sample with empty mask")
    return problems


def _parse_record(obj: Mapping, lineno: int) -> SampleRecord:
    missing = [k for k in ("image_path", "class_id", "origin") if k not in obj]
    if missing:
        raise DataValidationError(f"line {lineno}: missing keys {missing}")
    image_path = str(obj["image_path"])
    try:
        class_id = int(obj["class_id"])
    except (TypeError, ValueError):
        raise DataValidationError(f"line {lineno}: class_id must be an integer") from None
    split = obj.get("split")
    if split is not None and split not in SPLITS:
        raise DataValidationError(f"line {lineno}: unknown split {split!r}")
    phi = obj.get("phi")
    return SampleRecord(
        id=str(obj.get("id") or sample_id(image_path)),
        image_path=image_path,
        mask_path=obj.get("mask_path") or None,
        class_id=class_id,
        origin=str(obj["origin"]),
        split=split,
        phi=None if phi is None else float(phi),
        object_name=obj.get("object_name"),
    )


def _check_record(manifest: DatasetManifest, record: SampleRecord) -> str | None:
    img = manifest.resolve(record.image_path)
    if not img.exists():
        return f"image file not found: {img}"
    if record.mask_path and not manifest.resolve(record.mask_path).exists():
        return f"mask file not found: {manifest.resolve(record.mask_path)}"
    if record.class_id != 0 and not record.mask_path:
        return "artifact sample without mask_path"
    try:
        sample = manifest.load_sample(record)
    except Exception as exc:  # unreadable / corrupt file
        return f"cannot read sample: {exc}"
    problems = validate_sample(sample, num_classes=len(manifest.classes))
    return "; ".join(problems) or None


def load_manifest(path: str | Path, class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
                  workers: int = 4) -> DatasetManifest:
    """Read and fully validate a line-delimited JSON manifest.

    Every referenced file is opened and checked, so a returned manifest is
    guaranteed to satisfy all sample invariants. Paths are resolved relative
    to the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"line {lineno}: malformed record ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataValidationError(f"line {lineno}: record must be an object")
        records.append(_parse_record(obj, lineno))

    ids = Counter(r.id for r in records)
    dupes = [i for i, n in ids.items() if n > 1]
    if dupes:
        raise DataValidationError(f"duplicate sample ids: {dupes[:5]}")

    manifest = DatasetManifest(tuple(records), class_table(class_names), path.parent)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda r: _check_record(manifest, r), records))
    errors = [f"sample {r.id} ({r.image_path}): {msg}" for r, msg in zip(records, results) if msg]
    if errors:
        raise DataValidationError("invalid manifest:\n  " + "\n  ".join(errors))
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write records as JSON lines; paths are stored as given (relative to the manifest dir)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in manifest.samples:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    return path


def _target_counts(n: int, ratios: Sequence[float]) -> list[int]:
    # largest remainder, then at least one per active split when possible
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    active = [i for i, r in enumerate(ratios) if r > 0]
    for i in active:
        if counts[i] == 0:
            donor = max(active, key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> DatasetManifest:
    """Stratified, deterministic train/val/test assignment.

    Counts are fixed per class; within a class the origins are laid out in
    contiguous shuffled blocks and splits are dealt by largest running
    deficit, so each origin is spread proportionally too.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DataValidationError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    n_active = sum(r > 0 for r in ratios)

    rng = np.random.default_rng(seed)
    by_class: dict[int, list[SampleRecord]] = {}
    for rec in sorted(manifest.samples, key=lambda r: r.id):
        by_class.setdefault(rec.class_id, []).append(rec)

    assignment: dict[str, str] = {}
    for class_id in sorted(by_class):
        recs = by_class[class_id]
        if len(recs) < n_active:
            raise DataValidationError(
                f"class {class_id} has {len(recs)} samples, fewer than {n_active} splits")
        ordered = []
        for origin in sorted({r.origin for r in recs}):
            block = [r for r in recs if r.origin == origin]
            ordered.extend(block[i] for i in rng.permutation(len(block)))
        targets = _target_counts(len(ordered), ratios)
        given = [0, 0, 0]
        n = len(ordered)
        for pos, rec in enumerate(ordered, start=1):
            deficits = [targets[s] * pos / n - given[s] if given[s] < targets[s] else -np.inf
                        for s in range(3)]
            s = int(np.argmax(deficits))
            given[s] += 1
            assignment[rec.id] = SPLITS[s]

    samples = tuple(replace(r, split=assignment[r.id]) for r in manifest.samples)
    return replace(manifest, samples=samples)

"""Three-stage training schedule, stage runner and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from .backbone import DualEncoder
from .config import STAGES, RunConfig, config_from_dict, dump_config
from .data import DataValidationError, DatasetManifest, Sample
from .metrics import f1_max
from .model import PARAMETER_GROUPS, ArtifactDetector, MissingAnchorsError, build_backbone
from .prompts import AnchorSet

log = logging.getLogger(__name__)

STAGE_GROUPS = {
    "I": frozenset({"adapters", "projectors", "cls_head", "seg_head"}),
    "II": frozenset({"prompt_embeddings", "injection_tokens"}),
    "III": frozenset({"adapters", "projectors"}),
}
STAGE_MODES = {"I": "heads", "II": "anchors_live", "III": "anchors"}
CHECKPOINT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.pt"


class StageError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


def trainable_parameters(stage: str) -> frozenset[str]:
    if stage not in STAGE_GROUPS:
        raise StageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return STAGE_GROUPS[stage]


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 8
    trainable_groups: frozenset[str] | None = None
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        expected = trainable_parameters(self.stage)
        if self.trainable_groups is None:
            object.__setattr__(self, "trainable_groups", expected)
        elif frozenset(self.trainable_groups) != expected:
            raise StageError(f"stage {self.stage} trains {sorted(expected)}, got {sorted(self.trainable_groups)}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise StageError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")

    @classmethod
    def from_run_config(cls, cfg: RunConfig, stage: str) -> "StageConfig":
        return cls(stage, int(cfg.epochs.get(stage, 0)), cfg.learning_rate, cfg.batch_size,
                   grad_clip=cfg.grad_clip, seed=cfg.subsystem_seed(f"stage_{stage}"))


# ---- data ---------------------------------------------------------------


class SampleDataset(Dataset):
    """Samples resized to the model input (bilinear images, nearest masks)."""

    def __init__(self, samples: Iterable[Sample] | DatasetManifest, input_size: int):
        if isinstance(samples, DatasetManifest):
            samples = [samples.load_sample(r) for r in samples.samples]
        self.samples = list(samples)
        self.input_size = int(input_size)
        self._cache: dict[int, dict] = {}

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_ids(self) -> list[int]:
        return [s.class_id for s in self.samples]

    def __getitem__(self, i: int) -> dict:
        if i not in self._cache:
            s = self.samples[i]
            self._cache[i] = {
                "image": resize_image(s.image, self.input_size),
                "mask": resize_mask(s.mask, self.input_size),
                "class_id": int(s.class_id),
                "object_name": s.object_name,
                "id": s.id,
            }
        return self._cache[i]


def resize_image(image: np.ndarray, size: int) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)
    if tuple(x.shape[1:]) != (size, size):
        x = F.interpolate(x[None], size=(size, size), mode="bilinear", align_corners=False)[0]
        x = x.clamp(0.0, 1.0)
    return x


def resize_mask(mask: np.ndarray, size: int) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask, dtype=bool))
    if tuple(m.shape) != (size, size):
        m = F.interpolate(m[None, None].float(), size=(size, size), mode="nearest")[0, 0] > 0.5
    return m


def collate(items: Sequence[dict]) -> dict:
    return {
        "images": torch.stack([it["image"] for it in items]),
        "masks": torch.stack([it["mask"] for it in items]),
        "classes": torch.tensor([it["class_id"] for it in items], dtype=torch.long),
        "object_names": [it["object_name"] for it in items],
        "ids": [it["id"] for it in items],
    }


def balanced_batches(class_ids: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """One epoch of index batches with classes interleaved round-robin.

    Every sample appears exactly once; each class's order is shuffled.
    """
    by_class: dict[int, list[int]] = {}
    for i, c in enumerate(class_ids):
        by_class.setdefault(int(c), []).append(i)
    queues = [list(rng.permutation(idx)) for _, idx in sorted(by_class.items())]
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(int(q.pop()))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


# ---- stage runner ---------------------------------------------------------


@dataclass
class StageLog:
    stage: str
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def _set_trainable(model: ArtifactDetector, groups: Iterable[str]) -> list[torch.nn.Parameter]:
    for p in model.parameters():
        p.requires_grad_(False)
    params = []
    for g in groups:
        for p in model.group_parameters(g):
            p.requires_grad_(True)
            params.append(p)
    return params


def _check_prerequisites(model: ArtifactDetector, stage: str) -> None:
    done = model.completed_stages
    if stage == "II" and "I" in model.cfg.stages and "I" not in done:
        raise StageError("Stage II requires the Stage I state")
    if stage == "III" and "II" not in done:
        raise StageError("Stage III requires the Stage II anchors")


def _batch_loss(model: ArtifactDetector, batch: dict, mode: str):
    return model.loss(batch["images"], batch["masks"], batch["classes"], batch["object_names"], mode)


@torch.no_grad()
def dataset_loss(model: ArtifactDetector, dataset: SampleDataset, mode: str, batch_size: int = 8) -> dict:
    """Sample-weighted mean LossBreakdown over a dataset."""
    totals = {"cls": 0.0, "dice": 0.0, "focal": 0.0, "total": 0.0}
    n = len(dataset)
    for start in range(0, n, batch_size):
        batch = collate([dataset[i] for i in range(start, min(start + batch_size, n))])
        parts, _ = _batch_loss(model, batch, mode)
        for k, v in parts.as_floats().items():
            totals[k] += v * len(batch["ids"])
    return {k: v / n for k, v in totals.items()}


def run_stage(stage_cfg: StageConfig, model: ArtifactDetector, train: SampleDataset,
              val: SampleDataset | None = None, log_file=None) -> tuple[ArtifactDetector, StageLog]:
    """Optimise the stage's parameter groups and verify every other group is untouched."""
    stage = stage_cfg.stage
    _check_prerequisites(model, stage)
    if len(train) == 0:
        raise StageError(f"Stage {stage}: empty training set")
    mode = STAGE_MODES[stage]
    result = StageLog(stage)
    frozen = [g for g in PARAMETER_GROUPS if g not in stage_cfg.trainable_groups]
    before = model.group_checksums()

    params = _set_trainable(model, stage_cfg.trainable_groups)
    if stage_cfg.epochs > 0 and params:
        model.train()
        opt = torch.optim.Adam(params, lr=stage_cfg.learning_rate)
        rng = np.random.default_rng(stage_cfg.seed)
        step = 0
        for epoch in range(stage_cfg.epochs):
            for idx in balanced_batches(train.class_ids, stage_cfg.batch_size, rng):
                batch = collate([train[i] for i in idx])
                parts, _ = _batch_loss(model, batch, mode)
                values = parts.as_floats()
                if not all(math.isfinite(v) for v in values.values()):
                    raise NumericError(
                        f"non-finite loss in stage {stage}, epoch {epoch}, step {step}: {values} "
                        f"(batch ids {batch['ids']})")
                opt.zero_grad(set_to_none=True)
                parts.total.backward()
                if stage_cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, stage_cfg.grad_clip)
                opt.step()
                record = {"stage": stage, "epoch": epoch, "step": step, **values}
                result.steps.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                step += 1
            if val is not None and len(val):
                model.eval()
                summary = {"stage": stage, "epoch": epoch, "split": "val",
                           **dataset_loss(model, val, mode, stage_cfg.batch_size)}
                result.epochs.append(summary)
                log.info("stage %s epoch %d val total %.4f", stage, epoch, summary["total"])
                model.train()
    _set_trainable(model, ())
    model.eval()

    after = model.group_checksums()
    changed = [g for g in frozen if before[g] != after[g]]
    if changed:
        raise StageError(f"Stage {stage} modified frozen groups {changed}")
    if stage == "II":
        model.cache_anchors()
    if stage not in model.completed_stages:
        model.completed_stages.append(stage)
    return model, result


# ---- checkpoints ----------------------------------------------------------


def _trainable_state(model: ArtifactDetector) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items() if not k.startswith("backbone.")}


def save_checkpoint(model: ArtifactDetector, path: str | Path, rng_state: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "state": _trainable_state(model),
        "anchor_cache": {k: v.clone() for k, v in model.anchor_cache.items()},
        "initial_anchors": model.initial_anchors,
        "completed_stages": list(model.completed_stages),
        "stage": model.completed_stages[-1] if model.completed_stages else None,
        "mask_threshold": float(model.mask_threshold),
        "backbone_checksum": model.backbone.checksum(),
        "rng": rng_state or {"torch": torch.get_rng_state(), "seed": model.cfg.seed},
        "config": model.cfg.to_dict(),
    }
    torch.save(payload, path / CHECKPOINT_FILE)
    dump_config(model.cfg, path / "config.yaml")
    return path


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None,
                    backbone: DualEncoder | None = None) -> ArtifactDetector:
    """Rebuild a detector from ``path``.

    ``cfg``, when given, must agree with the stored snapshot on the class
    layout; ``backbone`` must match the checksum recorded at save time.
    """
    file = Path(path) / CHECKPOINT_FILE if Path(path).is_dir() else Path(path)
    try:
        payload = torch.load(file, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {file}: {exc}") from None
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {version} is not supported (expected {CHECKPOINT_VERSION})")
    saved = config_from_dict(payload["config"])
    if cfg is not None:
        if cfg.num_artifacts != saved.num_artifacts or list(cfg.class_names) != list(saved.class_names):
            raise CheckpointError(
                f"checkpoint has K={saved.num_artifacts} classes {saved.class_names}, "
                f"config expects K={cfg.num_artifacts} {cfg.class_names}")
    backbone = backbone if backbone is not None else build_backbone(saved)
    if backbone.checksum() != payload["backbone_checksum"]:
        raise CheckpointError("backbone weights differ from the ones the checkpoint was trained on")

    model = ArtifactDetector(backbone, saved)
    missing, unexpected = model.load_state_dict(payload["state"], strict=False)
    missing = [k for k in missing if not k.startswith("backbone.")]
    if missing or unexpected:
        raise CheckpointError(f"checkpoint state mismatch: missing {missing}, unexpected {unexpected}")
    model.anchor_cache = dict(payload["anchor_cache"])
    model.initial_anchors = payload["initial_anchors"]
    model.completed_stages = list(payload["completed_stages"])
    model.mask_threshold = float(payload["mask_threshold"])
    model.rng_state = payload.get("rng")
    _set_trainable(model, ())
    return model.eval()


# ---- full schedule ----------------------------------------------------------


@torch.no_grad()
def collect_maps(model: ArtifactDetector, dataset: SampleDataset, batch_size: int = 8,
                 mode: str | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(class probs N x C, anomaly maps N x H x W, masks, class ids) in dataset order."""
    probs, maps, masks, classes = [], [], [], []
    for start in range(0, len(dataset), batch_size):
        batch = collate([dataset[i] for i in range(start, min(start + batch_size, len(dataset)))])
        preds = model.predict(batch["images"], batch["object_names"], mode)
        probs.append(preds.class_probs.double().numpy())
        maps.append(preds.anomaly_map.double().numpy())
        masks.append(batch["masks"].numpy())
        classes.append(batch["classes"].numpy())
    return np.concatenate(probs), np.concatenate(maps), np.concatenate(masks), np.concatenate(classes)


def calibrate_threshold(model: ArtifactDetector, dataset: SampleDataset, batch_size: int = 8) -> float:
    """Pixel threshold maximising F1 of the anomaly map on ``dataset``."""
    _, maps, masks, _ = collect_maps(model, dataset, batch_size)
    if not masks.any():
        return 0.5
    return f1_max(maps.ravel(), masks.ravel())[1]


def training_splits(cfg: RunConfig, manifest: DatasetManifest) -> tuple[SampleDataset, SampleDataset]:
    excluded = set(cfg.exclude_origins)
    train = manifest.subset(split="train")
    train = train.subset(origins={s.origin for s in train.samples} - excluded)
    have = {s.class_id for s in train.samples}
    required = set(range(cfg.num_classes))
    if "clean" in excluded:
        required.discard(0)
    if not required <= have:
        names = [cfg.class_names[c] for c in sorted(required - have)]
        raise DataValidationError(f"train split has no samples of class(es) {names}")
    val = manifest.subset(split="val")
    return SampleDataset(train, cfg.input_size), SampleDataset(val, cfg.input_size)


@dataclass
class TrainResult:
    model: ArtifactDetector
    logs: list[StageLog]
    checkpoints: dict[str, Path]
    separation: dict | None = None


def train_full(cfg: RunConfig, data: DatasetManifest | tuple[SampleDataset, SampleDataset],
               out_dir: str | Path, backbone: DualEncoder | None = None,
               resume: ArtifactDetector | None = None) -> TrainResult:
    """Run the configured stages in order, checkpointing after each one.

    ``resume`` continues from a loaded checkpoint, skipping completed stages.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = training_splits(cfg, data) if isinstance(data, DatasetManifest) else data
    if resume is not None:
        model = resume
    else:
        model = ArtifactDetector(backbone if backbone is not None else build_backbone(cfg), cfg)
        if "II" in cfg.stages:
            with torch.no_grad():
                model.initial_anchors = model.encode_anchors().detach().clone()
    dump_config(cfg, out / "config.yaml")

    logs, checkpoints = [], {}
    with open(out / "train_log.jsonl", "a") as fh:
        for stage in cfg.stages:
            if stage in model.completed_stages:
                continue
            stage_cfg = StageConfig.from_run_config(cfg, stage)
            log.info("stage %s: %d epochs on %d samples", stage, stage_cfg.epochs, len(train))
            model, stage_log = run_stage(stage_cfg, model, train, val, log_file=fh)
            logs.append(stage_log)
            checkpoints[stage] = save_checkpoint(model, out / f"stage_{stage}")

    calib = val if len(val) and any(val[i]["mask"].any() for i in range(len(val))) else train
    model.mask_threshold = calibrate_threshold(model, calib, cfg.batch_size)
    checkpoints["final"] = save_checkpoint(model, out / "final")

    separation = None
    if model.initial_anchors is not None and "II" in model.completed_stages:
        from .prompts import anchor_separation_report
        separation = anchor_separation_report(AnchorSet(model.initial_anchors),
                                              AnchorSet(model.cached_anchors()))
        (out / "anchor_stats.json").write_text(json.dumps(separation, indent=2))
    return TrainResult(model, logs, checkpoints, separation)


__all__ = [
    "STAGE_GROUPS", "StageConfig", "StageError", "NumericError", "CheckpointError", "MissingAnchorsError",
    "SampleDataset", "collate", "balanced_batches", "run_stage", "trainable_parameters",
    "save_checkpoint", "load_checkpoint", "train_full", "TrainResult", "collect_maps",
    "calibrate_threshold", "dataset_loss", "training_splits",
]

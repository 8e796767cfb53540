"""Seven-metric evaluation battery with per-class breakdowns."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataValidationError
from .metrics import aupro, auroc, average_precision, f1_max
from .training import SampleDataset, collect_maps

HEADLINE = ("C-AUROC", "C-AP", "C-F1", "S-AUROC", "S-AP", "S-F1", "S-AUPRO")
CLS_KEYS = ("auroc", "ap", "f1_max")
SEG_KEYS = ("auroc", "ap", "f1_max", "aupro")


@dataclass
class MetricReport:
    classification: dict  # {"macro": {...}, "binary": {...}, "per_class": {name: {...} | None}}
    segmentation: dict  # {"aggregate": {...}, "per_class": {name: {...} | None}}
    counts: dict
    config: dict = field(default_factory=dict)

    def headline(self) -> dict[str, float | None]:
        c, s = self.classification["macro"], self.segmentation["aggregate"]
        vals = [c.get(k) for k in CLS_KEYS] + [s.get(k) for k in SEG_KEYS]
        return dict(zip(HEADLINE, vals))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        try:
            return cls(data["classification"], data["segmentation"], data["counts"], data.get("config", {}))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed metric report: missing {exc}") from None

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not valid JSON: {exc}") from None


def _cls_metrics(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    return {"auroc": auroc(scores, labels), "ap": average_precision(scores, labels),
            "f1_max": f1_max(scores, labels)[0]}


def _seg_metrics(maps: np.ndarray, masks: np.ndarray, fpr_cap: float) -> dict[str, float]:
    flat_s, flat_y = maps.ravel(), masks.ravel()
    out = {"auroc": auroc(flat_s, flat_y), "ap": average_precision(flat_s, flat_y),
           "f1_max": f1_max(flat_s, flat_y)[0]}
    out["aupro"] = aupro(list(maps), list(masks), fpr_cap)
    return out


def _mean(rows: Sequence[dict], keys) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in keys} if rows else {k: None for k in keys}


def metric_report(class_probs: np.ndarray, anomaly_maps: np.ndarray, masks: np.ndarray,
                  class_ids: np.ndarray, class_names: Sequence[str], fpr_cap: float = 0.3,
                  require_all_classes: bool = True) -> MetricReport:
    """Metrics from raw predictions; channel / class 0 is clean.

    A class with no samples gets ``None`` per-class rows; with
    ``require_all_classes`` that is an error instead.
    """
    class_probs = np.asarray(class_probs, dtype=np.float64)
    anomaly_maps = np.asarray(anomaly_maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    class_ids = np.asarray(class_ids).astype(int)
    n = len(class_ids)
    if n == 0:
        raise DataValidationError("cannot evaluate an empty split")
    if class_probs.shape != (n, len(class_names)) or anomaly_maps.shape != masks.shape or len(masks) != n:
        raise ValueError("prediction arrays do not line up with the evaluated samples")
    present = set(class_ids.tolist())
    absent = [class_names[k] for k in range(len(class_names)) if k not in present]
    if require_all_classes and absent:
        raise DataValidationError(f"test split has no samples of class(es) {absent}")

    cls_rows, seg_rows = {}, {}
    for k, name in enumerate(class_names[1:], start=1):
        labels = class_ids == k
        if not labels.any() or labels.all():
            cls_rows[name] = seg_rows[name] = None
            continue
        cls_rows[name] = _cls_metrics(class_probs[:, k], labels)
        sel = class_ids == k
        seg_rows[name] = (_seg_metrics(anomaly_maps[sel], masks[sel], fpr_cap)
                          if masks[sel].any() and not masks[sel].all() else None)

    binary = None
    if 0 in present and len(present) > 1:
        binary = _cls_metrics(1.0 - class_probs[:, 0], class_ids != 0)
    seg_agg = (_seg_metrics(anomaly_maps, masks, fpr_cap) if masks.any() and not masks.all()
               else {k: None for k in SEG_KEYS})

    counts = {
        "samples": n,
        "per_class": {name: int((class_ids == k).sum()) for k, name in enumerate(class_names)},
        "pixels": int(masks.size),
        "positive_pixels": int(masks.sum()),
    }
    return MetricReport(
        classification={"macro": _mean([r for r in cls_rows.values() if r], CLS_KEYS),
                        "binary": binary or {k: None for k in CLS_KEYS},
                        "per_class": cls_rows},
        segmentation={"aggregate": seg_agg, "per_class": seg_rows},
        counts=counts,
        config={"fpr_cap": fpr_cap, "class_names": list(class_names)},
    )


def evaluate(model, dataset: SampleDataset, class_names: Sequence[str] | None = None, fpr_cap: float = 0.3,
             batch_size: int = 8, require_all_classes: bool = True) -> MetricReport:
    """Run ``model.predict`` over ``dataset`` and score it.

    Missing anchors surface as ``MissingAnchorsError`` from the model.
    """
    if len(dataset) == 0:
        raise DataValidationError("cannot evaluate an empty split")
    names = list(class_names or model.cfg.class_names)
    probs, maps, masks, classes = collect_maps(model, dataset, batch_size)
    report = metric_report(probs, maps, masks, classes, names, fpr_cap, require_all_classes)
    report.config["mask_threshold"] = float(getattr(model, "mask_threshold", 0.5))
    return report


def generalization_split_eval(model, synthetic: SampleDataset, real: SampleDataset,
                              class_names: Sequence[str] | None = None, fpr_cap: float = 0.3,
                              batch_size: int = 8) -> dict[str, MetricReport]:
    """Independent reports on the synthetic and real-captured test subsets."""
    for name, ds in (("synthetic", synthetic), ("real", real)):
        if len(ds) == 0:
            raise DataValidationError(f"{name} test subset is empty")
    return {
        name: evaluate(model, ds, class_names, fpr_cap, batch_size, require_all_classes=False)
        for name, ds in (("synthetic", synthetic), ("real", real))
    }

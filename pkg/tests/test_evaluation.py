import json

import numpy as np
import pytest
import torch

from artifactdet.data import DataValidationError
from artifactdet.evaluation import HEADLINE, MetricReport, evaluate, generalization_split_eval, metric_report
from artifactdet.report import (fmt, parse_main_table, render_generalization, render_main_table,
                                render_per_class_table, render_report, render_separation)
from artifactdet.scoring import Predictions
from artifactdet.training import SampleDataset
from artifactdet.toydata import TOY_CLASSES, make_toy_dataset


class LookupPredictor:
    """Emits a fixed per-image prediction keyed on the image bytes."""

    def __init__(self, samples, size, fn):
        self.table = {}
        ds = SampleDataset(samples, size)
        for i in range(len(ds)):
            item = ds[i]
            self.table[item["image"].numpy().tobytes()] = fn(item)
        self.cfg = type("Cfg", (), {"class_names": TOY_CLASSES})()

    def predict(self, images, object_names=None, mode=None):
        outs = [self.table[img.numpy().tobytes()] for img in images]
        probs = torch.stack([o[0] for o in outs])
        pixel = torch.stack([o[1] for o in outs])
        return Predictions(probs, pixel, pixel, 1.0 - pixel[:, 0])


def oracle(item):
    C = len(TOY_CLASSES)
    probs = torch.nn.functional.one_hot(torch.tensor(item["class_id"]), C).double()
    target = torch.where(item["mask"], item["class_id"], 0)
    pixel = torch.nn.functional.one_hot(target, C).permute(2, 0, 1).double()
    return probs, pixel


def uniform(item):
    C = len(TOY_CLASSES)
    return torch.full((C,), 1.0 / C, dtype=torch.float64), torch.full((C, 32, 32), 1.0 / C, dtype=torch.float64)


@pytest.fixture
def samples():
    return make_toy_dataset(per_class=3, seed=2)


def test_oracle_model_scores_one(samples):
    ds = SampleDataset(samples, 32)
    rep = evaluate(LookupPredictor(samples, 32, oracle), ds)
    assert all(v == 1.0 for v in rep.headline().values())
    for name in TOY_CLASSES[1:]:
        assert all(v == 1.0 for v in rep.classification["per_class"][name].values())
        assert all(v == 1.0 for v in rep.segmentation["per_class"][name].values())
    assert rep.counts["samples"] == 12 and rep.counts["per_class"]["clean"] == 3


def test_uniform_model_is_chance(samples):
    rep = evaluate(LookupPredictor(samples, 32, uniform), SampleDataset(samples, 32))
    assert rep.headline()["C-AUROC"] == 0.5


def test_empty_class_and_split(samples):
    no_moire = [s for s in samples if s.class_id != 3]
    with pytest.raises(DataValidationError, match="moire"):
        evaluate(LookupPredictor(no_moire, 32, oracle), SampleDataset(no_moire, 32))
    with pytest.raises(DataValidationError):
        evaluate(LookupPredictor(samples, 32, oracle), SampleDataset([], 32))


def test_per_class_segmentation_uses_only_that_class():
    rng = np.random.default_rng(0)
    masks = np.zeros((4, 8, 8), bool)
    masks[1, :3, :3] = masks[2, 4:, 4:] = masks[3, 2:5, 2:5] = True
    maps = rng.random((4, 8, 8))
    probs = np.full((4, 4), 0.25)
    rep = metric_report(probs, maps, masks, np.arange(4), TOY_CLASSES)
    from artifactdet.metrics import auroc
    assert rep.segmentation["per_class"]["moire"]["auroc"] == pytest.approx(auroc(maps[3], masks[3]))
    assert rep.segmentation["aggregate"]["auroc"] == pytest.approx(auroc(maps.ravel(), masks.ravel()))


def test_metrics_in_unit_interval_and_binary(samples):
    rng = np.random.default_rng(1)
    n = len(samples)
    probs = rng.dirichlet(np.ones(4), size=n)
    maps = rng.random((n, 32, 32))
    masks = np.stack([s.mask for s in samples])
    rep = metric_report(probs, maps, masks, np.array([s.class_id for s in samples]), TOY_CLASSES)
    for v in rep.headline().values():
        assert 0.0 <= v <= 1.0
    from artifactdet.metrics import auroc
    labels = np.array([s.class_id for s in samples]) != 0
    assert rep.classification["binary"]["auroc"] == pytest.approx(auroc(1 - probs[:, 0], labels))


def test_generalization_pairs(samples):
    pred = LookupPredictor(samples, 32, oracle)
    ds = SampleDataset(samples, 32)
    paired = generalization_split_eval(pred, ds, ds)
    assert paired["synthetic"].to_dict() == paired["real"].to_dict()
    assert all(v == 1.0 for v in paired["real"].headline().values())
    with pytest.raises(DataValidationError):
        generalization_split_eval(pred, ds, SampleDataset([], 32))


def test_report_json_round_trip(tmp_path, samples):
    rep = evaluate(LookupPredictor(samples, 32, uniform), SampleDataset(samples, 32))
    rep.save(tmp_path / "r.json")
    assert MetricReport.load(tmp_path / "r.json") == rep
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ValueError):
        MetricReport.load(tmp_path / "bad.json")


def _perfect_report():
    ones = {"auroc": 1.0, "ap": 1.0, "f1_max": 1.0}
    return MetricReport({"macro": ones, "binary": ones, "per_class": {}},
                        {"aggregate": {**ones, "aupro": 1.0}, "per_class": {}}, {"samples": 4})


def test_render_all_ones():
    text = render_main_table(_perfect_report())
    assert text.splitlines()[0].split()[1:] == list(HEADLINE)
    assert text.splitlines()[2].split()[1:] == ["1.000"] * 7


def test_render_empty_per_class_is_na():
    text = render_per_class_table(_perfect_report())
    assert "n/a" in text
    rep = _perfect_report()
    rep.classification["per_class"] = {"moire": None}
    assert render_per_class_table(rep).splitlines()[2].split()[1:] == ["n/a"] * 7


def test_render_parse_round_trip(samples):
    rep = evaluate(LookupPredictor(samples, 32, uniform), SampleDataset(samples, 32))
    parsed = parse_main_table(render_main_table(rep))
    for k, v in rep.headline().items():
        assert parsed[k] == float(fmt(v))
    machine = json.loads(json.dumps(rep.to_dict()))
    assert MetricReport.from_dict(machine).headline() == rep.headline()


def test_render_generalization_and_separation():
    paired = {"synthetic": _perfect_report(), "real": _perfect_report()}
    lines = render_generalization(paired).splitlines()
    assert lines[0].split() == ["subset", "C-AP", "S-AP", "S-F1"] and len(lines) == 4
    stats = {"before": {"clean_vs_artifact_mean": 0.5, "artifact_pairwise_mean": 0.9},
             "after": {"clean_vs_artifact_mean": 0.1, "artifact_pairwise_mean": 0.2}}
    assert "0.100" in render_separation(stats)
    assert render_separation(None).endswith("n/a")
    assert "cos(clean, artifact)" in render_report(_perfect_report(), stats)

import json
import shutil

import numpy as np
import pytest
import yaml
from PIL import Image

from artifactdet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from artifactdet.data import load_manifest, write_image
from artifactdet.toydata import toy_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = toy_config(temperature=0.07, epochs=3).to_dict()
    (root / "toy.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["--config", str(root / "toy.yaml"), "synth", "--toy", "--per-class-count", "3",
                 "--out-manifest", str(root / "data" / "manifest.jsonl")]) == EXIT_OK
    assert main(["--config", str(root / "toy.yaml"), "train", "--manifest", str(root / "data" / "manifest.jsonl"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def test_synth_writes_valid_split_manifest(workspace):
    m = load_manifest(workspace / "data" / "manifest.jsonl", toy_config().class_names)
    assert len(m) == 12 and set(m.split_assignments.values()) == {"train", "val", "test"}
    assert (workspace / "data" / "synth_config.yaml").exists()


def test_synth_from_pattern_bank(tmp_path):
    clean = tmp_path / "clean"
    rng = np.random.default_rng(0)
    for i in range(3):
        write_image(clean / f"cup_{i}.png", rng.random((32, 32, 3)) * 0.4)
    yy, xx = np.mgrid[:10, :10]
    blob = np.exp(-((yy - 5) ** 2 + (xx - 5) ** 2) / 8.0)[..., None].repeat(3, 2)
    write_image(tmp_path / "bank" / "lens_flare" / "f.png", blob)
    write_image(tmp_path / "bank" / "moire" / "m.png", blob)
    rc = main(["--seed", "4", "synth", "--clean-dir", str(clean), "--patterns", str(tmp_path / "bank"),
               "--out-manifest", str(tmp_path / "out" / "m.jsonl"), "--per-class-count", "3"])
    assert rc == EXIT_OK
    m = load_manifest(tmp_path / "out" / "m.jsonl")
    assert m.class_histogram() == {"clean": 3, "ghosting": 0, "lens_flare": 3, "moire": 3}
    assert all(s.phi is not None for s in m.samples if s.class_id)


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "final" / "checkpoint.pt").exists() and (run / "final" / "config.yaml").exists()
    rows = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert {r["stage"] for r in rows} == {"I", "II", "III"}


def test_eval_and_report(workspace, capsys):
    out = workspace / "report.json"
    rc = main(["eval", "--checkpoint", str(workspace / "run" / "final"), "--manifest",
               str(workspace / "data" / "manifest.jsonl"), "--split", "train", "--out", str(out),
               "--generalization"])
    assert rc == EXIT_OK
    data = json.loads(out.read_text())
    assert data["config"]["run_config"]["temperature"] == 0.07 and "generalization" in data
    capsys.readouterr()
    rc = main(["report", "--eval", str(out), "--anchor-stats", str(workspace / "run" / "anchor_stats.json"),
               "--out", str(workspace / "rendered.json")])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "C-AUROC" in text and "cos(clean, artifact)" in text
    assert json.loads((workspace / "rendered.json").read_text())["report"]["counts"]["samples"] > 0


def test_predict(workspace, capsys):
    imgs = sorted((workspace / "data" / "images").glob("*.png"))[:3]
    out = workspace / "pred"
    argv = ["predict", "--checkpoint", str(workspace / "run" / "final"), *map(str, imgs), "--out-dir", str(out)]
    assert main(argv) == EXIT_OK
    first = json.loads((out / "predictions.json").read_text())
    assert [r["image"] for r in first["predictions"]] == list(map(str, imgs))
    r = first["predictions"][0]
    amap = np.asarray(Image.open(r["anomaly_map"]))
    assert amap.shape == (32, 32) and amap.dtype == np.uint8
    assert sum(r["class_probabilities"].values()) == pytest.approx(1.0, abs=1e-6)
    assert set(r["class_masks"]) == {"ghosting", "lens_flare", "moire"}
    assert "config" in first
    assert main(argv) == EXIT_OK
    assert json.loads((out / "predictions.json").read_text()) == first
    bytes_a = (out / f"000_{imgs[0].stem}_anomaly.png").read_bytes()
    assert main(argv) == EXIT_OK and (out / f"000_{imgs[0].stem}_anomaly.png").read_bytes() == bytes_a


def test_predict_resizes_other_sizes(workspace, tmp_path):
    write_image(tmp_path / "big.png", np.random.default_rng(0).random((50, 40, 3)))
    assert main(["predict", "--checkpoint", str(workspace / "run" / "final"), str(tmp_path / "big.png"),
                 "--out-dir", str(tmp_path / "o")]) == EXIT_OK


def test_exit_codes(workspace, tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--manifest", "x"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["nonsense"])
    assert e.value.code == EXIT_USAGE
    (tmp_path / "bad.yaml").write_text("beta: 7\n")
    assert main(["--config", str(tmp_path / "bad.yaml"), "synth", "--toy", "--out-manifest",
                 str(tmp_path / "m.jsonl")]) == EXIT_USAGE
    assert main(["predict", "--checkpoint", str(workspace / "run" / "final"), str(tmp_path / "missing.png"),
                 "--out-dir", str(tmp_path)]) == EXIT_DATA
    (tmp_path / "m.jsonl").write_text('{"image_path": "nope.png", "class_id": 0, "origin": "clean"}\n')
    assert main(["eval", "--checkpoint", str(workspace / "run" / "final"), "--manifest",
                 str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "r.json")]) == EXIT_DATA
    (tmp_path / "bad.json").write_text("not json")
    assert main(["report", "--eval", str(tmp_path / "bad.json")]) == EXIT_DATA


def test_numeric_failure_exit_code(workspace, tmp_path):
    cfg = toy_config(temperature=0.07, epochs=1, learning_rate=1e30).to_dict()
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    rc = main(["--config", str(tmp_path / "c.yaml"), "train", "--manifest",
               str(workspace / "data" / "manifest.jsonl"), "--out", str(tmp_path / "run")])
    assert rc == EXIT_NUMERIC


def test_stage_override_and_seed(workspace, tmp_path):
    rc = main(["--config", str(workspace / "toy.yaml"), "--seed", "5", "train", "--manifest",
               str(workspace / "data" / "manifest.jsonl"), "--out", str(tmp_path / "r"), "--stages", "I"])
    assert rc == EXIT_OK
    snap = yaml.safe_load((tmp_path / "r" / "final" / "config.yaml").read_text())
    assert snap["stages"] == ["I"] and snap["seed"] == 5

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from structdamage.cli import EXIT_INPUT, EXIT_OK, EXIT_USAGE, RunConfig, UsageError, main, parse_config
from structdamage.dataset_io import read_dataset, write_image

GOLDEN = Path(__file__).parent / "golden"


def run(*argv):
    return main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    assert run("prepare", "--synthetic", "count=4", "image_size=32", "seed=3", "--out", out) == EXIT_OK
    return out / "dataset" / "annotations.json"


# -- configuration -----------------------------------------------------------


def test_train_classifier_defaults():
    cfg = parse_config(["train-classifier"])
    assert (cfg.lr, cfg.momentum, cfg.batch_size, cfg.epochs) == (0.001, 0.9, 40, 100)
    assert cfg.task == 2 and cfg.seed == 0 and cfg.out == Path("out")


def test_detector_and_unet_defaults():
    det = parse_config(["train-detector"])
    assert (det.variant, det.lr, det.momentum, det.weight_decay) == ("apanet", 0.002, 0.9, 0.0001)
    assert parse_config(["train-unet"]).lr == 1e-4


def test_flag_overrides_file_overrides_default(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train-classifier]\nlr = 0.05\nepochs = 7\nseed = 4\n\n[train-unet]\nlr = 9\n")
    cfg = parse_config(["train-classifier", "--config", str(ini), "--lr", "0.01"])
    assert cfg.lr == 0.01 and cfg.epochs == 7 and cfg.seed == 4
    assert cfg.momentum == 0.9


def test_file_keys_are_validated(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train-classifier]\nlearning_rate = 0.05\n")
    with pytest.raises(UsageError, match="unknown key"):
        parse_config(["train-classifier", "--config", str(ini)])
    ini.write_text("[train-classifier]\nepochs = many\n")
    with pytest.raises(UsageError):
        parse_config(["train-classifier", "--config", str(ini)])
    ini.write_text("[train-detector]\nvariant = yolo\n")
    with pytest.raises(UsageError):
        parse_config(["train-detector", "--config", str(ini)])


@pytest.mark.parametrize("argv", [
    ["train-classifier", "--epochs", "-1"],
    ["train-classifier", "--lr", "abc"],
    ["train-classifier", "--task", "9"],
    ["train-detector", "--variant", "yolo"],
    ["evaluate", "--iou-min", "1.5"],
    ["infer-detect", "--threshold", "1"],
    ["overlay", "--palette", "fig99"],
    ["frobnicate"],
    ["report", "--bogus"],
])
def test_usage_errors_exit_2(argv):
    assert main(argv) == EXIT_USAGE


def test_config_hash_tracks_options():
    a, b = parse_config(["report", "--reference", "crack"]), parse_config(["report", "--reference", "field"])
    assert a.hash() != b.hash()
    assert a.hash() == parse_config(["report", "--reference", "crack"]).hash()
    assert isinstance(a, RunConfig) and "reference" in a.to_json()["options"]


# -- dispatch ----------------------------------------------------------------


def test_missing_input_exits_1(tmp_path):
    assert run("train-classifier", "--data", tmp_path / "nope.json", "--out", tmp_path) == EXIT_INPUT
    assert run("prepare", "--annotations", tmp_path / "nope.json", "--out", tmp_path) == EXIT_INPUT


def test_missing_required_option_exits_2(tmp_path):
    assert run("train-unet", "--out", tmp_path) == EXIT_USAGE
    assert run("prepare", "--out", tmp_path) == EXIT_USAGE
    assert run("prepare", "--synthetic", "colour=red", "--out", tmp_path) == EXIT_USAGE


def test_malformed_annotations_exit_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"images": 3}')
    assert run("prepare", "--annotations", bad, "--out", tmp_path / "o") == EXIT_INPUT


def test_prepare_twice_is_bit_identical(tmp_path):
    for d in ("a", "b"):
        assert run("prepare", "--synthetic", "count=10", "seed=7", "image_size=24", "--split", "0.6,0.2,0.2",
                   "--out", tmp_path / d) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 10 + 4 + 1
    for f in files:
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f), f


def test_manifest_contents(tmp_path):
    assert run("report", "--reference", "field", "--out", tmp_path, "--seed", "5") == EXIT_OK
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "report" and m["seed"] == 5
    assert len(m["config_hash"]) == 64 and m["version"].startswith("v")
    assert m["outputs"]["report.txt"] == digest(tmp_path / "report.txt")
    assert "65.8%" in (tmp_path / "report.txt").read_text()


def test_report_from_counts(tmp_path):
    counts = tmp_path / "counts.csv"
    counts.write_text("name,n,tp,printed\nCell phone,220,172,78.8%\nDrones,303,172,56.8%\n")
    assert run("report", "--counts", counts, "--template", "average", "--out", tmp_path / "o") == EXIT_OK
    text = (tmp_path / "o" / "report.txt").read_text()
    assert "65.8%" in text and "audit: Cell phone" in text
    counts.write_text("name,n,tp\nx,3,9\n")
    assert run("report", "--counts", counts, "--out", tmp_path / "p") == EXIT_INPUT


def test_table2_template_matches_golden(tmp_path):
    files = [GOLDEN / f"{m}.json" for m in ("segmenter", "cascade", "detector")]
    assert run("evaluate", "--judgments", *files, "--template", "table2", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "report.txt").read_text() == (GOLDEN / "table2_report.txt").read_text()
    assert (tmp_path / "report.csv").read_text() == (GOLDEN / "table2_report.csv").read_text()


def test_table2_needs_all_methods(tmp_path):
    assert run("evaluate", "--judgments", GOLDEN / "segmenter.json", "--template", "table2",
               "--out", tmp_path) == EXIT_USAGE


def test_untrained_detector_on_clean_image_gives_empty_dump(tmp_path):
    img = tmp_path / "clean.png"
    write_image(img, np.full((48, 48, 3), 128, np.uint8))
    assert run("infer-detect", "--image", img, "--out", tmp_path / "o") == EXIT_OK
    doc = json.loads((tmp_path / "o" / "detections.json").read_text())
    assert doc["method"] == "detector"
    assert doc["images"] == [{"image_id": 1, "detections": []}]


def test_detect_evaluate_overlay_chain(tmp_path, dataset):
    before = digest(dataset)
    assert run("infer-detect", "--data", dataset, "--variant", "vanilla", "--out", tmp_path / "d") == EXIT_OK
    dump = tmp_path / "d" / "detections.json"
    assert run("evaluate", "--data", dataset, "--detections", dump, "--out", tmp_path / "e") == EXIT_OK
    j = json.loads((tmp_path / "e" / "judgments.json").read_text())
    assert j["method"] == "detector" and len(j["judgments"]) == 4
    assert run("overlay", "--data", dataset, "--detections", dump, "--palette", "fig2", "--panels",
               "--out", tmp_path / "v") == EXIT_OK
    pngs = sorted((tmp_path / "v" / "overlays").glob("*.png"))
    assert len(pngs) == 4
    assert digest(dataset) == before


def test_cascade_without_classifier_is_segmenter_only(tmp_path, dataset):
    assert run("train-unet", "--data", dataset, "--depth", "1", "--base-channels", "4", "--epochs", "1",
               "--size", "32", "--out", tmp_path / "u") == EXIT_OK
    assert run("infer-cascade", "--data", dataset, "--unet", tmp_path / "u" / "unet.ckpt",
               "--out", tmp_path / "c") == EXIT_OK
    doc = json.loads((tmp_path / "c" / "detections.json").read_text())
    assert doc["method"] == "segmenter"
    assert all(e["gated"] for e in doc["images"])


def test_train_classifier_writes_checkpoint_and_history(tmp_path, dataset):
    assert run("train-classifier", "--data", dataset, "--epochs", "2", "--batch-size", "2",
               "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "classifier.ckpt").is_file()
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "epoch,loss,train_acc"
    assert len(read_dataset(dataset)) == 4

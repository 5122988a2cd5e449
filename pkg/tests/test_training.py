import numpy as np
import pytest
import torch

from structdamage.dataset_io import (ImageRecord, LabeledDataset, PolygonAnnotation, SyntheticSpec,
                                     generate_synthetic)
from structdamage.detector import (DetectorTrainConfig, build_detector, detector_losses,
                                   record_targets, rpn_labels, train_detector)
from structdamage.detector.augment import adjust_brightness, augment, clip_polygon, hflip, scale_jitter
from structdamage.detector.training import DataError


@pytest.fixture(scope="module")
def spall_set():
    return generate_synthetic(SyntheticSpec(count=2, image_size=64, crack_density=0, spall_density=1), 1)


def test_loss_components_are_finite(spall_set):
    parts = detector_losses(build_detector("apanet"), spall_set[0])
    assert set(parts) == {"rpn_cls", "rpn_reg", "cls", "reg", "mask"}
    assert all(torch.isfinite(v) for v in parts.values())
    assert float(parts["mask"].detach()) > 0


def test_zero_learning_rate_leaves_weights_unchanged(spall_set):
    model = build_detector("vanilla")
    before = [p.detach().clone() for p in model.parameters()]
    train_detector(model, spall_set, DetectorTrainConfig(learning_rate=0, weight_decay=0, epochs=1))
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_loss_decreases(spall_set):
    model = build_detector("apanet")
    _, hist = train_detector(model, spall_set, DetectorTrainConfig(epochs=10), seed=0)
    assert len(hist) == 10
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_cascade_training_runs(spall_set):
    _, hist = train_detector(build_detector("cascade_d"), spall_set, DetectorTrainConfig(epochs=1))
    assert np.isfinite(hist[0]["loss"])


def test_training_with_augmentation_and_warmup(spall_set):
    cfg = DetectorTrainConfig(epochs=2, warmup_steps=3, grad_clip=5.0)
    _, hist = train_detector(build_detector("vanilla"), spall_set, cfg, augment=True)
    assert all(np.isfinite(h["loss"]) for h in hist)


def test_training_is_deterministic(spall_set):
    runs = []
    for _ in range(2):
        model, hist = train_detector(build_detector("vanilla", seed=1), spall_set,
                                     DetectorTrainConfig(epochs=1), seed=4)
        runs.append((hist, [p.detach().clone() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_empty_set_and_unknown_category():
    with pytest.raises(DataError):
        train_detector(build_detector("vanilla"), LabeledDataset([]))
    rec = ImageRecord(1, 32, 32, np.zeros((32, 32, 3), np.uint8),
                      [PolygonAnnotation("spalling", [[2, 2], [20, 2], [20, 20]])])
    with pytest.raises(DataError):
        detector_losses(build_detector("vanilla", num_categories=1), rec)


@pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(epochs=0), dict(momentum=1.5),
                                dict(rpn_pos_fraction=2), dict(mask_loss="dice")])
def test_invalid_train_config(kw):
    with pytest.raises(ValueError):
        DetectorTrainConfig(**kw)


def test_record_targets_scale():
    rec = ImageRecord(1, 40, 20, None, [PolygonAnnotation("crack", [[4, 2], [20, 2], [20, 10], [4, 10]])])
    t = record_targets(rec, ["crack", "spalling"], scale=0.5)
    assert t.boxes.tolist() == [[2.0, 1.0, 10.0, 5.0]]
    assert t.labels.tolist() == [1]
    assert t.masks.shape == (1, 10, 20) and float(t.masks.sum()) == 32


def test_rpn_labels_thresholds():
    cfg = DetectorTrainConfig()
    gt = torch.tensor([[0.0, 0, 10, 10]])
    anchors = torch.tensor([[0.0, 0, 10, 10], [0, 0, 10, 12], [0, 0, 10, 20], [50, 50, 60, 60]])
    labels, match = rpn_labels(anchors, gt, cfg)
    # IoUs: 1, 0.833, 0.5 (ignored), 0.
    assert labels.tolist() == [1, 1, -1, 0]


def test_rpn_labels_best_anchor_forced_positive():
    gt = torch.tensor([[0.0, 0, 10, 10]])
    anchors = torch.tensor([[0.0, 0, 10, 40], [50, 50, 60, 60]])
    labels, _ = rpn_labels(anchors, gt, DetectorTrainConfig())
    assert labels.tolist() == [1, 0]


def test_rpn_labels_without_gt():
    labels, _ = rpn_labels(torch.zeros(3, 4), torch.zeros(0, 4), DetectorTrainConfig())
    assert labels.tolist() == [0, 0, 0]


# -- augmentation ------------------------------------------------------------


def test_hflip_mirrors_pixels_and_polygons(spall_set):
    rec = spall_set[0]
    f = hflip(rec)
    assert np.array_equal(f.pixels, rec.pixels[:, ::-1])
    assert np.array_equal(f.masks()[0], rec.masks()[0][:, ::-1])


def test_hflip_involution_on_arbitrary_vertices(rng):
    v = rng.uniform(0, 37, (6, 2))
    rec = ImageRecord(1, 37, 37, None, [PolygonAnnotation("crack", v)])
    back = hflip(hflip(rec)).annotations[0].vertices
    np.testing.assert_allclose(back, v, rtol=0, atol=1e-12)


def test_brightness_clips():
    rec = ImageRecord(1, 2, 1, np.array([[[100, 200, 250], [0, 10, 20]]], np.uint8))
    assert adjust_brightness(rec, 1.5).pixels.tolist() == [[[150, 255, 255], [0, 15, 30]]]


def test_clip_polygon_to_rectangle():
    v = clip_polygon(np.array([[-5.0, -5], [15, -5], [15, 15], [-5, 15]]), 10, 10)
    assert sorted(map(tuple, v)) == [(0, 0), (0, 10), (10, 0), (10, 10)]


def test_scale_jitter_keeps_canvas(spall_set):
    rec = spall_set[0]
    for f in (0.9, 1.0, 1.1):
        out = scale_jitter(rec, f)
        assert out.pixels.shape == rec.pixels.shape
        for a in out.annotations:
            assert (a.vertices >= 0).all() and (a.vertices <= 64).all()
    assert scale_jitter(rec, 1.0) == rec


def test_augment_is_seeded(spall_set):
    a = augment(spall_set[0], np.random.default_rng(3))
    b = augment(spall_set[0], np.random.default_rng(3))
    assert a == b

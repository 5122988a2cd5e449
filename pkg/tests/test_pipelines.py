import json

import numpy as np
import pytest

from structdamage.classifier import ClassPrediction, build_classifier
from structdamage.detector import build_detector, zero_weights
from structdamage.detector.model import Detection
from structdamage.pipelines import (DUMP_FORMAT, PALETTES, SEGMENTER_SIZE, CascadeResult,
                                    DetectionResult, OverlayPalette, cascade_to_result,
                                    cascaded_infer, dump_results, end_to_end_infer, load_results,
                                    palette_from, render_overlay, segment_only)
from structdamage.segmenter import build_unet


class CountingSegmenter:
    """Marks the left half of its input as damaged and counts its calls."""

    def __init__(self):
        self.calls = 0
        self.sizes = []

    def __call__(self, img):
        self.calls += 1
        self.sizes.append(img.shape[:2])
        p = np.zeros(img.shape[:2])
        p[:, : img.shape[1] // 2] = 0.9
        return p


DAMAGED = ClassPrediction([0.8, 0.2])
UNDAMAGED = ClassPrediction([0.3, 0.7])


def test_gate_closed_skips_segmenter(rng):
    seg = CountingSegmenter()
    res = cascaded_infer(rng.integers(0, 256, (40, 60, 3), dtype=np.uint8), UNDAMAGED, seg, [0])
    assert res.gated is False and res.masks is None and seg.calls == 0


def test_gate_open_segments_at_input_resolution(rng):
    seg = CountingSegmenter()
    res = cascaded_infer(rng.integers(0, 256, (40, 60, 3), dtype=np.uint8), DAMAGED, seg, [0])
    assert res.gated and seg.calls == 1
    assert seg.sizes == [(SEGMENTER_SIZE, SEGMENTER_SIZE)]
    m = res.masks["crack"]
    assert m.shape == (40, 60)
    assert m[:, :29].all() and not m[:, 31:].any()


def test_segmenter_call_count_equals_gated_images(rng):
    seg = CountingSegmenter()
    verdicts = [DAMAGED, UNDAMAGED, DAMAGED, UNDAMAGED, UNDAMAGED]
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    results = [cascaded_infer(img, v, seg, [0]) for v in verdicts]
    assert seg.calls == sum(r.gated for r in results) == 2


def test_classifier_sees_224_copy(rng):
    seen = []

    def clf(img):
        seen.append(img.shape)
        return [0.0, 1.0]

    cascaded_infer(rng.integers(0, 256, (30, 50, 3), dtype=np.uint8), clf, CountingSegmenter(), [1])
    assert seen == [(224, 224, 3)]


def test_real_models_compose(rng):
    clf = build_classifier(2)
    res = cascaded_infer(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8), clf,
                         build_unet(depth=2, base_channels=4), [0, 1])
    assert res.gated and res.masks["crack"].shape == (32, 32)


def test_channel_category_mismatch(rng):
    with pytest.raises(ValueError):
        cascaded_infer(np.zeros((8, 8, 3), np.uint8), DAMAGED, CountingSegmenter(), [0],
                       categories=("crack", "spalling"))


def test_cascade_result_invariant():
    with pytest.raises(ValueError):
        CascadeResult(DAMAGED, True, None)
    with pytest.raises(ValueError):
        CascadeResult(DAMAGED, False, {"crack": np.zeros((2, 2), bool)})


def test_segment_only_equals_open_gate(rng):
    img = rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)
    a = segment_only(img, CountingSegmenter())
    b = cascaded_infer(img, DAMAGED, CountingSegmenter(), [0]).masks
    assert np.array_equal(a["crack"], b["crack"])


def test_batch_results_keep_input_order(rng):
    model = build_detector("vanilla")
    imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(3)]
    out = end_to_end_infer(imgs, model, 0.0, image_ids=[7, 3, 5])
    assert [r.image_id for r in out] == [7, 3, 5]
    single = end_to_end_infer(imgs[1], model, 0.0)
    assert [d.to_dict() for d in single] == [d.to_dict() for d in out[1].detections]
    with pytest.raises(ValueError):
        end_to_end_infer(imgs, model, image_ids=[1])


def test_zero_detector_gives_empty_results(rng):
    out = end_to_end_infer([rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)],
                           zero_weights(build_detector("apanet")))
    assert out[0].detections == []


def _det(cat="crack", box=(1, 1, 4, 3), shape=(6, 8)):
    m = np.zeros(shape, bool)
    m[int(box[1]):int(box[3]), int(box[0]):int(box[2])] = True
    return Detection(cat, 0.9, tuple(float(v) for v in box), m)


def test_dump_round_trip_and_stability():
    results = [DetectionResult(1, [_det()]), DetectionResult(2, [], gated=False)]
    blob = dump_results(results, method="detector")
    assert blob == dump_results(results, method="detector") and blob.endswith(b"\n")
    doc = json.loads(blob)
    assert doc["format"] == DUMP_FORMAT and doc["method"] == "detector"
    back = load_results(blob)
    assert [r.to_dict() for r in back] == [r.to_dict() for r in results]
    with pytest.raises(ValueError):
        load_results(json.dumps({"format": "other", "images": []}))


def test_cascade_to_result():
    m = np.zeros((5, 5), bool)
    m[1:3, 2:4] = True
    r = cascade_to_result(4, CascadeResult(DAMAGED, True, {"crack": m}))
    assert r.gated and r.detections[0].box == (2.0, 1.0, 4.0, 3.0)
    assert r.detections[0].score == pytest.approx(0.8)
    assert cascade_to_result(4, CascadeResult(UNDAMAGED, False)).detections == []


# -- overlays ----------------------------------------------------------------


def test_empty_result_leaves_image_unchanged(rng):
    img = rng.integers(0, 256, (6, 8, 3), dtype=np.uint8)
    assert np.array_equal(render_overlay(img, []), img)


def test_opaque_overlay_paints_mask_color():
    img = np.full((6, 8, 3), 100, np.uint8)
    det = _det("spalling", box=(2, 2, 6, 5))
    det.box = (0.0, 0.0, 8.0, 6.0)  # outline along the image border
    out = render_overlay(img, [det], "detections", alpha=1.0)
    outline = np.zeros((6, 8), bool)
    outline[:2], outline[-2:], outline[:, :2], outline[:, -2:] = True, True, True, True
    assert (out[det.mask & ~outline] == PALETTES["detections"].spalling_color).all()
    assert (out[outline] == PALETTES["detections"].box_color).all()
    assert (out[~det.mask & ~outline] == 100).all()


def test_half_blend():
    img = np.full((4, 4, 3), 100, np.uint8)
    m = np.zeros((4, 4), bool)
    m[1, 1] = True
    pal = OverlayPalette((0, 255, 0), (200, 0, 50), (1, 2, 3), (0, 0, 0))
    out = render_overlay(img, CascadeResult(DAMAGED, True, {"crack": m}), pal, alpha=0.5)
    assert out[1, 1].tolist() == [150, 50, 75]
    assert (out[~m] == 100).all()


def test_panels_layout():
    img = np.full((4, 5, 3), 9, np.uint8)
    m = np.zeros((4, 5), bool)
    m[0, 0] = True
    out = render_overlay(img, CascadeResult(DAMAGED, True, {"crack": m}), "cascade", panels=True)
    assert out.shape == (4, 15, 3)
    assert np.array_equal(out[:, :5], img)
    assert out[0, 5].tolist() == [255, 0, 0] and out[1, 5].tolist() == [0, 0, 0]


def test_overlay_validation():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(ValueError):
        render_overlay(img, [], alpha=1.5)
    with pytest.raises(ValueError):
        render_overlay(img, [_det(shape=(5, 5), box=(0, 0, 2, 2))])


def test_palette_validation():
    with pytest.raises(ValueError):
        OverlayPalette((0, 0, 0), (0, 0, 0), (1, 1, 1), (2, 2, 2))
    with pytest.raises(ValueError):
        OverlayPalette((0, 0, 300), (0, 0, 0), (1, 1, 1), (2, 2, 2))
    with pytest.raises(ValueError):
        palette_from("neon")
    p = palette_from({"box_color": [1, 1, 1], "crack_color": [2, 2, 2],
                      "spalling_color": [3, 3, 3], "background_color": [4, 4, 4]})
    assert p.color("spalling") == (3, 3, 3)

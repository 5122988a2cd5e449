import numpy as np
import pytest
import torch

from structdamage.dataset_io import SyntheticSpec, generate_synthetic
from structdamage.detector import (KINDS, DetectorConfig, DetectorVariant, UsageError,
                                   build_detector, cascade_forward, decode, detect, load_detector,
                                   paste_mask, prepare_image, propose_regions, save_detector,
                                   with_config, zero_weights)
from structdamage.detector.model import Detection


@pytest.fixture(scope="module")
def image():
    return generate_synthetic(SyntheticSpec(count=1, image_size=64, spall_density=1), 0)[0].pixels


def _pyramid(model, img):
    x, _, size = prepare_image(img, model.cfg)
    return x, model.pyramid(x), size


def test_unknown_kind():
    with pytest.raises(ValueError):
        DetectorVariant("mask-rcnn-x")


@pytest.mark.parametrize("kind", KINDS)
def test_every_variant_runs(kind, image):
    model = build_detector(kind)
    dets = detect(model, image, score_threshold=0.0)
    for d in dets:
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
        assert d.mask.shape == (64, 64) and d.mask.dtype == bool
        assert d.category in ("crack", "spalling")


def test_zero_weight_model_detects_nothing(image):
    model = zero_weights(build_detector("apanet"))
    assert detect(model, image, 0.5) == []


def test_zero_weight_rpn_boxes_equal_anchors(image):
    model = zero_weights(build_detector("vanilla"))
    x, pyr, _ = _pyramid(model, image)
    logits, deltas = model.rpn(pyr.levels)
    anchors = model.anchors(pyr).all
    assert torch.all(logits == 0)
    torch.testing.assert_close(decode(anchors, deltas), anchors, rtol=0, atol=1e-5)


def test_pyramid_levels_and_channels(image):
    model = build_detector("apanet")
    _, pyr, _ = _pyramid(model, image)
    assert len(pyr.p) == len(pyr.n) == 4
    assert {t.shape[1] for t in pyr.levels} == {model.cfg.fpn_channels}
    assert [p.shape for p in pyr.p] == [n.shape for n in pyr.n]


def test_hrnet_branches_keep_resolution(image):
    model = build_detector("hrnet")
    x, _, _ = prepare_image(image, model.cfg)
    with torch.no_grad():
        b = model.backbone.branches(x)
    assert [tuple(t.shape[-2:]) for t in b] == [(16, 16), (8, 8), (4, 4)]


@pytest.mark.parametrize("kind", ["cascade_b", "cascade_c", "cascade_d"])
def test_cascade_traverses_three_heads_in_chain(kind, image):
    model = build_detector(kind)
    assert len(model.box_heads) == 3
    with torch.no_grad():
        x, pyr, size = _pyramid(model, image)
        props, _ = propose_regions(model, pyr, model.anchors(pyr), 20, size)
        out = cascade_forward(model, pyr.levels, props, (x.shape[-1], x.shape[-2]))
    assert [t["stage"] for t in out.trace] == [0, 1, 2]
    assert torch.equal(out.trace[0]["input"], props)
    for prev, nxt in zip(out.trace, out.trace[1:]):
        assert torch.equal(nxt["input"], prev["output"])
    assert len(out.stage_boxes) == 4 and len(out.stage_probs) == 3


def test_mask_branch_placement():
    assert build_detector("cascade_b").mask_stages == (0,)
    assert build_detector("cascade_c").mask_stages == (2,)
    assert len(build_detector("cascade_d").mask_heads) == 3


def test_cascade_forward_rejects_single_stage(image):
    model = build_detector("vanilla")
    with pytest.raises(UsageError):
        cascade_forward(model, [], torch.zeros(0, 4), (64, 64))


def test_apanet_without_additions_matches_vanilla(image):
    cfg = DetectorConfig(path_augmentation=False, spatial_attention=False)
    vanilla = build_detector("vanilla", seed=3)
    stripped = build_detector("apanet", cfg=cfg, seed=11)
    stripped.load_state_dict(vanilla.state_dict())
    x, _, _ = prepare_image(image, vanilla.cfg)
    with torch.no_grad():
        a, b = vanilla.pyramid(x), stripped.pyramid(x)
        assert all(torch.equal(p, q) for p, q in zip(a.levels, b.levels))
        ra, rb = vanilla.rpn(a.levels), stripped.rpn(b.levels)
    assert torch.equal(ra[0], rb[0]) and torch.equal(ra[1], rb[1])
    da, db = detect(vanilla, image, 0.0), detect(stripped, image, 0.0)
    assert [d.to_dict() for d in da] == [d.to_dict() for d in db]


def test_apanet_toggles_change_structure():
    full = build_detector("apanet")
    assert full.use_path_augmentation and full.use_attention and full.adaptive_pooling
    attn_only = build_detector("apanet", cfg=DetectorConfig(path_augmentation=False))
    assert attn_only.use_attention and not attn_only.adaptive_pooling


def test_large_images_are_downscaled():
    cfg = DetectorConfig(max_side=64)
    x, scale, (w, h) = prepare_image(np.zeros((100, 200, 3), np.uint8), cfg)
    assert scale == pytest.approx(0.32)
    assert (w, h) == (64, 32)
    assert x.shape[-1] % 32 == 0 and x.shape[-2] % 32 == 0


def test_detections_on_downscaled_input_are_in_original_frame(image):
    model = build_detector("vanilla", cfg=DetectorConfig(max_side=32))
    big = np.repeat(np.repeat(image, 2, axis=0), 2, axis=1)
    for d in detect(model, big, 0.0):
        assert d.mask.shape == (128, 128)
        assert d.box[2] <= 128 and d.box[3] <= 128


def test_paste_mask_full_box():
    m = paste_mask(torch.ones(4, 4), (2, 3, 6, 5), 10, 8)
    assert m.shape == (8, 10)
    assert m.sum() == 8 and m[3:5, 2:6].all()


def test_detection_dict_round_trip():
    mask = np.zeros((5, 6), bool)
    mask[1:3, 2:5] = True
    d = Detection("crack", 0.75, (1.0, 1.0, 5.0, 3.0), mask)
    back = Detection.from_dict(d.to_dict())
    assert back.category == "crack" and back.score == 0.75 and np.array_equal(back.mask, mask)


@pytest.mark.parametrize("kind", ["apanet", "cascade_d"])
def test_save_load_round_trip(tmp_path, image, kind):
    cfg = with_config(DetectorConfig(), fc_fusion=True, cascade_iou=(0.4, 0.5, 0.6))
    model = build_detector(kind, cfg=cfg, seed=2)
    back = load_detector(save_detector(tmp_path / "d.ckpt", model))
    assert back.variant == model.variant and back.cfg == model.cfg
    a, b = detect(model, image, 0.0), detect(back, image, 0.0)
    assert [d.to_dict() for d in a] == [d.to_dict() for d in b]

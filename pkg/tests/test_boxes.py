import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_relative_error, greedy_nms_oracle
from structdamage.detector.boxes import (BBOX_CLIP, base_anchors, batched_nms, box_iou, clip_boxes,
                                         decode, encode, make_anchors, nms, smooth_l1)


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(1, size / 2, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_iou_basic():
    a = torch.tensor([[0.0, 0, 2, 2]])
    b = torch.tensor([[1.0, 1, 3, 3], [5, 5, 6, 6], [0, 0, 2, 2]])
    torch.testing.assert_close(box_iou(a, b), torch.tensor([[1 / 7, 0.0, 1.0]]))


def test_nms_two_overlapping_boxes():
    boxes = [[0, 0, 10, 10], [1, 1, 11, 11]]
    assert nms(boxes, [0.9, 0.8], 0.5).tolist() == [0]
    assert nms(boxes, [0.9, 0.8], 0.9).tolist() == [0, 1]


def test_nms_ties_keep_lower_index():
    assert nms([[0, 0, 4, 4], [0, 0, 4, 4]], [0.5, 0.5], 0.5).tolist() == [0]


def test_nms_iou_equal_to_threshold_is_kept():
    # IoU of these two boxes is exactly 1/3.
    boxes = [[0, 0, 2, 1], [1, 0, 3, 1]]
    assert nms(boxes, [1.0, 0.5], 1 / 3).tolist() == [0, 1]


def test_nms_empty_and_validation():
    assert nms(np.zeros((0, 4)), [], 0.5).numel() == 0
    with pytest.raises(ValueError):
        nms([[0, 0, 1, 1]], [1.0], 1.5)
    with pytest.raises(ValueError):
        nms([[0, 0, 1, 1]], [1.0, 2.0], 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 30), st.floats(0.0, 1.0))
def test_nms_matches_oracle_property(seed, n, thr):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, n)
    scores = rng.integers(0, 5, n) / 4.0  # coarse scores create ties
    assert nms(boxes, scores, thr).tolist() == greedy_nms_oracle(boxes, scores, thr)


def test_batched_nms_keeps_labels_apart():
    boxes = torch.tensor([[0.0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 10]])
    keep = batched_nms(boxes, torch.tensor([0.9, 0.8, 0.7]), torch.tensor([0, 1, 0]), 0.5)
    assert keep.tolist() == [0, 1]


def test_smooth_l1_values():
    assert float(smooth_l1(torch.tensor([0.5]), torch.tensor([0.0]))) == 0.125
    assert float(smooth_l1(torch.tensor([2.0]), torch.tensor([0.0]))) == 1.5
    assert float(smooth_l1(torch.tensor([1.0, -3.0]), torch.tensor([0.5, -1.0]))) == 0.125 + 1.5


def test_smooth_l1_continuous_at_beta():
    below = float(smooth_l1(torch.tensor([1 - 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64)))
    above = float(smooth_l1(torch.tensor([1 + 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64)))
    assert abs(below - 0.5) < 1e-8 and abs(above - 0.5) < 1e-8


def test_smooth_l1_shape_mismatch():
    with pytest.raises(ValueError):
        smooth_l1(torch.zeros(3), torch.zeros(4))


def test_smooth_l1_gradient(rng):
    d = rng.uniform(-3, 3, 12)
    d = d[np.abs(np.abs(d) - 1) > 0.05]
    p = torch.tensor(d)
    t = torch.zeros_like(p)
    assert fd_relative_error(lambda x: smooth_l1(x, t), [p]) <= 1e-4


def test_encode_decode_round_trip(rng):
    props = torch.tensor(random_boxes(rng, 20))
    gt = torch.tensor(random_boxes(rng, 20))
    torch.testing.assert_close(decode(props, encode(props, gt)), gt)
    torch.testing.assert_close(decode(props, encode(props, gt, (0.1, 0.1, 0.2, 0.2)), (0.1, 0.1, 0.2, 0.2)), gt)


def test_zero_deltas_return_proposals(rng):
    props = torch.tensor(random_boxes(rng, 5))
    torch.testing.assert_close(decode(props, torch.zeros(5, 4, dtype=torch.float64)), props)


def test_decode_clamps_size_deltas():
    p = torch.tensor([[0.0, 0, 10, 10]])
    out = decode(p, torch.tensor([[0.0, 0, 100, 100]]))
    assert float(out[0, 2] - out[0, 0]) == pytest.approx(10 * math.exp(BBOX_CLIP), rel=1e-5)


def test_clip_boxes():
    out = clip_boxes(torch.tensor([[-5.0, 2, 120, 70]]), 100, 60)
    assert out.tolist() == [[0.0, 2.0, 100.0, 60.0]]


def test_base_anchor_shapes():
    a = base_anchors(8, [2.0], [0.5, 1.0, 2.0])
    w, h = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    torch.testing.assert_close(h / w, torch.tensor([0.5, 1.0, 2.0]))
    torch.testing.assert_close(w * h, torch.full((3,), 256.0))


def test_anchor_tiling():
    s = make_anchors([(4, 6), (2, 3)], [8, 16], scales=(1.0,), ratios=(1.0,))
    assert s.num_per_location == 1
    assert [len(t) for t in s.per_level] == [24, 6]
    assert s.per_level[0][0].tolist() == [0.0, 0.0, 8.0, 8.0]
    assert s.per_level[0][1].tolist() == [8.0, 0.0, 16.0, 8.0]
    assert s.all.shape == (30, 4)

import numpy as np
import pytest
import torch

from conftest import fd_relative_error
from structdamage.dataset_io import SyntheticSpec, generate_synthetic
from structdamage.segmenter import (DataError, SegTrainConfig, UNetModel, bce_loss, binarize,
                                    build_unet, load_unet, logits, mask_iou, save_unet, segment,
                                    segmentation_pairs, to_tensor, train_unet)


@pytest.fixture(scope="module")
def pairs():
    return segmentation_pairs(generate_synthetic(SyntheticSpec(count=4, image_size=32), 0))


def test_channel_progression():
    m = build_unet(depth=4, base_channels=16)
    assert m.encoder_channels == [16, 32, 64, 128]
    assert m.decoder_channels == [128, 64, 32, 16]
    assert m.head.out_channels == 1


def test_invalid_construction():
    with pytest.raises(ValueError):
        UNetModel(depth=0)
    with pytest.raises(ValueError):
        UNetModel(num_categories=3)


@pytest.mark.parametrize("shape", [(227, 227), (16, 16), (33, 50)])
def test_output_matches_input_size(rng, shape):
    m = build_unet(depth=3, base_channels=4)
    p = segment(m, rng.integers(0, 256, shape + (3,), dtype=np.uint8))
    assert p.shape == (1,) + shape
    assert (p >= 0).all() and (p <= 1).all()


def test_two_category_output(rng):
    m = build_unet(depth=2, base_channels=4, num_categories=2)
    assert segment(m, rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)).shape == (2, 20, 20)


def test_zero_head_gives_half_everywhere(rng):
    m = build_unet(depth=2, base_channels=4)
    torch.nn.init.zeros_(m.head.weight)
    torch.nn.init.zeros_(m.head.bias)
    p = segment(m, rng.integers(0, 256, (24, 24, 3), dtype=np.uint8))
    assert np.all(p == 0.5)


def test_binarize_is_strict_threshold():
    p = np.array([0.2, 0.5, 0.50001, 0.9])
    assert binarize(p).tolist() == [False, False, True, True]
    with pytest.raises(ValueError):
        binarize(p, 1.0)


def test_skip_links_carry_information(rng):
    m = build_unet(depth=2, base_channels=4, seed=1)
    x = to_tensor(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))[None]
    with torch.no_grad():
        full = logits(m, x)
        m.skip_enabled[0] = False
        ablated = logits(m, x)
    assert not torch.equal(full, ablated)


def test_mask_iou():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[0, 1, 1, 0]], bool)
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_bce_loss_gradient():
    g = torch.Generator().manual_seed(0)
    m = build_unet(depth=1, base_channels=2, seed=3).double()
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=g)
    y = (torch.rand(1, 1, 4, 4, generator=g) > 0.5).double()
    assert fd_relative_error(lambda t: bce_loss(m, t, y), [x]) <= 1e-4


def test_zero_learning_rate_leaves_weights_unchanged(pairs):
    m = build_unet(depth=2, base_channels=4)
    before = [p.detach().clone() for p in m.parameters()]
    train_unet(m, pairs, SegTrainConfig(learning_rate=0, epochs=2))
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_loss_decreases(pairs):
    m = build_unet(depth=2, base_channels=4)
    _, hist = train_unet(m, pairs, SegTrainConfig(learning_rate=0.5, epochs=5))
    assert [h["epoch"] for h in hist] == [1, 2, 3, 4, 5]
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_mini_batches(pairs):
    m = build_unet(depth=2, base_channels=4)
    _, hist = train_unet(m, pairs, SegTrainConfig(learning_rate=0.1, epochs=1, batch_size=3))
    assert np.isfinite(hist[0]["loss"])


def test_data_errors(pairs):
    m = build_unet(depth=2, base_channels=4)
    img, mask = pairs[0]
    with pytest.raises(DataError):
        train_unet(m, [(img, mask[:, :10])], SegTrainConfig(epochs=1))
    with pytest.raises(DataError):
        train_unet(m, [(img, np.concatenate([mask, mask]))], SegTrainConfig(epochs=1))
    with pytest.raises(DataError):
        train_unet(m, [(img, mask), (img[:16, :16], mask[:, :16, :16])], SegTrainConfig(epochs=1))


def test_invalid_config():
    with pytest.raises(ValueError):
        SegTrainConfig(learning_rate=-0.1)
    with pytest.raises(ValueError):
        SegTrainConfig(epochs=0)


def test_save_load_round_trip(tmp_path, rng):
    m = build_unet(depth=2, base_channels=4, num_categories=2, seed=5)
    back = load_unet(save_unet(tmp_path / "u.ckpt", m))
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert np.array_equal(segment(m, img), segment(back, img))

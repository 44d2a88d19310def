from pathlib import Path

import numpy as np
import pytest

from src.mitoclass.config import IMAGENET_MEAN, IMAGENET_STD, AugPolicy
from src.mitoclass.dataset import Dataset
from src.mitoclass.errors import (
    BadMagic,
    CropTooLarge,
    NonPositiveFactor,
    TruncatedFile,
    ZeroDimension,
    ZeroStd,
)
from src.mitoclass.pixelpipe import (
    STAIN_MATRIX,
    HedStats,
    apply_policy,
    color_jitter,
    context_crop,
    flip,
    hed_stats,
    hed_to_rgb,
    luma,
    normalize,
    read_dump,
    resize_bilinear,
    rgb_to_hed,
    rotate,
    to_tensor,
    write_dump,
)
from tests.conftest import make_record


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def test_to_tensor_divides_by_255():
    pixels = np.array([[[0, 51, 255]]], dtype=np.uint8)
    assert np.array_equal(to_tensor(pixels), np.array([[[0.0, 0.2, 1.0]]]))


def test_resize_constant_image():
    img = np.full((7, 5, 3), 0.4)
    out = resize_bilinear(img, 11, 13)
    assert out.shape == (11, 13, 3)
    assert np.all(out == 0.4)


def test_resize_half_pixel_formula():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    t = np.array([0.0, 0.25, 0.75, 1.0])
    expected = t[:, None] + t[None, :] - 2 * t[:, None] * t[None, :]
    assert np.allclose(resize_bilinear(img, 4, 4), expected, atol=1e-12)


def test_resize_shape_and_zero_dimension():
    assert resize_bilinear(np.zeros((128, 128, 3)), 224, 224).shape == (224, 224, 3)
    with pytest.raises(ZeroDimension):
        resize_bilinear(np.zeros((4, 4, 3)), 0, 4)


def test_flip_is_an_involution(rng):
    img = rng.random((5, 5, 3))
    assert np.array_equal(flip(flip(img, "horizontal"), "horizontal"), img)
    row = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(flip(row, "horizontal"), row[:, ::-1])
    both = flip(flip(img, "horizontal"), "vertical")
    assert np.array_equal(both, img[::-1, ::-1])


def test_rotate_zero_is_identity(rng):
    img = rng.random((5, 6, 3))
    assert np.array_equal(rotate(img, 0.0), img)


def test_rotate_ninety_matches_permutation(rng):
    img = rng.random((3, 3, 2))
    assert np.array_equal(rotate(img, 90.0), np.rot90(img, 1))


def test_rotate_ten_degrees_moves_dot():
    img = np.zeros((21, 21))
    img[10, 16] = 1.0
    out = rotate(img, 10.0)
    theta = np.radians(10.0)
    expected_row = 10 - 6 * np.sin(theta)
    expected_col = 10 + 6 * np.cos(theta)
    row, col = np.unravel_index(np.argmax(out), out.shape)
    assert abs(row - expected_row) <= 1 and abs(col - expected_col) <= 1


def test_jitter_identity_and_brightness():
    img = np.full((4, 4, 3), 0.5)
    assert np.allclose(color_jitter(img, 1.0, 1.0, 1.0), img)
    assert np.allclose(color_jitter(img, 1.2, 1.0, 1.0), 0.6)


def test_zero_saturation_is_grayscale(rng):
    img = rng.random((6, 6, 3))
    out = color_jitter(img, 1.0, 1.0, 0.0)
    assert np.allclose(out, luma(img)[..., None].repeat(3, axis=2))


def test_negative_factor_rejected():
    with pytest.raises(NonPositiveFactor):
        color_jitter(np.zeros((2, 2, 3)), -0.1, 1.0, 1.0)


def test_normalize():
    mean = np.array(IMAGENET_MEAN)
    std = np.array(IMAGENET_STD)
    assert np.allclose(normalize(mean.reshape(1, 1, 3), IMAGENET_MEAN, IMAGENET_STD), 0.0)
    assert np.allclose(normalize((mean + std).reshape(1, 1, 3), IMAGENET_MEAN, IMAGENET_STD), 1.0)
    red = normalize(np.array([[[0.5, 0.5, 0.5]]]), IMAGENET_MEAN, IMAGENET_STD)[0, 0, 0]
    assert red == pytest.approx(0.0655, abs=1e-4)
    with pytest.raises(ZeroStd):
        normalize(np.zeros((1, 1, 3)), IMAGENET_MEAN, (0.2, 0.0, 0.2))


def test_stain_matrix_rows_are_unit_and_well_conditioned():
    assert np.allclose(np.linalg.norm(STAIN_MATRIX.rows, axis=1), 1.0)
    assert np.linalg.cond(STAIN_MATRIX.rows) < 100


def test_hed_of_white_is_zero():
    assert np.array_equal(rgb_to_hed(np.ones((2, 2, 3))), np.zeros((2, 2, 3)))


def test_unit_hematoxylin_recovered():
    pixel = np.power(10.0, -STAIN_MATRIX.rows[0]).reshape(1, 1, 3)
    assert np.allclose(rgb_to_hed(pixel), [[[1.0, 0.0, 0.0]]], atol=1e-6)


def test_stain_round_trip(rng):
    img = rng.uniform(0.05, 1.0, size=(8, 8, 3))
    back = hed_to_rgb(rgb_to_hed(img, clamp=False))
    assert np.allclose(back, img, atol=1e-6)


def test_context_crop():
    img = np.arange(128 * 128 * 3, dtype=np.float64).reshape(128, 128, 3)
    crop = context_crop(img, 80)
    assert crop.shape == (80, 80, 3)
    assert np.array_equal(crop[0, 0], img[24, 24])
    assert np.array_equal(context_crop(img, 128), img)
    with pytest.raises(CropTooLarge):
        context_crop(img, 129)


def test_policy_disabled_is_resize_then_normalize():
    record = make_record("p", (1, 1, 1))
    policy = AugPolicy(resize_to=16, enabled=False)
    resized = resize_bilinear(to_tensor(record.pixels), 16, 16)
    expected = normalize(resized, IMAGENET_MEAN, IMAGENET_STD)
    assert np.array_equal(apply_policy(record, policy, "rgb", stream_seed=99), expected)


def test_policy_is_deterministic_per_seed(small_synthetic: Dataset):
    policy = AugPolicy(resize_to=32)
    record = small_synthetic[0]
    a = apply_policy(record, policy, "rgb", stream_seed=5)
    assert np.array_equal(a, apply_policy(record, policy, "rgb", stream_seed=5))
    assert not np.array_equal(a, apply_policy(record, policy, "rgb", stream_seed=6))


@pytest.mark.parametrize("mode", ["rgb_hed", "crop_rgb_hed"])
def test_hed_modes_have_six_channels(small_synthetic: Dataset, mode):
    stats = hed_stats(small_synthetic, mode)
    out = apply_policy(small_synthetic[1], AugPolicy(resize_to=24), mode, stream_seed=1, hed=stats)
    assert out.shape == (24, 24, 6)
    assert np.all(np.isfinite(out))


def test_hed_stats_positive_std(small_synthetic: Dataset):
    stats = hed_stats(small_synthetic, "rgb_hed")
    assert all(s > 0 for s in stats.std)
    assert HedStats.from_dict(stats.to_dict()) == stats


def test_dump_roundtrip_and_errors(tmp_path: Path, rng):
    tensor = rng.standard_normal((4, 5, 6)).astype(np.float32)
    path = write_dump(tmp_path / "x.bin", tensor)
    raw = path.read_bytes()
    assert raw[:4] == b"MPXT" and len(raw) == 16 + 4 * 5 * 6 * 4
    assert np.array_equal(read_dump(path), tensor)

    (tmp_path / "bad.bin").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagic):
        read_dump(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    with pytest.raises(TruncatedFile):
        read_dump(tmp_path / "short.bin")

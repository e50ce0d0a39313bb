"""Augmentation kernels: exact identities, oracles, determinism, ranges."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dense_blur_oracle
from viewforge.augment import (
    ColorJitter,
    GaussianBlur,
    GaussianNoise,
    Grayscale,
    HorizontalFlip,
    RandomResizedCrop,
    Solarization,
    ToFloatNormalize,
    apply_pipeline,
    apply_stage,
    color_jitter,
    format_pipeline,
    gaussian_blur,
    gaussian_noise,
    grayscale,
    parse_pipeline,
    random_resized_crop,
    resize_bilinear,
    solarize,
)
from viewforge.errors import InvalidParam, ShapeMismatch
from viewforge.rng import RngStream


def _img(h=32, w=32, c=3, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, c), dtype=np.uint8)


def _stream(seed=0, sample=0):
    return RngStream(seed, sample=sample)


def _gen(seed=0, lane=0, sample=0):
    return _stream(seed, sample=sample).substream(lane)


# -- random_resized_crop ------------------------------------------------------

def test_crop_identity_when_scale_and_ratio_are_one():
    img = _img(32, 32)
    stage = RandomResizedCrop(out_size=32, scale=(1.0, 1.0), ratio=(1.0, 1.0))
    out = random_resized_crop(img, stage, _gen())
    assert np.array_equal(out, img)


def test_crop_constant_image_stays_constant():
    img = np.full((40, 40, 3), 137, dtype=np.uint8)
    stage = RandomResizedCrop(out_size=16, scale=(0.2, 0.9))
    out = random_resized_crop(img, stage, _gen(3))
    assert out.shape == (16, 16, 3)
    assert np.all(out == 137)


def test_crop_deterministic_for_fixed_key():
    img = _img(64, 64, seed=5)
    stage = RandomResizedCrop(out_size=32, scale=(0.2, 1.0))
    a = random_resized_crop(img, stage, _gen(7))
    b = random_resized_crop(img, stage, _gen(7))
    assert np.array_equal(a, b)


def test_crop_fallback_center_crop_on_impossible_ratio():
    # 8x64 image with square-only ratio and full scale rarely fits in 10 tries
    img = _img(8, 64, seed=1)
    stage = RandomResizedCrop(out_size=8, scale=(0.9, 1.0), ratio=(1.0, 1.0))
    out = random_resized_crop(img, stage, _gen(11))
    assert out.shape == (8, 8, 3)


def test_resize_bilinear_preserves_constants_at_any_scale():
    img = np.full((17, 13, 3), 201, dtype=np.uint8)
    out = resize_bilinear(img, 29, 5)
    assert np.all(out == 201)


# -- grayscale ------------------------------------------------------------------

def test_grayscale_fixed_points_and_luma():
    gray_px = np.full((4, 4, 3), 100, dtype=np.uint8)
    out = grayscale(gray_px, Grayscale(p=1.0), _gen())
    assert np.all(out == 100)

    red = np.zeros((1, 1, 3), dtype=np.uint8)
    red[0, 0] = (255, 0, 0)
    out = grayscale(red, Grayscale(p=1.0), _gen())
    assert tuple(out[0, 0]) == (76, 76, 76)  # round(0.299 * 255)


def test_grayscale_p_zero_is_identity():
    img = _img(seed=2)
    out = grayscale(img, Grayscale(p=0.0), _gen())
    assert np.array_equal(out, img)


def test_grayscale_idempotent():
    img = _img(seed=3)
    once = grayscale(img, Grayscale(p=1.0), _gen(0))
    twice = grayscale(once, Grayscale(p=1.0), _gen(1))
    assert np.array_equal(once, twice)


def test_grayscale_rejects_single_channel():
    with pytest.raises(ShapeMismatch):
        grayscale(_img(c=1), Grayscale(p=1.0), _gen())


# -- solarize --------------------------------------------------------------------

def test_solarize_values():
    img = np.array([[[200, 100, 128]]], dtype=np.uint8)
    out = solarize(img, Solarization(p=1.0, threshold=128), _gen())
    assert tuple(out[0, 0]) == (55, 100, 127)


def test_solarize_threshold_zero_is_involution():
    img = _img(seed=4)
    st0 = Solarization(p=1.0, threshold=0)
    once = solarize(img, st0, _gen(0))
    assert np.array_equal(once, 255 - img)
    twice = solarize(once, st0, _gen(1))
    assert np.array_equal(twice, img)


# -- color jitter -----------------------------------------------------------------

def test_jitter_all_deltas_zero_is_identity():
    img = _img(seed=6)
    stage = ColorJitter(p=1.0, brightness=0, contrast=0, saturation=0, hue=0)
    out = color_jitter(img, stage, _gen())
    assert np.array_equal(out, img)


def test_jitter_brightness_only_matches_closed_form():
    img = _img(seed=7)
    stage = ColorJitter(p=1.0, brightness=0.4, contrast=0, saturation=0, hue=0)
    gen = _gen(9)
    out = color_jitter(img, stage, gen)
    # replay the draw sequence: gate, then the brightness factor
    replay = _gen(9)
    replay.random()
    factor = replay.uniform(0.6, 1.4)
    expected = np.clip(np.rint(img.astype(np.float64) * factor), 0, 255).astype(np.uint8)
    assert np.array_equal(out, expected)


def test_jitter_deterministic_across_runs():
    img = _img(64, 64, seed=8)
    stage = ColorJitter(p=0.8)
    a = color_jitter(img, stage, _gen(2, sample=5))
    b = color_jitter(img, stage, _gen(2, sample=5))
    assert np.array_equal(a, b)


# -- blur ------------------------------------------------------------------------

def test_blur_constant_image_unchanged():
    img = np.full((20, 20, 3), 99, dtype=np.uint8)
    out = gaussian_blur(img, GaussianBlur(p=1.0, sigma=(1.0, 1.0)), _gen())
    assert np.array_equal(out, img)


def test_blur_single_pixel_symmetric_response():
    img = np.zeros((15, 15, 1), dtype=np.uint8)
    img[7, 7, 0] = 255
    out = gaussian_blur(img, GaussianBlur(p=1.0, sigma=(1.0, 1.0)), _gen())
    for d in range(1, 5):
        assert out[7 + d, 7, 0] == out[7 - d, 7, 0]
        assert out[7, 7 + d, 0] == out[7, 7 - d, 0]
        assert out[7 + d, 7 + d, 0] == out[7 - d, 7 - d, 0]


def test_blur_matches_dense_convolution_oracle():
    img = _img(16, 16, 3, seed=10)
    out = gaussian_blur(img, GaussianBlur(p=1.0, sigma=(2.0, 2.0)), _gen())
    expected = dense_blur_oracle(img, 2.0)
    assert np.max(np.abs(out.astype(np.int16) - expected.astype(np.int16))) <= 1


# -- noise ------------------------------------------------------------------------

def test_noise_std_zero_identity():
    img = _img(seed=11)
    out = gaussian_noise(img, GaussianNoise(std=0.0), _gen())
    assert np.array_equal(out, img)


def test_noise_statistics_match_configured_std():
    img = np.full((64, 64, 3), 128, dtype=np.uint8)
    out = gaussian_noise(img, GaussianNoise(std=0.1), _gen(0, sample=1))
    delta = (out.astype(np.float64) - img.astype(np.float64)) / 255.0
    assert abs(delta.std() - 0.1) < 0.01


def test_noise_reproducible():
    img = _img(seed=12)
    a = gaussian_noise(img, GaussianNoise(std=0.2), _gen(4))
    b = gaussian_noise(img, GaussianNoise(std=0.2), _gen(4))
    assert np.array_equal(a, b)


def test_noise_on_float_images_clamps_to_unit_range():
    img = np.full((8, 8, 3), 0.95, dtype=np.float64)
    out = gaussian_noise(img, GaussianNoise(std=0.5), _gen(5))
    assert out.max() <= 1.0 and out.min() >= 0.0


# -- normalize ---------------------------------------------------------------------

def test_normalize_values():
    img = np.full((2, 2, 3), 255, dtype=np.uint8)
    stage = ToFloatNormalize(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
    out = apply_stage(img, stage, _gen())
    assert out.dtype == np.float64
    assert np.allclose(out, 1.0)


# -- pipelines -----------------------------------------------------------------------

def test_pipeline_identity_stage():
    img = _img(seed=13)
    out = apply_pipeline(img, [Grayscale(p=0.0)], _stream())
    assert np.array_equal(out, img)


def test_pipeline_empty_rejected():
    with pytest.raises(InvalidParam):
        apply_pipeline(_img(), [], _stream())


def test_default_branch_runs_on_random_input():
    img = _img(48, 48, seed=14)
    pipeline = [
        RandomResizedCrop(out_size=24, scale=(0.08, 1.0)),
        HorizontalFlip(p=0.5),
        ColorJitter(p=0.8, brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1),
        Grayscale(p=0.2),
        GaussianBlur(p=1.0, sigma=(0.1, 2.0)),
        Solarization(p=0.2, threshold=128),
    ]
    out = apply_pipeline(img, pipeline, _stream(1, sample=3))
    assert out.shape == (24, 24, 3)
    assert out.dtype == np.uint8


def test_substream_isolation_appending_stage_keeps_prefix():
    img = _img(40, 40, seed=15)
    crop = RandomResizedCrop(out_size=20, scale=(0.3, 1.0))
    flip = HorizontalFlip(p=0.5)
    short = apply_pipeline(img, [crop, flip], _stream(2, sample=9))
    # the longer pipeline's first two stages must see identical draws
    long = apply_pipeline(img, [crop, flip, Solarization(p=0.0)], _stream(2, sample=9))
    assert np.array_equal(short, long)  # p=0 tail stage is identity


def test_probability_honored_over_many_trials():
    img = np.full((2, 2, 3), 250, dtype=np.uint8)
    stage = Solarization(p=0.2, threshold=0)
    applied = 0
    trials = 10000
    for i in range(trials):
        out = solarize(img, stage, _gen(0, sample=i))
        applied += int(out[0, 0, 0] != 250)
    assert abs(applied / trials - 0.2) <= 0.02


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31),
    fill=st.sampled_from([0, 1, 254, 255]),
    stage_index=st.integers(min_value=0, max_value=5),
)
def test_property_outputs_stay_in_range_on_extremes(seed, fill, stage_index):
    stages = [
        RandomResizedCrop(out_size=9, scale=(0.1, 1.0)),
        HorizontalFlip(p=0.5),
        Grayscale(p=1.0),
        ColorJitter(p=1.0, brightness=0.9, contrast=0.9, saturation=0.9, hue=0.5),
        Solarization(p=1.0, threshold=1),
        GaussianBlur(p=1.0, sigma=(0.1, 3.0)),
    ]
    rng = np.random.default_rng(seed)
    img = np.full((12, 12, 3), fill, dtype=np.uint8)
    img[rng.integers(0, 12), rng.integers(0, 12)] = rng.integers(0, 256, size=3)
    out = apply_stage(img, stages[stage_index], _gen(seed % 97, sample=seed % 31))
    assert out.dtype == np.uint8
    # uint8 cannot leave [0, 255]; confirm no wraparound artifacts by casting
    assert int(out.max()) <= 255 and int(out.min()) >= 0


def test_noise_probability_extreme_float_inputs():
    img = np.zeros((6, 6, 3), dtype=np.float64)
    out = gaussian_noise(img, GaussianNoise(std=2.0), _gen(6))
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- serialization ------------------------------------------------------------------

def test_pipeline_text_round_trip():
    pipeline = [
        RandomResizedCrop(out_size=24, scale=(0.08, 1.0), ratio=(0.75, 1.3333)),
        HorizontalFlip(p=0.5),
        ColorJitter(p=0.8, brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1),
        Grayscale(p=0.2),
        GaussianBlur(p=1.0, sigma=(0.1, 2.0)),
        Solarization(p=0.2, threshold=128),
        GaussianNoise(std=0.05),
        ToFloatNormalize(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)),
    ]
    text = format_pipeline(pipeline)
    parsed = parse_pipeline(text)
    assert parsed == pipeline


def test_parse_pipeline_comments_and_blanks():
    text = """
    # crop then flip
    random_resized_crop out_size=16 scale=0.5,1.0

    horizontal_flip p=0.25   # tail comments are stripped
    """
    parsed = parse_pipeline(text)
    assert len(parsed) == 2
    assert parsed[0].out_size == 16
    assert parsed[1].p == 0.25


def test_parse_unknown_stage_rejected():
    with pytest.raises(InvalidParam):
        parse_pipeline("warp_speed factor=9")


def test_stage_validation():
    with pytest.raises(InvalidParam):
        HorizontalFlip(p=1.5)
    with pytest.raises(InvalidParam):
        Solarization(threshold=300)
    with pytest.raises(InvalidParam):
        GaussianBlur(sigma=(2.0, 1.0))
    with pytest.raises(InvalidParam):
        RandomResizedCrop(out_size=0)

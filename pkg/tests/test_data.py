from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from d2aunet.data import (
    AugmentConfig,
    ColorImageError,
    DataError,
    ExtentMismatchError,
    SegSample,
    UnreadableImageError,
    augment,
    batch_iter,
    epoch_rng,
    intensity_normalize,
    load_directory,
    load_sample,
    log_transform,
    prefetch,
    read_gray,
    read_manifest,
    save_sample,
    split_by_manifest,
    split_by_subject,
    subject_of,
    synthetic_samples,
    write_dataset,
    write_gray,
    write_manifest,
)


def sample(size=16, seed=0, subject="s000"):
    rng = np.random.default_rng(seed)
    return SegSample(rng.random((size, size)), (rng.random((size, size)) > 0.6).astype(np.uint8), subject)


# -- io -------------------------------------------------------------------------


def test_zero_mask_is_lesion_free(tmp_path):
    Image.fromarray(np.full((4, 4), 100, np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "m.png")
    s = load_sample(tmp_path / "a.png", tmp_path / "m.png")
    assert s.lesion_free and not s.mask.any()


def test_16bit_max_is_one_and_8bit_scaling(tmp_path):
    Image.fromarray(np.full((2, 2), 65535, np.uint16)).save(tmp_path / "hi.png")
    assert read_gray(tmp_path / "hi.png").max() == 1.0
    Image.fromarray(np.array([[0, 255]], np.uint8)).save(tmp_path / "lo.pgm")
    np.testing.assert_array_equal(read_gray(tmp_path / "lo.pgm"), [[0.0, 1.0]])


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_16bit_round_trip_is_lossless(tmp_path, suffix):
    rng = np.random.default_rng(3)
    levels = rng.integers(0, 65536, (9, 7))
    s = SegSample(levels / 65535.0, (rng.random((9, 7)) > 0.5).astype(np.uint8), "x")
    save_sample(s, tmp_path / f"i{suffix}", tmp_path / f"m{suffix}")
    back = load_sample(tmp_path / f"i{suffix}", tmp_path / f"m{suffix}")
    np.testing.assert_array_equal(back.image, s.image)
    np.testing.assert_array_equal(back.mask, s.mask)


def test_distinct_io_errors(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "rgb.png")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "g4.png")
    Image.fromarray(np.zeros((5, 4), np.uint8)).save(tmp_path / "g5.png")
    with pytest.raises(UnreadableImageError):
        read_gray(tmp_path / "junk.png")
    with pytest.raises(UnreadableImageError):
        read_gray(tmp_path / "missing.png")
    with pytest.raises(ColorImageError):
        read_gray(tmp_path / "rgb.png")
    with pytest.raises(ExtentMismatchError):
        load_sample(tmp_path / "g4.png", tmp_path / "g5.png")
    for cls in (UnreadableImageError, ColorImageError, ExtentMismatchError):
        assert issubclass(cls, DataError)


def test_subject_stem_rule():
    assert subject_of("patient7_0012") == "patient7"
    assert subject_of("a_b_3") == "a_b"
    assert subject_of("solo") == "solo"


def test_directory_round_trip(tmp_path):
    samples = synthetic_samples(4, 16, subjects=2)
    write_dataset(samples, tmp_path)
    loaded = load_directory(tmp_path)
    assert sorted(s.subject_id for s in loaded) == ["s000", "s000", "s001", "s001"]
    with pytest.raises(DataError):
        load_directory(tmp_path / "nowhere")


def test_write_gray_rejects_bad_depth(tmp_path):
    with pytest.raises(ValueError):
        write_gray(tmp_path / "x.png", np.zeros((2, 2)), bits=12)


# -- intensity ----------------------------------------------------------------


def test_normalize_examples(rng):
    const = intensity_normalize(SegSample(np.full((4, 4), 0.3), np.zeros((4, 4), np.uint8)))
    assert not const.image.any()
    spanning = rng.random((6, 6))
    spanning.flat[0], spanning.flat[1] = 0.0, 1.0
    out = intensity_normalize(SegSample(spanning, np.zeros((6, 6), np.uint8))).image
    assert np.abs(out - spanning).max() <= 1e-7


@given(st.integers(0, 10_000))
def test_normalize_hits_exact_bounds(seed):
    img = np.random.default_rng(seed).random((5, 5)) * 7 - 3
    out = intensity_normalize(SegSample(img, np.zeros((5, 5), np.uint8))).image
    assert out.min() == 0.0 and out.max() == 1.0


def test_log_transform_endpoints_and_monotone():
    x = np.linspace(0, 1, 11)
    y = log_transform(x)
    assert y[0] == 0.0 and abs(y[-1] - 1.0) <= 1e-15
    assert (np.diff(y) > 0).all()


# -- augmentation -------------------------------------------------------------


def test_identity_chain_is_bitwise_identity():
    s = sample(32)
    out = augment(s, AugmentConfig.identity(32), np.random.default_rng(0))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_forced_flips_with_unit_gamma_are_exact():
    s = sample(32)
    cfg = replace(AugmentConfig.identity(32), flip_prob=1.0)
    out = augment(s, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out.image, s.image[::-1, ::-1])


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(resize_to=48, crop_to=64)
    with pytest.raises(ValueError):
        AugmentConfig(crop_to=60, resize_to=80)
    with pytest.raises(ValueError):
        AugmentConfig(gamma_min=1.5, gamma_max=0.7)
    with pytest.raises(ValueError):
        AugmentConfig(flip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(rotation_deg=-1)


@given(st.integers(0, 2**32 - 1))
def test_augment_is_deterministic_and_binary(seed):
    s = sample(40)
    cfg = AugmentConfig(resize_to=40, crop_to=32)
    a = augment(s, cfg, np.random.default_rng(seed))
    b = augment(s, cfg, np.random.default_rng(seed))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert a.image.shape == a.mask.shape == (32, 32)
    assert set(np.unique(a.mask)) <= {0, 1} and a.mask.dtype == np.uint8
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0


@given(st.integers(0, 2**32 - 1), st.sampled_from([(40, 32), (48, 32), (32, 32)]))
def test_geometric_consistency(seed, sizes):
    # push the mask through the image path: where bilinear output is exactly
    # 0 or 1 all neighbours agree, so the nearest-resampled mask must too
    rng = np.random.default_rng(seed)
    mask = np.zeros((36, 36), np.uint8)
    y, x = rng.integers(4, 20, 2)
    mask[y : y + 12, x : x + 9] = 1
    s = SegSample(mask.astype(np.float64), mask, "s")
    cfg = AugmentConfig(resize_to=sizes[0], crop_to=sizes[1], flip_prob=0.5, rotation_deg=30,
                        gamma_min=0.7, gamma_max=1.5, log_transform_prob=0.5)
    out = augment(s, cfg, np.random.default_rng(seed))
    assert (out.mask[out.image >= 1 - 1e-9] == 1).all()
    assert (out.mask[out.image <= 1e-9] == 0).all()
    # and the two agree on the overwhelming majority of pixels
    assert np.mean(out.mask == (out.image >= 0.5)) > 0.9


def test_flip_only_chain_keeps_image_and_mask_aligned():
    s = sample(32)
    s = SegSample(s.mask.astype(np.float64), s.mask, "s")
    for seed in range(20):
        out = augment(s, replace(AugmentConfig.identity(32), flip_prob=0.5), np.random.default_rng(seed))
        np.testing.assert_array_equal(out.image, out.mask)


# -- splits -------------------------------------------------------------------


def test_three_subjects_three_splits():
    samples = [replace(sample(4, i), subject_id=f"p{i}") for i in range(3) for _ in range(2)]
    tr, va, te = split_by_subject(samples, (1 / 3, 1 / 3, 1 / 3), seed=0)
    subj = [{s.subject_id for s in part} for part in (tr, va, te)]
    assert all(len(x) == 1 for x in subj) and len(set.union(*subj)) == 3


@given(st.integers(3, 120), st.integers(0, 1000))
def test_split_leakage_and_sizes(n_subjects, seed):
    samples = [SegSample(np.zeros((2, 2)), np.zeros((2, 2), np.uint8), f"p{i}") for i in range(n_subjects)
               for _ in range(1 + i % 3)]
    fractions = (0.8, 0.1, 0.1)
    parts = split_by_subject(samples, fractions, seed)
    subj = [{s.subject_id for s in part} for part in parts]
    assert not (subj[0] & subj[1]) and not (subj[0] & subj[2]) and not (subj[1] & subj[2])
    assert sum(len(p) for p in parts) == len(samples)
    for got, f in zip(subj, fractions):
        assert abs(len(got) - f * n_subjects) <= 1 or len(got) == 1


def test_100_subjects_hit_targets():
    samples = [SegSample(np.zeros((2, 2)), np.zeros((2, 2), np.uint8), f"p{i}") for i in range(100)]
    sizes = [len(p) for p in split_by_subject(samples, (0.8, 0.1, 0.1), 0)]
    assert all(abs(s - t) <= 1 for s, t in zip(sizes, (80, 10, 10)))


def test_split_errors():
    two = [SegSample(np.zeros((2, 2)), np.zeros((2, 2), np.uint8), f"p{i}") for i in range(2)]
    with pytest.raises(DataError):
        split_by_subject(two, (0.8, 0.1, 0.1))
    with pytest.raises(ValueError):
        split_by_subject(two, (0.5, 0.6))
    with pytest.raises(DataError):
        split_by_subject([SegSample(np.zeros((2, 2)), np.zeros((2, 2), np.uint8))] * 3)


def test_manifest_round_trip(tmp_path):
    samples = synthetic_samples(6, 8, subjects=3)
    tr, va, te = split_by_subject(samples, (1 / 3, 1 / 3, 1 / 3), 0)
    write_manifest(tmp_path / "m.tsv", {"train": tr, "val": va, "test": te})
    back = split_by_manifest(samples, read_manifest(tmp_path / "m.tsv"))
    assert [len(back[k]) for k in ("train", "val", "test")] == [len(tr), len(va), len(te)]
    with pytest.raises(DataError):
        split_by_manifest([replace(samples[0], subject_id="ghost")], read_manifest(tmp_path / "m.tsv"))


# -- batching -------------------------------------------------------------------


def test_batch_sizes_and_binary_masks():
    samples = synthetic_samples(10, 16)
    batches = list(batch_iter(samples, 6, AugmentConfig(resize_to=20, crop_to=16), seed=0))
    assert [len(m) for _, m in batches] == [6, 4]
    for images, masks in batches:
        assert images.shape[1:] == (1, 16, 16) and images.dtype == np.float32
        assert set(np.unique(masks)) <= {0, 1}
    with pytest.raises(DataError):
        list(batch_iter([], 2, None, 0))


def _stream(samples, seed, epoch, depth=0):
    cfg = AugmentConfig(resize_to=20, crop_to=16)
    return [(i.data.copy(), m.copy()) for i, m in prefetch(batch_iter(samples, 3, cfg, seed, epoch), depth)]


def test_batch_stream_determinism_and_seed_sensitivity():
    samples = synthetic_samples(7, 16)
    a, b = _stream(samples, 0, 2), _stream(samples, 0, 2)
    for (ia, ma), (ib, mb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ma, mb)
    other = _stream(samples, 1, 2)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, other))
    later = _stream(samples, 0, 3)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, later))


@pytest.mark.parametrize("depth", [1, 2, 5])
def test_prefetch_depth_does_not_change_stream(depth):
    samples = synthetic_samples(7, 16)
    for (ia, ma), (ib, mb) in zip(_stream(samples, 0, 0), _stream(samples, 0, 0, depth)):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ma, mb)


def test_prefetch_reraises_producer_errors():
    def bad():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(prefetch(bad(), 2))


def test_epoch_rng_streams_are_independent():
    assert epoch_rng(0, 0).random() != epoch_rng(0, 1).random()
    assert epoch_rng(0, 0, 3).random() == epoch_rng(0, 0, 3).random()

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamgap.data import (
    AugmentConfig,
    SampleRecord,
    augment,
    extract_patches,
    oversample_minority,
    read_dataset,
    split_dataset,
    synth_dataset,
    synth_sample,
    write_dataset,
)
from siamgap.errors import DataError, GeometryError, LabelError

GEN = json.loads((Path(__file__).parent / "fixtures" / "generator.json").read_text())


def stub(sample_id, grade, size=4):
    return SampleRecord(sample_id, np.zeros((size, size)), np.zeros((size, size)), grade)


def stubs(n0, n2):
    return [stub(f"kl0_{i:05d}", "KL0") for i in range(n0)] + [
        stub(f"kl2_{i:05d}", "KL2") for i in range(n2)]


# ---------------------------------------------------------------- patches

def test_patches_are_exact_thirds():
    img = np.random.default_rng(0).random((200, 500))
    pair = extract_patches(img, (50, 40, 384, 128), patch_size=128)
    np.testing.assert_array_equal(pair.lateral, img[40:168, 50:178])
    np.testing.assert_array_equal(pair.medial, img[40:168, 306:434][:, ::-1])


def test_symmetric_joint_gives_identical_patches():
    half = np.random.default_rng(1).random((64, 96))
    img = np.concatenate([half, half[:, ::-1]], axis=1)
    pair = extract_patches(img, (0, 0, 192, 64), patch_size=64)
    np.testing.assert_array_equal(pair.lateral, pair.medial)


def test_mirroring_twice_is_identity():
    img = np.random.default_rng(2).random((64, 192))
    once = extract_patches(img, (0, 0, 192, 64), patch_size=64)
    twice = extract_patches(img[:, ::-1], (0, 0, 192, 64), patch_size=64)
    np.testing.assert_array_equal(once.lateral, twice.medial)
    np.testing.assert_array_equal(once.medial, twice.lateral)


def test_resampled_patches_have_requested_size():
    img = np.random.default_rng(3).random((90, 300))
    pair = extract_patches(img, (10.5, 3, 250, 80), patch_size=32)
    assert pair.lateral.shape == pair.medial.shape == (32, 32)
    assert pair.lateral.min() >= img.min() and pair.lateral.max() <= img.max()


@pytest.mark.parametrize("box", [(0, 0, 2, 10), (0, 0, 30, 0), (-1, 0, 30, 10),
                                 (0, 0, 101, 10), (0, 95, 30, 10)])
def test_bad_boxes_raise(box):
    with pytest.raises(GeometryError):
        extract_patches(np.zeros((100, 100)), box)


def test_colour_image_rejected():
    with pytest.raises(GeometryError):
        extract_patches(np.zeros((10, 30, 3)), (0, 0, 30, 10))


# -------------------------------------------------------------- generator

def test_synth_is_keyed_by_seed_and_id():
    a = synth_dataset(3, 3, patch_size=32, seed=4)
    b = synth_dataset(3, 3, patch_size=32, seed=4)
    c = synth_dataset(3, 3, patch_size=32, seed=5)
    assert [r.sample_id for r in a] == ["kl0_00000", "kl0_00001", "kl0_00002",
                                        "kl2_00000", "kl2_00001", "kl2_00002"]
    for x, y, z in zip(a, b, c):
        assert np.array_equal(x.lateral, y.lateral) and np.array_equal(x.medial, y.medial)
        assert not np.array_equal(x.lateral, z.lateral)
    # generating a larger set does not disturb existing ids
    bigger = synth_dataset(10, 10, patch_size=32, seed=4)
    assert np.array_equal(bigger[1].lateral, a[1].lateral)


def test_synth_ranges_and_shapes():
    for r in synth_dataset(5, 5, patch_size=48, ambiguity=0.4, seed=1):
        for p in (r.lateral, r.medial):
            assert p.shape == (48, 48)
            assert p.min() >= 0.0 and p.max() <= 1.0
        lat_mask, med_mask = r.meta["signal_mask"]
        assert lat_mask.shape == (48, 48) and med_mask.any()


def dark_width(r):
    t = GEN["dark_threshold"]
    return 0.5 * ((r.lateral < t).sum(0).mean() + (r.medial < t).sum(0).mean())


def best_threshold_accuracy(records):
    w = np.array([dark_width(r) for r in records])
    y = np.array([r.grade == "KL2" for r in records])
    return max(max(((w < t) == y).mean(), ((w >= t) == y).mean()) for t in np.unique(w))


def test_unambiguous_set_separates_on_band_width():
    n = GEN["n_per_grade"]
    recs = synth_dataset(n, n, patch_size=64, ambiguity=0.0, seed=GEN["seed"])
    w0 = np.mean([r.meta["band_width_px"] for r in recs if r.grade == "KL0"])
    w2 = np.mean([r.meta["band_width_px"] for r in recs if r.grade == "KL2"])
    assert w0 - w2 > GEN["band_gap_px_floor"]
    assert best_threshold_accuracy(recs) >= GEN["separable_accuracy_floor"]


def test_ambiguity_defeats_a_threshold_rule():
    n = GEN["n_per_grade"]
    recs = synth_dataset(n, n, patch_size=64, ambiguity=GEN["ambiguous_level"], seed=GEN["seed"])
    assert best_threshold_accuracy(recs) <= GEN["ambiguous_accuracy_ceiling"]
    assert any(r.meta["ambiguity_mixed"] for r in recs)


def test_full_label_noise_flips_everything():
    recs = synth_dataset(10, 10, patch_size=32, label_noise=1.0, seed=0)
    assert all(r.meta["noise_flipped"] for r in recs)
    assert all(r.grade != r.meta["source_grade"] for r in recs)
    clean = synth_dataset(10, 10, patch_size=32, label_noise=0.0, seed=0)
    assert not any(r.meta["noise_flipped"] for r in clean)


def test_synth_rejects_bad_arguments():
    with pytest.raises(DataError):
        synth_dataset(-1, 3)
    with pytest.raises(DataError):
        synth_dataset(3, 3, ambiguity=1.5)
    with pytest.raises(LabelError):
        synth_sample("x", "KL3")


# ------------------------------------------------------------------ splits

def test_split_sizes_seventy_ten_twenty():
    s = split_dataset(stubs(100, 100), seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (140, 20, 40)
    for part in (s.train, s.val, s.test):
        assert sum(r.grade == "KL0" for r in part) == len(part) // 2


def test_split_sizes_on_unbalanced_counts():
    s = split_dataset(stubs(3185, 2126), seed=1)
    n = 3185 + 2126
    for part, frac in ((s.train, 0.7), (s.val, 0.1), (s.test, 0.2)):
        assert abs(len(part) - frac * n) <= 1
        for grade, count in (("KL0", 3185), ("KL2", 2126)):
            assert abs(sum(r.grade == grade for r in part) - frac * count) <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 80), st.integers(10, 80), st.integers(0, 1000))
def test_split_is_a_disjoint_cover(n0, n2, seed):
    recs = stubs(n0, n2)
    s = split_dataset(recs, seed=seed)
    ids = [r.sample_id for part in (s.train, s.val, s.test) for r in part]
    assert len(ids) == len(set(ids)) == n0 + n2
    again = split_dataset(list(reversed(recs)), seed=seed)
    assert [r.sample_id for r in again.test] == [r.sample_id for r in s.test]


def test_split_needs_ten_per_grade():
    with pytest.raises(DataError):
        split_dataset(stubs(100, 9))


def test_disjoint_check_catches_leak():
    s = split_dataset(stubs(20, 20))
    s.test.append(s.train[0])
    with pytest.raises(DataError):
        s.check_disjoint()


# -------------------------------------------------------------- oversample

def test_oversample_balances_and_shares_pixels():
    train = stubs(70, 49)
    out = oversample_minority(train, seed=0)
    assert sum(r.grade == "KL0" for r in out) == 70
    assert sum(r.grade == "KL2" for r in out) == 70
    assert out[:119] == train
    by_id = {r.sample_id: r for r in train}
    for r in out[119:]:
        source = by_id[r.sample_id.split("#")[0]]
        assert r.lateral is source.lateral and r.medial is source.medial
    assert len({r.sample_id for r in out}) == 140


def test_oversample_leaves_balanced_set_alone():
    train = stubs(30, 30)
    assert oversample_minority(train) == train
    with pytest.raises(DataError):
        oversample_minority(stubs(5, 0))


# ------------------------------------------------------------- augmentation

@pytest.fixture(scope="module")
def record():
    return synth_sample("kl2_00042", "KL2", patch_size=32, seed=9)


def test_augment_off_is_identity(record):
    out = augment(record, epoch=3, seed=0, config=AugmentConfig.off())
    assert np.array_equal(out.lateral, record.lateral)
    assert np.array_equal(out.medial, record.medial)
    never = AugmentConfig(prob=0.0)
    out = augment(record, epoch=3, seed=0, config=never)
    assert np.array_equal(out.lateral, record.lateral)


def test_augment_is_keyed_and_bounded(record):
    a = augment(record, epoch=1, seed=0)
    b = augment(record, epoch=1, seed=0)
    assert np.array_equal(a.lateral, b.lateral) and np.array_equal(a.medial, b.medial)
    changed = False
    for epoch in range(2, 8):
        c = augment(record, epoch=epoch, seed=0)
        changed |= not np.array_equal(c.lateral, a.lateral)
        for p in (c.lateral, c.medial):
            assert p.shape == record.lateral.shape
            assert p.min() >= 0.0 and p.max() <= 1.0
    assert changed


def test_augment_always_on_changes_both_patches(record):
    out = augment(record, epoch=0, seed=0, config=AugmentConfig(prob=1.0))
    assert not np.array_equal(out.lateral, record.lateral)
    assert not np.array_equal(out.medial, record.medial)


# --------------------------------------------------------------------- I/O

def test_write_read_round_trip(tmp_path):
    recs = synth_dataset(3, 2, patch_size=16, seed=2)
    write_dataset(recs, tmp_path)
    back = read_dataset(tmp_path)
    assert [r.sample_id for r in back] == [r.sample_id for r in recs]
    assert [r.grade for r in back] == [r.grade for r in recs]
    for a, b in zip(recs, back):
        # 8-bit quantisation
        assert np.max(np.abs(a.lateral - b.lateral)) <= 0.5 / 255 + 1e-12
        assert abs(a.meta["band_width_px"] - b.meta["band_width_px"]) < 1e-6


def test_read_errors(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path)
    (tmp_path / "manifest.csv").write_text("sample_id,grade\nx,KL0\n")
    with pytest.raises(DataError):
        read_dataset(tmp_path)
    (tmp_path / "manifest.csv").write_text(
        "sample_id,lateral_path,medial_path,grade\nx,a.png,b.png,KL0\n")
    with pytest.raises(DataError):
        read_dataset(tmp_path)

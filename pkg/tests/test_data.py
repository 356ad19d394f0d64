import os
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitderm.augment import (AugmentParams, AugmentRanges, augment_class_balance, sample_params,
                             transform_image)
from vitderm.data import (CLASSES, REFERENCE_CLEANSED_COUNT, LesionRecord, cleanse, load_metadata, split,
                          stats_report)
from vitderm.errors import ConfigurationError, DataError
from vitderm.imageio import load_image, read_pnm, resize_bilinear, write_pgm, write_ppm
from vitderm.manifest import build_manifest, load_split, read_manifest, write_manifest
from vitderm.synthetic import make_dataset

HEADER = "lesion_id,image_id,dx,dx_type,age,sex,localization\n"


def ham_metadata_path():
    candidates = [os.environ.get("VITDERM_HAM_METADATA", ""),
                  Path(__file__).parent / "data" / "HAM10000_metadata.csv"]
    for c in candidates:
        if c and Path(c).is_file():
            return Path(c)
    return None


def rec(i, dx="nv", lesion=None, sex="male", age=50.0, loc="back"):
    return LesionRecord(lesion or f"L{i}", f"I{i}", dx, "histo", age, sex, loc)


# -- metadata ---------------------------------------------------------------

def test_load_first_row(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "HAM_0000118,ISIC_0027419,bkl,histo,80.0,male,scalp\n")
    (r,) = load_metadata(p)
    assert (r.lesion_id, r.image_id, r.dx, r.dx_type, r.age, r.sex, r.localization) == \
        ("HAM_0000118", "ISIC_0027419", "bkl", "histo", 80.0, "male", "scalp")


def test_columns_any_order(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("sex,age,dx,image_id,lesion_id,localization,dx_type\nfemale,,mel,I1,L1,,consensus\n")
    (r,) = load_metadata(p)
    assert r.age is None and r.localization == "unknown" and r.dx == "mel"


def test_unknown_dx_cites_line(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "L1,I1,nv,histo,50,male,back\nL2,I2,xyz,histo,50,male,back\n")
    with pytest.raises(DataError, match="line 3"):
        load_metadata(p)


def test_header_only(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER)
    assert load_metadata(p) == []


@pytest.mark.parametrize("body, message", [
    ("L1,I1,nv,histo,abc,male,back\n", "age"),
    ("L1,I1,nv,histo,5,male,back\nL2,I1,nv,histo,5,male,back\n", "duplicate"),
])
def test_bad_rows(tmp_path, body, message):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + body)
    with pytest.raises(DataError, match=message):
        load_metadata(p)


def test_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("lesion_id,image_id,dx\nL1,I1,nv\n")
    with pytest.raises(DataError, match="age"):
        load_metadata(p)


# -- cleansing --------------------------------------------------------------

def test_cleanse_drops_unknown_sex():
    records = [rec(0), rec(1, sex="unknown"), rec(2)]
    assert [r.image_id for r in cleanse(records)] == ["I0", "I2"]


def test_cleanse_identity_when_complete():
    records = [rec(i) for i in range(5)]
    assert cleanse(records) == records


def test_cleanse_missing_age_and_optional_localization():
    records = [rec(0, age=None), rec(1, loc="unknown"), rec(2)]
    assert [r.image_id for r in cleanse(records)] == ["I1", "I2"]
    assert [r.image_id for r in cleanse(records, drop_unknown_localization=True)] == ["I2"]


record_strategy = st.builds(
    lambda i, dx, sex, age, loc: rec(i, dx=dx, sex=sex, age=age, loc=loc),
    st.integers(0, 10_000), st.sampled_from(CLASSES), st.sampled_from(["male", "female", "unknown"]),
    st.one_of(st.none(), st.floats(0, 90)), st.sampled_from(["back", "unknown", "face"]))


@settings(max_examples=50, deadline=None)
@given(st.lists(record_strategy, max_size=30))
def test_cleanse_idempotent(records):
    once = cleanse(records)
    assert cleanse(once) == once


# -- splitting --------------------------------------------------------------

def test_split_ten_distinct_lesions():
    s = split([rec(i) for i in range(10)], seed=0)
    assert s.sizes() == (8, 1, 1)


def test_split_shared_lesion_stays_together():
    records = [rec(i) for i in range(10)] + [rec(99, lesion="L3")]
    for seed in range(50):
        s = split(records, seed=seed)
        homes = [name for name, part in s.parts().items() if any(r.lesion_id == "L3" for r in part)]
        assert len(homes) == 1


def test_split_needs_three_groups():
    with pytest.raises(DataError):
        split([rec(0), rec(1, lesion="L0"), rec(2, lesion="L2")], seed=0)


def test_split_ratio_validation():
    with pytest.raises(ConfigurationError):
        split([rec(i) for i in range(10)], ratios=(0.5, 0.2, 0.2))


def grouped_records(rng, n_lesions):
    out, i = [], 0
    for lesion in range(n_lesions):
        for _ in range(int(rng.integers(1, 4))):
            out.append(rec(i, dx=CLASSES[int(rng.integers(7))], lesion=f"G{lesion}"))
            i += 1
    return out


def test_split_disjoint_for_many_seeds():
    records = grouped_records(np.random.default_rng(0), 120)
    max_group = max(Counter(r.lesion_id for r in records).values())
    for seed in range(100):
        s = split(records, seed=seed)
        ids = [set(r.image_id for r in part) for part in s.parts().values()]
        lesions = [set(r.lesion_id for r in part) for part in s.parts().values()]
        assert sum(map(len, ids)) == len(records)
        for a in range(3):
            for b in range(a + 1, 3):
                assert not ids[a] & ids[b]
                assert not lesions[a] & lesions[b]
        assert abs(len(s.val) - 0.1 * len(records)) <= max_group
        assert abs(len(s.test) - 0.1 * len(records)) <= max_group


# -- transforms -------------------------------------------------------------

@pytest.fixture
def image():
    return np.random.default_rng(3).uniform(size=(16, 16, 3))


def test_identity_transform_is_noop(image):
    np.testing.assert_allclose(transform_image(image, AugmentParams()), image, atol=1e-6)


def test_rotation_180_equals_double_flip(image):
    out = transform_image(image, AugmentParams(rotation_deg=180))
    np.testing.assert_allclose(out, image[::-1, ::-1], atol=1e-5)
    out = transform_image(image, AugmentParams(rotation_deg=-180))
    np.testing.assert_allclose(out, image[::-1, ::-1], atol=1e-5)


def test_shift_fills_with_nearest_column():
    img = np.zeros((8, 8, 3))
    img[:, :4] = 0.2
    img[:, 4:] = 0.9
    img[:, 0] = 0.1  # leftmost column is distinct
    out = transform_image(img, AugmentParams(shift_x=0.5))
    # the left half samples left of the image and replicates column 0
    np.testing.assert_allclose(out[:, :4], 0.1, atol=1e-12)
    # the content moved right by half the width
    np.testing.assert_allclose(out[:, 4], img[:, 0], atol=1e-12)
    np.testing.assert_allclose(out[:, 5:], 0.2, atol=1e-12)


def test_brightness_clamps():
    out = transform_image(np.full((4, 4, 3), 0.9), AugmentParams(brightness=1.2))
    assert out.max() == 1.0


def test_zoom_in_magnifies_centre():
    img = np.zeros((9, 9, 3))
    img[4, 4] = 1.0
    out = transform_image(img, AugmentParams(zoom=2.0))
    assert out[4, 4, 0] == 1.0
    assert out[4, 5, 0] == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_transform_output_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(8, 8, 3))
    params = sample_params(rng, AugmentRanges(brightness=(0.5, 2.0)))
    out = transform_image(img, params)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_sampled_params_within_ranges():
    ranges = AugmentRanges()
    rng = np.random.default_rng(0)
    assert all(ranges.contains(sample_params(rng, ranges)) for _ in range(500))


@pytest.mark.parametrize("kw", [dict(rotation_deg=200), dict(fill="reflect"), dict(zoom=0)])
def test_invalid_params(kw):
    with pytest.raises(ConfigurationError):
        AugmentParams(**kw)


def test_params_serialization_round_trip():
    p = sample_params(np.random.default_rng(1))
    assert AugmentParams.parse(p.serialize()) == p


# -- class balancing --------------------------------------------------------

def imbalanced_train():
    counts = {"nv": 5000, "mel": 800, "bkl": 700, "bcc": 400, "akiec": 250, "vasc": 110, "df": 90}
    out, i = [], 0
    for dx, n in counts.items():
        for _ in range(n):
            out.append(rec(i, dx=dx))
            i += 1
    return out, counts


def test_balance_to_target():
    train, counts = imbalanced_train()
    synth = augment_class_balance(train, target=5000, seed=1)
    total = Counter(r.dx for r in train) + Counter(s.dx for s in synth)
    assert all(total[dx] == 5000 for dx in CLASSES)
    assert not any(s.dx == "nv" for s in synth)
    assert min(total[dx] for dx in CLASSES if dx != "nv") == 5000
    sources = {r.image_id: r.dx for r in train}
    assert all(sources[s.source_image_id] == s.dx for s in synth)  # labels preserved


def test_balance_defaults_to_nv_count():
    train, _ = imbalanced_train()
    synth = augment_class_balance(train, seed=0)
    assert Counter(s.dx for s in synth)["mel"] == 4200


def test_balance_target_equal_to_count_adds_nothing():
    train, _ = imbalanced_train()
    synth = augment_class_balance(train, target={"mel": 800, "df": 100}, seed=0)
    c = Counter(s.dx for s in synth)
    assert c["mel"] == 0 and c["df"] == 10 and c["bkl"] == 0


def test_balance_deterministic():
    train, _ = imbalanced_train()
    a = augment_class_balance(train, target=1000, seed=5)
    b = augment_class_balance(train, target=1000, seed=5)
    c = augment_class_balance(train, target=1000, seed=6)
    assert a == b
    assert a != c


def test_balance_empty_class_errors():
    train = [rec(i, dx="nv") for i in range(5)] + [rec(9, dx="mel")]
    with pytest.raises(DataError, match="akiec"):
        augment_class_balance(train, target=5)


# -- stats ------------------------------------------------------------------

def test_stats_single_record():
    report = stats_report([rec(0, dx="mel", sex="female", age=42.0, loc="face")])
    assert report.gender_share == {"female": 1.0}
    assert report.age_histogram == {"40-44": 1}
    assert report.dx == {"mel": 1}
    assert report.dx_by_age == {"40-44": {"mel": 1}}
    assert report.localization_by_sex == {"female": {"face": 1}}
    text = report.to_text()
    assert "100.00%" in text and "age_mean=42.0000" in text


def test_stats_shares_and_means():
    records = [rec(0, sex="male", age=60), rec(1, sex="male", age=50), rec(2, sex="female", age=40),
               rec(3, sex="female", age=None)]
    report = stats_report(records)
    assert report.gender_share == {"female": 0.5, "male": 0.5}
    assert report.age_mean == pytest.approx(50.0)
    assert report.age_mean_by_sex == {"female": 40.0, "male": 55.0}


# -- image io and manifests -------------------------------------------------

def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), img)
    gray = img[..., 0]
    write_pgm(tmp_path / "a.pgm", gray)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), gray)


def test_load_image_scales_and_resizes(tmp_path):
    img = np.full((6, 6, 3), 255, dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    out = load_image(tmp_path / "a.ppm", 4)
    assert out.shape == (4, 4, 3)
    np.testing.assert_allclose(out, 1.0)


def test_resize_bilinear_constant_and_linear():
    ramp = np.tile(np.arange(4.0), (4, 1))
    up = resize_bilinear(ramp, 8, 8)
    assert up.shape == (8, 8)
    assert np.all(np.diff(up[0]) >= 0)
    np.testing.assert_allclose(resize_bilinear(np.ones((3, 5)), 7, 2), 1.0)


def test_manifest_round_trip_and_loading(tmp_path):
    meta = make_dataset(tmp_path, image_size=8, seed=0)
    records = load_metadata(meta)
    s = split(records, seed=3)
    synth = augment_class_balance(s.train, target=8, seed=3)
    entries = build_manifest(s, synth)
    write_manifest(tmp_path / "split.txt", entries)
    again = read_manifest(tmp_path / "split.txt")
    assert again == entries
    train = load_split(again, "train", tmp_path / "images", 8)
    assert len(train) == len(s.train) + len(synth)
    assert train.images.min() >= 0 and train.images.max() <= 1
    first_syn = next(i for i, e in enumerate(e for e in again if e.split == "train") if e.synthetic)
    entry = [e for e in again if e.split == "train"][first_syn]
    src = load_image(tmp_path / "images" / f"{entry.source_image_id}.ppm", 8)
    np.testing.assert_allclose(train.images[first_syn], transform_image(src, entry.params), atol=1e-6)


# -- real HAM10000 metadata (optional) --------------------------------------

@pytest.fixture
def ham():
    path = ham_metadata_path()
    if path is None:
        pytest.skip("HAM10000 metadata not available (set VITDERM_HAM_METADATA)")
    return load_metadata(path)


def test_ham_cleansing_count(ham):
    cleansed = cleanse(ham)
    print(f"cleansed {len(cleansed)} records vs reference {REFERENCE_CLEANSED_COUNT}")
    assert abs(len(cleansed) - REFERENCE_CLEANSED_COUNT) <= 0.01 * REFERENCE_CLEANSED_COUNT


def test_ham_split_sizes(ham):
    cleansed = cleanse(ham)
    s = split(cleansed, seed=0)
    n = len(cleansed)
    for size, ratio in zip(s.sizes(), (0.8, 0.1, 0.1)):
        assert abs(size - ratio * n) <= 0.005 * n


def test_ham_stats(ham):
    report = stats_report(cleanse(ham))
    assert report.gender_share["male"] == pytest.approx(0.54, abs=0.01)
    assert report.age_mean == pytest.approx(52, abs=1)
    assert next(iter(report.localization)) == "back"

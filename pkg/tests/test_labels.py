"""Grade algebra: the 7 valid pairs, inverses, and manifest round-trips."""

import itertools

import pytest

from hipgrade.labels import (
    NUM_CLASSES,
    VALID_PAIRS,
    GradeLabel,
    ManifestRow,
    combined_to_separated,
    load_manifest,
    separated_to_combined,
    write_manifest,
)

EXPECTED_PAIRS = {
    (1, 1): 1,
    (1, 2): 2,
    (1, 3): 3,
    (1, 4): 4,
    (2, 4): 5,
    (3, 4): 6,
    (4, 4): 7,
}


def test_valid_pair_table():
    assert NUM_CLASSES == 7
    assert dict(zip(VALID_PAIRS, range(1, 8))) == EXPECTED_PAIRS


def test_separated_to_combined_exhaustive():
    # All 16 in-range (crowe, kl) pairs: 7 map to a class, 9 to None.
    for crowe, kl in itertools.product(range(1, 5), range(1, 5)):
        got = separated_to_combined(crowe, kl)
        assert got == EXPECTED_PAIRS.get((crowe, kl))
    invalid = sum(
        separated_to_combined(c, k) is None
        for c, k in itertools.product(range(1, 5), range(1, 5))
    )
    assert invalid == 9


def test_combined_to_separated_is_right_inverse():
    for combined in range(1, 8):
        crowe, kl = combined_to_separated(combined)
        assert separated_to_combined(crowe, kl) == combined


@pytest.mark.parametrize("crowe,kl", [(0, 1), (5, 1), (1, 0), (1, 5), (-1, 2)])
def test_out_of_range_pairs_raise(crowe, kl):
    with pytest.raises(ValueError):
        separated_to_combined(crowe, kl)


@pytest.mark.parametrize("combined", [0, 8, -3])
def test_out_of_range_combined_raises(combined):
    with pytest.raises(ValueError):
        combined_to_separated(combined)


def test_grade_label_constructors_agree():
    for combined in range(1, 8):
        via_combined = GradeLabel.from_combined(combined)
        via_pair = GradeLabel.from_pair(via_combined.crowe, via_combined.kl)
        assert via_combined == via_pair
        assert via_combined.is_valid


def test_grade_label_invalid_pair():
    label = GradeLabel.from_pair(2, 1)
    assert label.combined is None
    assert not label.is_valid


def test_manifest_round_trip(tmp_path):
    rows = [
        ManifestRow("p01", "right", "images/p01.png", 1, 2, 2),
        ManifestRow("p02", "left", "images/p02.png", 4, 4, 7),
    ]
    path = tmp_path / "manifest.csv"
    write_manifest(rows, path)
    assert load_manifest(path) == rows


def test_manifest_rejects_inconsistent_combined(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "patient_id,side,image_path,crowe,kl,combined_class\n"
        "p01,right,images/p01.png,1,2,5\n"
    )
    with pytest.raises(ValueError):
        load_manifest(path)


def test_manifest_rejects_bad_side(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "patient_id,side,image_path,crowe,kl,combined_class\n"
        "p01,up,images/p01.png,1,2,2\n"
    )
    with pytest.raises(ValueError):
        load_manifest(path)

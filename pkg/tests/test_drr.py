"""ROI extraction, AP projection, normalization, augmentation, DRR files."""

import math

import numpy as np
import pytest

from hipgrade.drr import (
    DRR_SIZE,
    AugmentationParams,
    DRRImage,
    augment,
    extract_roi,
    load_drr,
    mean_projection,
    normalize,
    project_ap,
    render_drr,
    save_drr,
)
from hipgrade.labels import GradeLabel
from hipgrade.volume import CTVolume, generate_phantom, spec_for_class

CENTER_OFF = (DRR_SIZE - 1) / 2.0  # 74.5: sample offsets in mm around the FHC


def make_volume(shape, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                fill=None, seed=0, dtype=np.float32):
    if fill is None:
        rng = np.random.default_rng(seed)
        voxels = rng.uniform(0, 100, size=shape).astype(dtype)
    else:
        voxels = np.full(shape, fill, dtype=dtype)
    return CTVolume(voxels=voxels, spacing=spacing, origin=origin)


def sample_position(fhc, i, j, k):
    """Physical LPS position of ROI sample (row i, col j, depth k)."""
    fhc = np.asarray(fhc, dtype=float)
    return fhc + np.array([
        (j - CENTER_OFF),            # columns run +L
        (k - CENTER_OFF),            # depth runs +P
        -(i - CENTER_OFF),           # rows run -S (superior at row 0)
    ])


def trilinear_oracle(voxels, idx):
    """Hand-rolled trilinear interpolation; zero outside the grid."""
    result = 0.0
    base = [math.floor(v) for v in idx]
    frac = [v - b for v, b in zip(idx, base)]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((frac[0] if dx else 1 - frac[0])
                     * (frac[1] if dy else 1 - frac[1])
                     * (frac[2] if dz else 1 - frac[2]))
                x, y, z = base[0] + dx, base[1] + dy, base[2] + dz
                inside = (0 <= x < voxels.shape[0] and 0 <= y < voxels.shape[1]
                          and 0 <= z < voxels.shape[2])
                value = float(voxels[x, y, z]) if inside else 0.0
                result += w * value
    return result


# ---------------------------------------------------------------------------
# extract_roi.


def test_native_spacing_identity_resampling():
    # Grid center of an even-sized 1 mm volume sits between voxels, so the
    # +-74.5 mm sample offsets land exactly on voxel centers.
    vol = make_volume((200, 200, 200))
    fhc = vol.index_to_physical((99.5, 99.5, 99.5))
    subgrid, padded = extract_roi(vol, fhc)
    assert not padded
    assert subgrid.shape == (150, 150, 150)
    # subgrid[i, j, k] = voxels[25 + j, 25 + k, 174 - i] per the axis map.
    want = np.transpose(vol.voxels[25:175, 25:175, 25:175], (2, 0, 1))[::-1]
    assert np.allclose(subgrid, want, atol=1e-9)


def test_clip_windows_source_intensities_before_resampling():
    vol = make_volume((200, 200, 200))
    fhc = vol.index_to_physical((99.5, 99.5, 99.5))
    clipped, _ = extract_roi(vol, fhc, clip=(20.0, 60.0))
    want = np.transpose(np.clip(vol.voxels, 20.0, 60.0)[25:175, 25:175, 25:175],
                        (2, 0, 1))[::-1]
    assert np.allclose(clipped, want, atol=1e-9)
    # A window spanning the full intensity range is a no-op.
    full, _ = extract_roi(vol, fhc, clip=(-1.0, 1000.0))
    plain, _ = extract_roi(vol, fhc)
    assert np.array_equal(full, plain)


def test_clip_bounds_must_be_ordered():
    vol = make_volume((200, 200, 200))
    fhc = vol.index_to_physical((99.5, 99.5, 99.5))
    with pytest.raises(ValueError, match="clip"):
        extract_roi(vol, fhc, clip=(10.0, 10.0))


def test_two_mm_volume_matches_hand_trilinear():
    vol = make_volume((120, 120, 120), spacing=(2.0, 2.0, 2.0), dtype=np.float64)
    fhc = vol.index_to_physical((60.0, 60.0, 60.0))
    subgrid, padded = extract_roi(vol, fhc)
    assert not padded
    rng = np.random.default_rng(17)
    checks = [(0, 0, 0), (149, 149, 149), (0, 149, 0), (74, 74, 74)]
    checks += [tuple(rng.integers(0, 150, size=3)) for _ in range(30)]
    for i, j, k in checks:
        phys = sample_position(fhc, i, j, k)
        idx = (phys - np.asarray(vol.origin)) / np.asarray(vol.spacing)
        assert subgrid[i, j, k] == pytest.approx(
            trilinear_oracle(vol.voxels, idx), abs=1e-9)


def test_anisotropic_spacing_matches_hand_trilinear():
    vol = make_volume((250, 220, 110), spacing=(0.8, 0.9, 2.0), seed=5,
                      dtype=np.float64)
    fhc = vol.index_to_physical((124.0, 110.0, 55.0))
    subgrid, _ = extract_roi(vol, fhc)
    rng = np.random.default_rng(19)
    for _ in range(25):
        i, j, k = (int(v) for v in rng.integers(0, 150, size=3))
        phys = sample_position(fhc, i, j, k)
        idx = (phys - np.asarray(vol.origin)) / np.asarray(vol.spacing)
        assert subgrid[i, j, k] == pytest.approx(
            trilinear_oracle(vol.voxels, idx), abs=1e-9)


def test_padding_slab_and_flag():
    # FHC 65 mm from the inferior face: the ROI wants 75 mm, so the last
    # 10 mm of rows fall outside.  Constant volume makes the slab visible.
    vol = make_volume((200, 200, 200), fill=1.0)
    fhc = vol.index_to_physical((99.5, 99.5, 65.0))
    subgrid, padded = extract_roi(vol, fhc)
    assert padded
    assert np.all(subgrid[141:] == 0.0)          # fully outside
    assert np.all(subgrid[140] == pytest.approx(0.5))  # boundary interpolation
    assert np.all(subgrid[:140] == pytest.approx(1.0))


def test_interior_crop_not_padded():
    vol = make_volume((200, 200, 200))
    _, padded = extract_roi(vol, vol.index_to_physical((99.5, 99.5, 99.5)))
    assert not padded


def test_fhc_outside_volume_rejected():
    vol = make_volume((50, 50, 50))
    with pytest.raises(ValueError):
        extract_roi(vol, (200.0, 25.0, 25.0))


def test_bad_side_rejected():
    vol = make_volume((200, 200, 200))
    with pytest.raises(ValueError):
        extract_roi(vol, vol.index_to_physical((99.5, 99.5, 99.5)), side="up")


# ---------------------------------------------------------------------------
# Projection and normalization.


def test_constant_subgrid_projects_constant():
    sub = np.full((150, 150, 150), 3.7)
    assert np.allclose(mean_projection(sub), 3.7)


def test_single_voxel_projects_to_mean():
    sub = np.zeros((150, 150, 150))
    sub[10, 20, 30] = 42.0
    proj = mean_projection(sub)
    assert proj[10, 20] == pytest.approx(42.0 / 150.0)
    assert np.count_nonzero(proj) == 1


def test_normalize_min_max():
    img = np.array([[2.0, 4.0, 6.0]] * 3)
    out = normalize(img)
    assert np.allclose(out, [[0.0, 0.5, 1.0]] * 3)


def test_normalize_constant_to_zeros():
    assert np.all(normalize(np.full((5, 5), 9.0)) == 0.0)


def test_normalize_fixed_point():
    img = np.random.default_rng(0).uniform(0, 1, size=(4, 4))
    img.flat[0], img.flat[1] = 0.0, 1.0
    assert np.allclose(normalize(img), img)


def test_normalize_rejects_nonfinite():
    img = np.ones((3, 3))
    img[0, 0] = np.nan
    with pytest.raises(ValueError):
        normalize(img)
    img[0, 0] = np.inf
    with pytest.raises(ValueError):
        normalize(img)


def test_projection_scale_invariant_after_normalize():
    rng = np.random.default_rng(2)
    sub = rng.uniform(0, 50, size=(150, 150, 150))
    base = project_ap(sub).pixels
    for k in (0.5, 3.0, 250.0):
        assert np.allclose(project_ap(k * sub).pixels, base, atol=1e-6)


def test_left_side_mirrors_columns():
    sub = np.zeros((150, 150, 150))
    sub[75, 10, :] = 1.0
    right = project_ap(sub, side="right").pixels
    left = project_ap(sub, side="left").pixels
    assert right[75, 10] == 1.0
    assert left[75, 149 - 10] == 1.0
    assert np.allclose(left, right[:, ::-1])


def test_mirror_matches_flipped_volume():
    # Projecting a left hip equals projecting the right hip of the
    # left-right mirrored volume.
    vol = make_volume((200, 200, 200), seed=23)
    flipped = CTVolume(voxels=np.ascontiguousarray(vol.voxels[::-1]),
                       spacing=vol.spacing, origin=vol.origin)
    fhc = vol.index_to_physical((80.0, 99.5, 99.5))
    fhc_flipped = flipped.index_to_physical((119.0, 99.5, 99.5))
    left = render_drr(vol, fhc, side="left")
    right = render_drr(flipped, fhc_flipped, side="right")
    assert np.allclose(left.pixels, right.pixels, atol=1e-6)


def test_class7_head_row_superior_to_class1():
    # With the crop centered on the cup, the dislocated class-7 head sits
    # well above the centered class-1 head.
    def head_row(cls):
        spec = spec_for_class(cls, seed=31)
        volume, _, landmarks = generate_phantom(spec)
        cup_center = np.asarray(landmarks.right_fhc) - np.array(
            [0.0, 0.0, spec.dislocation_mm])
        subgrid, _ = extract_roi(volume, cup_center)
        image = project_ap(subgrid)
        bright = image.pixels >= 0.8 * image.pixels.max()
        return float(np.nonzero(bright)[0].mean())

    assert head_row(7) < head_row(1)


# ---------------------------------------------------------------------------
# DRRImage validation.


def test_drr_image_shape_enforced():
    with pytest.raises(ValueError):
        DRRImage(pixels=np.zeros((100, 150)))


def test_drr_image_range_enforced():
    bad = np.zeros((150, 150))
    bad[0, 0] = 1.5
    with pytest.raises(ValueError):
        DRRImage(pixels=bad)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        DRRImage(pixels=bad)


def test_drr_image_side_enforced():
    with pytest.raises(ValueError):
        DRRImage(pixels=np.zeros((150, 150)), side="both")


# ---------------------------------------------------------------------------
# Augmentation.


def drr_fixture(seed=3):
    rng = np.random.default_rng(seed)
    return DRRImage(pixels=rng.uniform(0, 1, size=(150, 150)))


def test_augment_disabled_is_replicate_and_standardize():
    image = drr_fixture()
    params = AugmentationParams(enabled=False)
    out = augment(image, params, np.random.default_rng(0))
    assert out.shape == (3, 150, 150)
    assert out.dtype == np.float32
    for c in range(3):
        want = (image.pixels - params.normalization_mean[c]) / params.normalization_std[c]
        assert np.allclose(out[c], want, atol=1e-6)


def test_augment_identity_settings_match_disabled():
    # Every random step tuned to a no-op leaves only the deterministic tail.
    image = drr_fixture()
    identity = AugmentationParams(rotation_limit_deg=0.0, blur_limit=(1, 1),
                                  brightness_limit=(0.0, 0.0),
                                  contrast_limit=(0.0, 0.0), holes=(0, 0))
    off = AugmentationParams(enabled=False)
    got = augment(image, identity, np.random.default_rng(5))
    want = augment(image, off, np.random.default_rng(99))
    assert np.allclose(got, want, atol=1e-6)


def test_augment_deterministic_per_seed():
    image = drr_fixture()
    params = AugmentationParams()
    a = augment(image, params, np.random.default_rng(7))
    b = augment(image, params, np.random.default_rng(7))
    c = augment(image, params, np.random.default_rng(8))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_augment_hole_masking_counts():
    # On a constant 0.5 image with all other steps disabled, zeros can only
    # come from the masks: between one and ten 8x8 holes worth of pixels.
    image = DRRImage(pixels=np.full((150, 150), 0.5))
    params = AugmentationParams(rotation_limit_deg=0.0, blur_limit=(1, 1),
                                brightness_limit=(0.0, 0.0),
                                contrast_limit=(0.0, 0.0), holes=(5, 10))
    out = augment(image, params, np.random.default_rng(11))
    zero_value = (0.0 - params.normalization_mean[0]) / params.normalization_std[0]
    n_zero = int(np.isclose(out[0], zero_value).sum())
    assert 64 <= n_zero <= 10 * 64


def test_augment_output_bounded_by_standardized_range():
    image = drr_fixture(seed=13)
    params = AugmentationParams()
    out = augment(image, params, np.random.default_rng(4))
    lo = min((0.0 - m) / s for m, s in zip(params.normalization_mean,
                                           params.normalization_std))
    hi = max((1.0 - m) / s for m, s in zip(params.normalization_mean,
                                           params.normalization_std))
    assert out.min() >= lo - 1e-6
    assert out.max() <= hi + 1e-6


def test_augmentation_params_validation():
    with pytest.raises(ValueError):
        AugmentationParams(rotation_limit_deg=-1.0)
    with pytest.raises(ValueError):
        AugmentationParams(blur_limit=(9, 1))
    with pytest.raises(ValueError):
        AugmentationParams(blur_limit=(0, 9))
    with pytest.raises(ValueError):
        AugmentationParams(holes=(-1, 5))
    with pytest.raises(ValueError):
        AugmentationParams(hole_size=0)


# ---------------------------------------------------------------------------
# End-to-end rendering and files.


def test_render_phantom_properties():
    volume, label, landmarks = generate_phantom(spec_for_class(1, seed=41))
    image = render_drr(volume, landmarks.right_fhc, patient_id="p1")
    assert image.pixels.shape == (150, 150)
    assert not image.padded
    assert image.pixels.min() >= 0.0 and image.pixels.max() <= 1.0
    assert image.patient_id == "p1"


def test_save_load_round_trip(tmp_path):
    volume, label, landmarks = generate_phantom(spec_for_class(3, seed=43))
    image = render_drr(volume, landmarks.right_fhc, patient_id="p7")
    path = tmp_path / "p7_right.png"
    save_drr(image, path, label)
    loaded, loaded_label = load_drr(path)
    # 16-bit quantization bounds the round-trip error.
    assert np.allclose(loaded.pixels, image.pixels, atol=0.5 / 65535 + 1e-9)
    assert loaded.patient_id == "p7"
    assert loaded.side == "right"
    assert not loaded.padded
    assert loaded_label == label


def test_load_without_sidecar(tmp_path):
    image = drr_fixture()
    path = tmp_path / "bare.png"
    save_drr(image, path)
    path.with_suffix(".json").unlink()
    loaded, label = load_drr(path)
    assert label is None
    assert loaded.pixels.shape == (150, 150)

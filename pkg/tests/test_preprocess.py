from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage, stats

from rawbrain.errors import PreprocessError
from rawbrain.nifti import Volume, read_nifti
from rawbrain.phantom import PhantomParams, generate_phantom
from rawbrain.preprocess import (RESOLUTIONS, AugmentConfig, BBox, augment_random_crop, compute_bbox, crop,
                                 draw_crop, get_resolution, minimal_preprocess, otsu_threshold, resample_array,
                                 resample_trilinear, source_coords, threshold_mask)
from rawbrain.tensor import Tensor

DATA = Path(__file__).parent / "data"


def test_resolutions():
    assert RESOLUTIONS["high"].grid == (136, 168, 136)
    assert RESOLUTIONS["medium"].grid == (68, 84, 68)
    assert RESOLUTIONS["low"].grid == (34, 42, 34)
    hi = np.array(RESOLUTIONS["high"].grid)
    assert np.all(hi // 2 == RESOLUTIONS["medium"].grid) and np.all(hi // 4 == RESOLUTIONS["low"].grid)
    with pytest.raises(PreprocessError):
        get_resolution("ultra")


def test_bbox_full_volume():
    assert compute_bbox(np.ones((3, 4, 5))) == BBox((0, 0, 0), (2, 3, 4))


def test_bbox_all_zero_errors():
    with pytest.raises(PreprocessError):
        compute_bbox(np.zeros((3, 3, 3)))


def test_bbox_matches_phantom_analytic_box():
    params = PhantomParams(noise_sigma=0.0)
    for shift in [(0, 0, 0), (2, -3, 1)]:
        rng = np.random.default_rng(0)
        vol = generate_phantom(35.0, params, rng, translate=False)
        data = np.roll(vol.data, shift, axis=(0, 1, 2))
        lo, hi = params.analytic_bbox(shift)
        assert compute_bbox(data) == BBox(lo, hi)


def test_source_coords_pixel_centers():
    np.testing.assert_allclose(source_coords(4, 2), [0.5, 2.5])
    np.testing.assert_allclose(source_coords(2, 4), [-0.25, 0.25, 0.75, 1.25])
    np.testing.assert_array_equal(source_coords(5, 5), np.arange(5))


def test_identity_resample_is_bit_exact():
    data = np.random.default_rng(1).standard_normal((5, 6, 7)).astype(np.float32)
    out = resample_trilinear(Volume(data, (1.0, 2.0, 3.0)), (5, 6, 7))
    assert out.data.tobytes() == data.tobytes()
    assert out.spacing == (1.0, 2.0, 3.0)


@pytest.mark.parametrize("target", [(1, 1, 1), (3, 9, 4), (10, 2, 17)])
def test_constant_preserved(target):
    out = resample_array(np.full((4, 5, 6), 2.5), target)
    assert out.shape == target
    assert np.all(out == 2.5)


def test_spacing_rescaled():
    out = resample_trilinear(Volume(np.ones((10, 20, 30), np.float32), (1.0, 1.0, 2.0)), (5, 40, 30))
    assert out.spacing == (2.0, 0.5, 2.0)


def test_affine_field_reproduced_at_interior_points():
    src = (12, 15, 10)
    x, y, z = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in src], indexing="ij")
    f = lambda x, y, z: 2 * x + 3 * y - z + 1  # noqa: E731
    dst = (17, 9, 23)
    out = resample_array(f(x, y, z), dst)
    cx, cy, cz = (source_coords(n, m) for n, m in zip(src, dst))
    gx, gy, gz = np.meshgrid(cx, cy, cz, indexing="ij")
    want = f(gx, gy, gz)
    inside = ((gx >= 0) & (gx <= src[0] - 1) & (gy >= 0) & (gy <= src[1] - 1) & (gz >= 0) & (gz <= src[2] - 1))
    assert inside.sum() > 0.5 * inside.size
    rel = np.abs(out - want)[inside] / np.maximum(np.abs(want[inside]), 1.0)
    assert rel.max() < 1e-5


def test_resample_matches_scipy_oracle():
    data = np.random.default_rng(2).random((9, 7, 11))
    dst = (5, 13, 6)
    axes = [np.clip(source_coords(n, m), 0, n - 1) for n, m in zip(data.shape, dst)]
    want = ndimage.map_coordinates(data, np.meshgrid(*axes, indexing="ij"), order=1, mode="nearest")
    np.testing.assert_allclose(resample_array(data, dst), want, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(*[st.integers(1, 7)] * 3), elements=st.floats(-100, 100, width=32)),
       st.tuples(*[st.integers(1, 9)] * 3))
def test_resample_preserves_value_bounds(data, target):
    out = resample_array(data, target)
    assert out.min() >= data.min() and out.max() <= data.max()


def test_minimal_preprocess_output_grid_and_range():
    vol = generate_phantom(50.0, PhantomParams(), np.random.default_rng(3))
    for name, res in RESOLUTIONS.items():
        if name == "high":
            continue
        x = minimal_preprocess(vol, name)
        assert isinstance(x, Tensor) and x.dtype == np.float32
        assert x.shape == (1, 1) + res.grid
        assert x.data.min() == 0.0 and x.data.max() == 1.0


def test_minimal_preprocess_intensity_scale_invariant():
    vol = generate_phantom(30.0, PhantomParams(), np.random.default_rng(4))
    scaled = Volume(vol.data * 3.0, vol.spacing)
    a = minimal_preprocess(vol, "low").data
    b = minimal_preprocess(scaled, "low").data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_minimal_preprocess_translation_consistent():
    params = PhantomParams()
    vol = generate_phantom(44.0, params, np.random.default_rng(5), translate=False)
    base = minimal_preprocess(vol, "low").data
    for shift in [(3, 0, 0), (-2, 4, 1), (0, -4, -3)]:
        moved = Volume(np.roll(vol.data, shift, axis=(0, 1, 2)), vol.spacing)
        np.testing.assert_allclose(minimal_preprocess(moved, "low").data, base, atol=1e-5)


def test_minimal_preprocess_golden_fixture():
    vol = read_nifti(DATA / "phantom_age40.nii.gz")
    got = minimal_preprocess(vol, "low").data[0, 0]
    assert got.tobytes() == np.load(DATA / "golden_low.npy").tobytes()


def test_crop_returns_box_contents():
    data = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
    box = BBox((1, 0, 2), (2, 1, 4))
    np.testing.assert_array_equal(crop(Volume(data), box).data, data[1:3, 0:2, 2:5])
    assert box.shape == (2, 2, 3)


def test_augment_fraction_one_is_identity():
    x = np.random.default_rng(6).random((1, 1, 8, 9, 7)).astype(np.float32)
    out = augment_random_crop(Tensor(x), AugmentConfig(1.0, 1.0), np.random.default_rng(0))
    assert out.data.tobytes() == x.tobytes()


def test_augment_keeps_shape_and_bounds():
    x = np.random.default_rng(7).random((1, 1, 34, 42, 34)).astype(np.float32)
    rng = np.random.default_rng(1)
    for _ in range(5):
        out = augment_random_crop(x, AugmentConfig(), rng)
        assert out.shape == x.shape and out.dtype == x.dtype
        assert out.min() >= x.min() and out.max() <= x.max()


def test_augment_is_seed_deterministic():
    x = np.random.default_rng(8).random((1, 1, 10, 12, 10)).astype(np.float32)
    a = augment_random_crop(x, AugmentConfig(), np.random.default_rng(42))
    b = augment_random_crop(x, AugmentConfig(), np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()


def test_augment_recorded_draw_sequence():
    # draws frozen from a verified run of seed 2024 on a 34x42x34 grid
    draws = draw_crop((34, 42, 34), AugmentConfig(), np.random.default_rng(2024))
    assert [(s, o) for _, s, o in draws] == [(33, 0), (39, 0), (33, 1)]
    np.testing.assert_allclose([f for f, _, _ in draws], [0.9675831337981282, 0.9309452030881692, 0.9799466096774834],
                               rtol=1e-15)


def test_augment_crop_matches_explicit_crop_and_resample():
    x = np.random.default_rng(9).random((1, 1, 20, 20, 20))
    draws = draw_crop(x.shape[2:], AugmentConfig(), np.random.default_rng(5))
    sl = tuple(slice(o, o + s) for _, s, o in draws)
    want = resample_array(x[(Ellipsis,) + sl], (20, 20, 20))
    got = augment_random_crop(x, AugmentConfig(), np.random.default_rng(5))
    np.testing.assert_array_equal(got, want)


def test_augment_fractions_uniform_ks():
    rng = np.random.default_rng(10)
    cfg = AugmentConfig()
    fracs = np.array([f for _ in range(10**4 // 3 + 1) for f, _, _ in draw_crop((34, 42, 34), cfg, rng)])[:10**4]
    assert stats.kstest(fracs, stats.uniform(loc=0.9, scale=0.1).cdf).pvalue > 0.01


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(0.0, 1.0)
    with pytest.raises(ValueError):
        AugmentConfig(0.95, 0.9)


def _otsu_oracle(values, bins=256):
    """Direct within-class-variance minimization over every split of the histogram."""
    counts, edges = np.histogram(values, bins=bins, range=(values.min(), values.max()))
    centers = (edges[:-1] + edges[1:]) / 2
    best, best_k = np.inf, None
    for k in range(1, bins):
        c0, c1 = counts[:k], counts[k:]
        if c0.sum() == 0 or c1.sum() == 0:
            continue
        v0 = np.average((centers[:k] - np.average(centers[:k], weights=c0)) ** 2, weights=c0) if c0.sum() else 0
        v1 = np.average((centers[k:] - np.average(centers[k:], weights=c1)) ** 2, weights=c1)
        within = c0.sum() * v0 + c1.sum() * v1
        if within < best - 1e-9 * abs(best if np.isfinite(best) else 1):
            best, best_k = within, k
    return edges[best_k]


def test_otsu_bimodal_matches_exhaustive_oracle():
    rng = np.random.default_rng(11)
    values = np.concatenate([rng.normal(10, 2, 4000), rng.normal(60, 5, 6000)])
    t = otsu_threshold(values)
    assert 16 < t < 45
    assert t == pytest.approx(_otsu_oracle(values), abs=1e-9)


def test_otsu_constant_errors():
    with pytest.raises(PreprocessError):
        otsu_threshold(np.ones(10))
    with pytest.raises(PreprocessError):
        threshold_mask(Volume(np.full((4, 4, 4), 3.0, np.float32)))


def test_threshold_mask_keeps_masked_support():
    vol = generate_phantom(30.0, PhantomParams(noise_sigma=0.0), np.random.default_rng(12), translate=False)
    out = threshold_mask(vol)
    assert np.array_equal(out.data != 0, vol.data != 0)


def test_threshold_mask_strips_background_and_islands():
    rng = np.random.default_rng(13)
    vol = generate_phantom(30.0, PhantomParams(noise_sigma=0.0), rng, translate=False)
    noisy = vol.data + rng.uniform(0.0, 0.1, vol.data.shape).astype(np.float32)
    noisy[1:3, 1:3, 1:3] = 1.0  # bright island away from the brain
    out = threshold_mask(Volume(noisy, vol.spacing))
    assert np.all(out.data[1:3, 1:3, 1:3] == 0)
    assert np.array_equal(out.data != 0, vol.data > 0.5)

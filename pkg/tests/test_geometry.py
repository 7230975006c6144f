import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from stereomono.geometry import (DegeneratePoint, Homography, Image, Intrinsics, SingularHomography,
                                 apply_homography, compose, corner_error, homography_from_params, invert,
                                 params_of, rotation_homography, sample_bilinear, warp_image, warp_map)

IDENTITY = (1, 0, 0, 0, 1, 0, 0, 0)


def smooth_image(h=48, w=64):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return Image(0.5 + 0.3 * np.sin(xs / 9.0) * np.cos(ys / 11.0))


def test_identity_params():
    assert np.array_equal(homography_from_params(IDENTITY).m, np.eye(3))


def test_translation_maps_origin():
    h = homography_from_params((1, 0, 5, 0, 1, -3, 0, 0))
    assert np.allclose(apply_homography(h, (0, 0)), (5, -3))


def test_identity_point():
    assert np.allclose(apply_homography(Homography.identity(), (10, 20)), (10, 20))


def test_perspective_division():
    h = Homography(np.array([[1, 0, 0], [0, 1, 0], [0.001, 0, 1.0]]))
    x, y = apply_homography(h, (100, 0))
    assert x == pytest.approx(100 / 1.1, abs=1e-12) and y == 0


def test_degenerate_point():
    h = Homography(np.array([[1, 0, 0], [0, 1, 0], [0.01, 0, 1.0]]))
    with pytest.raises(DegeneratePoint):
        apply_homography(h, (-100, 5))


def test_m22_renormalized_and_readonly():
    h = Homography(2 * np.eye(3))
    assert h.m[2, 2] == 1.0
    with pytest.raises(ValueError):
        h.m[0, 0] = 3.0


def test_singular_inverse():
    with pytest.raises(SingularHomography):
        invert(homography_from_params((1, 2, 0, 2, 4, 0, 0, 0)))


params8 = st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=8, max_size=8).map(
    lambda v: np.array(IDENTITY, dtype=float) + np.array(v) * [1, 1, 20, 1, 1, 20, 1e-3, 1e-3])


@given(params8)
def test_params_roundtrip(p):
    h = homography_from_params(p)
    if not h.is_invertible():
        return
    assert np.array_equal(params_of(h), p)


@given(params8, params8)
@settings(max_examples=30)
def test_compose_matches_sequential_application(pa, pb):
    a, b = homography_from_params(pa), homography_from_params(pb)
    ab = compose(a, b)
    rng = np.random.default_rng(0)
    for pt in rng.uniform(0, 64, size=(100, 2)):
        try:
            expect = apply_homography(a, apply_homography(b, pt))
            got = apply_homography(ab, pt)
        except DegeneratePoint:
            continue
        assert np.allclose(got, expect, atol=1e-9 * max(1.0, np.abs(expect).max()))


@given(params8)
@settings(max_examples=50)
def test_group_inverse(p):
    h = homography_from_params(p)
    if abs(np.linalg.det(h.m)) < 1e-3:
        return
    assert np.allclose(compose(h, invert(h)).m, np.eye(3), atol=1e-9)


def test_warp_identity_bit_exact():
    img = smooth_image()
    out = warp_image(img, Homography.identity())
    assert np.array_equal(out.samples, img.samples) and out.valid.all()


def test_warp_translation_invalidates_left_columns():
    img = smooth_image()
    out = warp_image(img, homography_from_params((1, 0, 5, 0, 1, 0, 0, 0)))
    assert not out.valid[:, :5].any() and out.valid[:, 5:].all()
    assert np.allclose(out.samples[:, 5:], img.samples[:, :-5])


def test_warp_roundtrip_interior():
    img = smooth_image()
    h = rotation_homography("inplane", np.deg2rad(4), Intrinsics.default_for(64, 48))
    back = warp_image(warp_image(img, h), invert(h))
    interior = back.valid.copy()
    interior[:2] = interior[-2:] = False
    interior[:, :2] = interior[:, -2:] = False
    assert interior.sum() > 1000
    assert np.abs(back.samples - img.samples)[interior].max() < 0.02


def test_bilinear_exact_on_affine_images():
    ys, xs = np.mgrid[0:40, 0:50].astype(float)
    a, b, c = 0.013, -0.007, 0.4
    img = Image(a * xs + b * ys + c)
    h = homography_from_params((0.98, 0.05, 1.3, -0.04, 1.01, 0.7, 1e-4, -2e-4))
    out = warp_image(img, h)
    hinv = invert(h)
    for y in range(3, 37):
        for x in range(3, 47):
            if out.valid[y, x]:
                sx, sy = apply_homography(hinv, (x, y))
                assert out.samples[y, x] == pytest.approx(a * sx + b * sy + c, abs=1e-9)


def test_sampling_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(12, 15))
    valid = rng.uniform(size=img.shape) > 0.1
    sx = rng.uniform(-1, 15, size=(20, 20))
    sy = rng.uniform(-1, 12, size=(20, 20))
    sx[0, :5] = np.arange(5)  # integer coordinates only touch one pixel
    sy[0, :5] = 3
    out, ok = sample_bilinear(img, valid, sx, sy)
    for i in range(20):
        for j in range(20):
            ref = oracles.bilinear(img, valid, sx[i, j], sy[i, j])
            assert ok[i, j] == (ref is not None)
            if ref is not None:
                assert out[i, j] == pytest.approx(ref, abs=1e-12)


def test_warp_never_clamps():
    img = Image(np.ones((10, 10)))
    out = warp_image(img, homography_from_params((1, 0, 0.5, 0, 1, 0, 0, 0)))
    assert not out.valid[:, 0].any()


def test_warp_map_carries_nan():
    z = np.full((10, 10), 2.0)
    z[4, 4] = np.nan
    out = warp_map(z, homography_from_params((1, 0, 1, 0, 1, 0, 0, 0)))
    assert np.isnan(out[4, 5]) and np.isnan(out[:, 0]).all() and out[0, 5] == 2.0


@pytest.mark.parametrize("axis", ["inplane", "pitch", "yaw"])
def test_zero_rotation_is_identity(axis):
    h = rotation_homography(axis, 0.0, Intrinsics.default_for(256, 256))
    assert np.allclose(h.m, np.eye(3), atol=1e-15)


@pytest.mark.parametrize("deg", [-30, -7, 3, 45, 80])
def test_inplane_fixes_principal_point(deg):
    k = Intrinsics(500, 500, 128, 128)
    h = rotation_homography("inplane", np.deg2rad(deg), k)
    assert np.allclose(apply_homography(h, (128, 128)), (128, 128), atol=1e-9)


def test_inplane_7deg_corner():
    # hand evaluation of K Rz(7 deg) K^-1 at (0, 0), f=500, c=(128, 128)
    h = rotation_homography("inplane", np.deg2rad(7), Intrinsics(500, 500, 128, 128))
    assert np.allclose(apply_homography(h, (0, 0)), (16.553368545769644, -14.645183365948128), atol=1e-9)


def test_rotation_angle_precondition():
    with pytest.raises(ValueError):
        rotation_homography("pitch", np.pi / 2, Intrinsics.default_for(64, 64))


def test_inplane_principal_pixel_preserved():
    # odd size so the principal point is a pixel center
    ys, xs = np.mgrid[0:65, 0:65].astype(float)
    img = Image(0.5 + 0.4 * np.sin(xs / 5) * np.cos(ys / 7))
    k = Intrinsics.default_for(65, 65)
    out = warp_image(img, rotation_homography("inplane", np.deg2rad(11), k))
    assert out.samples[32, 32] == pytest.approx(img.samples[32, 32], abs=1e-6)


def test_default_intrinsics():
    k = Intrinsics.default_for(320, 240)
    assert (k.fx, k.fy, k.cx, k.cy) == (320, 320, 159.5, 119.5)


def test_corner_error_translation():
    a = homography_from_params((1, 0, 3, 0, 1, 4, 0, 0))
    assert corner_error(a, Homography.identity(), 100, 100) == pytest.approx(5.0)


def test_image_rejects_nonfinite():
    with pytest.raises(ValueError):
        Image(np.array([[0.0, np.nan]]))


def test_gray_luminance():
    img = Image(np.ones((2, 2, 3)) * [1.0, 0.0, 0.0])
    assert np.allclose(img.gray(), 0.299)

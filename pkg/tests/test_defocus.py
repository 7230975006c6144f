import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stereomono.defocus import (DefocusModel, InvalidRange, MonoSimSpec, NonPositiveDepth, ObjectInsideFocalLength,
                                PsiOutOfPhysicalRange, PsiRange, depth_from_psi, phase_coded_confidence,
                                psi_from_depth, psi_quantize, simulate_mono_depth, thin_lens_image_distance,
                                valid_depth_range)

FAR = DefocusModel.from_coefficient(9.0, z_n=1.5)
NEAR = DefocusModel.from_coefficient(9.0, z_n=0.7)


def test_coefficient_definition():
    m = DefocusModel()
    assert m.C == pytest.approx(math.pi * m.R ** 2 / m.lam, rel=1e-12)
    assert m.C == pytest.approx(9.0, rel=1e-12)


def test_focus_gives_zero_psi():
    assert psi_from_depth(FAR, 1.5) == 0.0
    assert depth_from_psi(NEAR, 0.0) == pytest.approx(0.7, rel=1e-15)


@pytest.mark.parametrize("z, psi", [(0.5625, 10.0), (4.5, -4.0)])
def test_psi_hand_values(z, psi):
    assert psi_from_depth(FAR, z) == pytest.approx(psi, abs=1e-12)


def test_sign_convention():
    assert psi_from_depth(FAR, 1.0) > 0 > psi_from_depth(FAR, 3.0)


def test_depth_from_psi_near_end():
    assert depth_from_psi(NEAR, 10.0) == pytest.approx(0.39375, abs=1e-12)


def test_roundtrip_random_depths():
    z = np.random.default_rng(0).uniform(0.3, 10, 1000)
    back = depth_from_psi(FAR, psi_from_depth(FAR, z))
    assert np.max(np.abs(back - z) / z) < 1e-9


@pytest.mark.parametrize("m, expect", [(FAR, (0.5625, 4.5)), (NEAR, (0.39375, 1.0161290322580645))])
def test_valid_depth_range(m, expect):
    assert valid_depth_range(m, PsiRange()) == pytest.approx(expect, rel=1e-12)


def test_degenerate_range():
    with pytest.raises(InvalidRange):
        PsiRange(0, 0)


def test_nonpositive_depth():
    with pytest.raises(NonPositiveDepth):
        psi_from_depth(FAR, 0.0)


def test_psi_beyond_infinity():
    with pytest.raises(PsiOutOfPhysicalRange):
        depth_from_psi(FAR, -6.0)  # -C/z_n = -6


def test_range_precondition():
    with pytest.raises(PsiOutOfPhysicalRange):
        valid_depth_range(FAR, PsiRange(-7, 10))


def test_strictly_monotone():
    z = np.linspace(0.3, 10, 500)
    assert np.all(np.diff(psi_from_depth(FAR, z)) < 0)
    psi = np.linspace(-5.9, 20, 500)
    assert np.all(np.diff(depth_from_psi(FAR, psi)) < 0)


def test_thin_lens():
    m = DefocusModel(f=0.016)
    assert thin_lens_image_distance(m, 1.5) == pytest.approx(0.016172506738544475, rel=1e-12)
    assert thin_lens_image_distance(m, 0.032) == pytest.approx(0.032, rel=1e-12)
    assert abs(thin_lens_image_distance(m, 1e6 * 0.016) - 0.016) / 0.016 < 2e-6
    with pytest.raises(ObjectInsideFocalLength):
        thin_lens_image_distance(m, 0.016)


def test_quantize():
    assert psi_quantize(0.0, 15) == 0.0
    assert psi_quantize(2.5, 15) == 2.0  # tie goes down
    out = psi_quantize(np.linspace(-4, 10, 50), 2)
    assert set(np.unique(out)) <= {-4.0, 10.0}
    with pytest.raises(ValueError):
        psi_quantize(0.0, 1)


@given(st.floats(-4, 10), st.integers(2, 40))
def test_quantize_nearest(psi, levels):
    q = psi_quantize(psi, levels)
    grid = np.linspace(-4, 10, levels)
    assert abs(q - psi) <= np.min(np.abs(grid - psi)) + 1e-12


def test_noiseless_identity_in_range():
    gt = np.random.default_rng(2).uniform(0.6, 4.4, (32, 32))
    z, conf = simulate_mono_depth(gt, FAR, PsiRange(), MonoSimSpec())
    assert np.max(np.abs(z - gt)) <= 1e-9
    assert np.all((conf >= 0.05) & (conf <= 1))


def test_far_plane_invalid():
    z, conf = simulate_mono_depth(np.full((8, 8), 6.0), NEAR, PsiRange(), MonoSimSpec())
    assert np.isnan(z).all() and np.all(conf == 0)


def test_saturate_keeps_in_range_values():
    gt = np.random.default_rng(3).uniform(0.3, 6, (32, 32))
    spec = MonoSimSpec(noise_sigma_psi=0.5, rng_seed=9)
    a, _ = simulate_mono_depth(gt, NEAR, PsiRange(), spec)
    b, cb = simulate_mono_depth(gt, NEAR, PsiRange(), MonoSimSpec(noise_sigma_psi=0.5, rng_seed=9,
                                                                  out_of_range="saturate"))
    inside = np.isfinite(a)
    assert np.array_equal(a[inside], b[inside]) and np.isfinite(b).all()
    assert np.all(cb[~inside] == 0)


def test_image_based_affine():
    spec = MonoSimSpec(mode="image_based", relative_scale=2.0, relative_shift=0.1, relative_noise=0.0)
    z, conf = simulate_mono_depth(np.ones((8, 8)), FAR, PsiRange(), spec)
    assert np.allclose(z, 2.1) and np.all(conf == 0.5)


def test_deterministic_noise():
    gt = np.full((16, 16), 1.2)
    spec = MonoSimSpec(noise_sigma_psi=0.3, rng_seed=5)
    a, _ = simulate_mono_depth(gt, FAR, PsiRange(), spec)
    b, _ = simulate_mono_depth(gt, FAR, PsiRange(), spec)
    assert np.array_equal(a, b, equal_nan=True)


def test_confidence_peak_and_monotone():
    r = PsiRange()
    psi = np.linspace(r.psi_min, r.psi_max, 141)
    c = phase_coded_confidence(psi, r)
    k = int(np.argmax(c))
    assert psi[k] == pytest.approx(r.mid)
    assert np.all(np.diff(c[:k + 1]) >= 0) and np.all(np.diff(c[k:]) <= 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        MonoSimSpec(noise_sigma_psi=-1)
    with pytest.raises(ValueError):
        MonoSimSpec(relative_scale=0)

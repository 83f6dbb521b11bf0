import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evovision.genotype import Genome, MorphologicalGenes, OpticalGenes
from evovision.metrics import (bootstrap_ci, cpd, fit_power_law, fov_from_geometry,
                               image_quality, mtf, psnr, scaling_reports, ssim)
from evovision.optics import PsfKernel, delta_kernel, psf_for_genome


def single_eye(fov, res):
    return Genome(morphological=MorphologicalGenes(
        num_eyes=1, placement_range=45.0, fov=fov, resolution_w=res, resolution_h=res))


class TestCpd:
    def test_fov45_res15(self):
        # min term is 45/15 = 3 degrees -> 1/6 cycles per degree
        assert cpd(single_eye(45.0, 15)) == pytest.approx(1.0 / 6.0, abs=1e-12)

    def test_one_receptor_spans_field(self):
        assert cpd(single_eye(90.0, 1)) == pytest.approx(1.0 / 180.0, abs=1e-12)

    def test_fov_from_geometry_right_angle(self):
        assert fov_from_geometry(2.0, 1.0) == pytest.approx(90.0, abs=1e-12)

    def test_zero_resolution_rejected(self):
        g = Genome(morphological=MorphologicalGenes(resolution_w=0, resolution_h=0))
        with pytest.raises(ValueError):
            cpd(g)

    def test_multi_eye_uses_lon_range_term(self):
        g = Genome(morphological=MorphologicalGenes(
            num_eyes=10, placement_range=135.0, fov=45.0, resolution_w=4, resolution_h=1))
        lon_deg = math.degrees(0.047 * 10 / 0.2)
        expected = 1.0 / (2.0 * min(lon_deg / 9.0, 45.0 / 4.0))
        assert cpd(g) == pytest.approx(expected, rel=1e-12)

    @given(res=st.integers(1, 31), fov=st.floats(1.0, 99.0))
    @settings(max_examples=120, deadline=None, derandomize=True)
    def test_monotone_in_resolution_and_fov(self, res, fov):
        base = cpd(single_eye(fov, res))
        assert cpd(single_eye(fov, res + 1)) >= base - 1e-15
        assert cpd(single_eye(fov + 1.0, res)) <= base + 1e-15

    def test_monotonicity_over_random_grid(self, rng):
        # acceptance criterion 3: 1e3-point random grid
        fovs = rng.uniform(1.0, 100.0, size=1000)
        ress = rng.integers(1, 32, size=1000)
        for fov, res in zip(fovs, ress):
            up = cpd(single_eye(fov, int(res) + 1))
            down = cpd(single_eye(min(fov + rng.uniform(0.1, 5.0), 100.0), int(res)))
            base = cpd(single_eye(fov, int(res)))
            assert up >= base - 1e-15
            assert down <= base + 1e-15


class TestMtf:
    def test_delta_psf_gives_unit_mtf(self):
        curve = mtf(delta_kernel(9, 9))
        assert np.allclose(curve.contrast, 1.0, atol=1e-12)
        assert curve.contrast.shape[0] == 3

    def test_dc_is_one_and_bounded(self, rng):
        k = rng.uniform(0.0, 1.0, size=(3, 12, 12))
        k /= k.sum(axis=(1, 2), keepdims=True)
        curve = mtf(PsfKernel(channels=k, wavelengths_nm=(640.0, 550.0, 460.0),
                              pixel_pitch_mm=0.1))
        assert np.allclose(curve.contrast[:, 0], 1.0, atol=1e-12)
        assert curve.contrast.min() >= 0.0
        assert curve.contrast.max() <= 1.0 + 1e-12

    def test_gaussian_psf_matches_analytic_transform(self):
        n, sigma = 64, 2.0
        idx = np.arange(n) - n // 2
        xs, ys = np.meshgrid(idx, idx, indexing="ij")
        g = np.exp(-(xs**2 + ys**2) / (2.0 * sigma**2))
        g /= g.sum()
        curve = mtf(PsfKernel(channels=g[None], wavelengths_nm=(550.0,),
                              pixel_pitch_mm=1.0))
        # cells have unit pitch: frequencies in cycles/cell, Nyquist = 0.5
        sel = (curve.frequencies > 0) & (curve.frequencies <= 0.25)
        expected = np.exp(-2.0 * np.pi**2 * sigma**2 * curve.frequencies[sel] ** 2)
        assert np.allclose(curve.contrast[0, sel], expected, rtol=0.01, atol=1e-4)

    def test_wider_aperture_psf_has_lower_mtf(self):
        def disc(radius):
            idx = np.arange(33) - 16
            xs, ys = np.meshgrid(idx, idx, indexing="ij")
            d = ((xs**2 + ys**2) <= radius**2).astype(float)
            return d / d.sum()

        narrow = mtf(PsfKernel(channels=disc(3.0)[None], wavelengths_nm=(550.0,),
                               pixel_pitch_mm=1.0))
        wide = mtf(PsfKernel(channels=disc(8.0)[None], wavelengths_nm=(550.0,),
                             pixel_pitch_mm=1.0))
        sel = slice(1, 6)  # low-frequency bins below the first zero
        assert np.all(wide.contrast[0, sel] < narrow.contrast[0, sel])


class TestImageQuality:
    def test_delta_is_maximal_and_quadratic_in_aperture(self):
        k = delta_kernel(12, 12)
        full = image_quality(k, 1.0)
        assert image_quality(k, 0.1) == pytest.approx(0.01 * full, rel=1e-12)
        blurry = np.full((3, 12, 12), 1.0 / 144.0)
        blurred = PsfKernel(channels=blurry, wavelengths_nm=k.wavelengths_nm,
                            pixel_pitch_mm=k.pixel_pitch_mm)
        assert image_quality(blurred, 1.0) < full

    def test_monotone_in_aperture(self):
        k = delta_kernel(8, 8)
        values = [image_quality(k, a) for a in (0.1, 0.3, 0.6, 1.0)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_evolved_lens_beats_pinhole(self):
        # ordering drives the optics story: lens at wide aperture vs tiny pinhole
        bump = tuple((np.pad(np.ones((2, 2)), 1) * 1.0).ravel())
        morph = MorphologicalGenes(num_eyes=1, resolution_w=11, resolution_h=11)
        lens = Genome(morphological=morph,
                      optical=OpticalGenes(enabled=True, phase_mask=bump,
                                           refractive_index=1.5, aperture_fraction=0.8))
        pinhole = Genome(morphological=morph,
                         optical=OpticalGenes(enabled=True, phase_mask=(0.0,) * 16,
                                              refractive_index=1.5, aperture_fraction=0.05))
        iq_lens = image_quality(psf_for_genome(lens), 0.8)
        iq_pin = image_quality(psf_for_genome(pinhole), 0.05)
        assert iq_lens > iq_pin


class TestPsnrSsim:
    def test_identical_images(self, rng):
        img = rng.uniform(size=(32, 32, 3))
        assert psnr(img, img) == math.inf
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_gaussian_noise_psnr(self):
        rng = np.random.default_rng(7)
        ref = rng.uniform(0.2, 0.8, size=(100, 100))
        noisy = ref + rng.normal(0.0, 0.1, size=ref.shape)
        assert psnr(noisy, ref) == pytest.approx(20.0, abs=0.2)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))
        with pytest.raises(ValueError):
            ssim(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_constant_vs_structured_ssim_near_zero(self):
        rng = np.random.default_rng(3)
        structured = (rng.uniform(size=(64, 64)) > 0.5).astype(float)
        constant = np.full_like(structured, structured.mean())
        assert abs(ssim(constant, structured)) < 0.1

    def test_noise_reduces_ssim(self):
        rng = np.random.default_rng(11)
        ref = rng.uniform(size=(64, 64))
        noisy = np.clip(ref + rng.normal(0.0, 0.2, size=ref.shape), 0.0, 1.0)
        assert 0.0 < ssim(noisy, ref) < 1.0


class TestPowerLaw:
    def test_exact_power_law_recovered(self):
        n = np.logspace(3, 5, 12)
        fit = fit_power_law(n, 0.01 * n**0.7)
        assert fit.coefficient == pytest.approx(0.01, abs=1e-9)
        assert fit.exponent == pytest.approx(0.7, abs=1e-9)
        assert fit.residual < 1e-12

    def test_constant_loss_gives_zero_exponent(self):
        n = np.array([10.0, 100.0, 1000.0])
        fit = fit_power_law(n, np.full(3, 0.25))
        assert fit.exponent == pytest.approx(0.0, abs=1e-12)
        assert fit.coefficient == pytest.approx(0.25, rel=1e-12)

    def test_navigation_study_constants_roundtrip(self):
        # the navigation study's fitted constants, synthesized then re-fit
        n = np.logspace(3, 6, 20)
        fit = fit_power_law(n, 9.50e-3 * n**0.69)
        assert fit.coefficient == pytest.approx(9.50e-3, rel=1e-9)
        assert fit.exponent == pytest.approx(0.69, abs=1e-9)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValueError):
            fit_power_law([1.0, 2.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            fit_power_law([1.0, 2.0, -3.0], [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            fit_power_law([1.0, 2.0, 3.0], [1.0, 0.0, 3.0])


class TestBootstrap:
    def test_identical_values_zero_width(self):
        lo, hi = bootstrap_ci([2.5] * 10)
        assert lo == hi == 2.5

    def test_interval_contains_sample_mean(self, rng):
        values = rng.normal(3.0, 1.0, size=40)
        lo, hi = bootstrap_ci(values, seed=1)
        assert lo <= values.mean() <= hi

    def test_deterministic_given_seed(self, rng):
        values = rng.normal(size=25)
        assert bootstrap_ci(values, seed=5) == bootstrap_ci(values, seed=5)

    def test_coverage_on_normal_data(self):
        # Monte-Carlo coverage of the 95% interval
        rng = np.random.default_rng(99)
        hits = 0
        trials = 1000
        for t in range(trials):
            sample = rng.normal(0.0, 1.0, size=100)
            lo, hi = bootstrap_ci(sample, resamples=500, seed=t)
            hits += lo <= 0.0 <= hi
        assert abs(hits / trials - 0.95) <= 0.02


class TestScalingReports:
    def test_ceiling_flagged_at_low_acuity(self):
        rows = []
        n_values = [1e3, 1e4, 1e5, 1e6]
        for n in n_values:
            rows.append(("detection", 0.5, n, 0.5 * n**-0.3))      # keeps improving
            rows.append(("detection", 0.05, n, max(0.5 * n**-0.3, 0.15)))  # hits floor
        reports = scaling_reports(rows)
        by_level = {r.cpd_level: r for r in reports}
        assert not by_level[0.5].ceiling
        assert by_level[0.05].ceiling

    def test_single_n_level_gets_no_ceiling_analysis(self):
        rows = [("navigation", 0.1, 1e3, 0.2)] * 3
        reports = scaling_reports(rows)
        assert len(reports) == 1
        assert math.isnan(reports[0].tail_improvement)
        assert not reports[0].ceiling

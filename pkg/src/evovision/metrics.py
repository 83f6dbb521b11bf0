"""Quantitative analysis of evolved vision systems.

Pure functions: angular acuity (cycles per degree), MTF curves with the Image
Quality figure, PSNR/SSIM against a pinhole reference, log-log power-law fits
with ceiling detection for the scaling sweeps, and bootstrap intervals for
population statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .genotype import BodyGeometry, DEFAULT_BODY, Genome
from .optics import PsfKernel

PSNR_CAP_DB = 99.0  # CSV sentinel for identical images
NOISE_FLOOR = 1e-2


@dataclass(frozen=True)
class MtfCurve:
    frequencies: np.ndarray       # cycles per mm, ascending, starts at DC
    contrast: np.ndarray          # (C, n_bins) in [0, 1], DC == 1
    noise_floor: float = NOISE_FLOOR

    def mean_channel(self) -> np.ndarray:
        return self.contrast.mean(axis=0)


@dataclass(frozen=True)
class PowerLawFit:
    coefficient: float   # c in L = c * N^alpha
    exponent: float      # alpha
    residual: float      # RMS residual in log space
    samples: int

    def predict(self, n) -> np.ndarray:
        return self.coefficient * np.asarray(n, dtype=float) ** self.exponent


def fov_from_geometry(sensor_size: float, focal_length: float) -> float:
    """Field of view in degrees: 2 * arctan(sensor / (2 * focal))."""
    return math.degrees(2.0 * math.atan(sensor_size / (2.0 * focal_length)))


def cpd(genome: Genome, body: BodyGeometry = DEFAULT_BODY,
        sensor_size: Optional[float] = None, focal_length: Optional[float] = None) -> float:
    """Cycles per degree: 1 / (2 * min(lon_range/(n-1), fov/resolution)).

    fov defaults to the genome's gene; passing sensor_size and focal_length
    derives it geometrically instead. lon_range (sensor_size * num_eyes, world
    units) is converted to degrees of arc at the body radius before the min;
    a single-eye agent uses the fov/resolution term alone.
    """
    m = genome.morphological
    resolution = max(m.resolution_w, m.resolution_h)
    if resolution < 1:
        raise ValueError("resolution must be positive")
    if sensor_size is not None and focal_length is not None:
        fov = fov_from_geometry(sensor_size, focal_length)
        eye_arc = sensor_size
    else:
        fov = m.fov
        eye_arc = body.eye_sensor_size
    per_receptor = fov / resolution
    if m.num_eyes > 1:
        lon_range_deg = math.degrees(eye_arc * m.num_eyes / body.body_radius)
        per_receptor = min(lon_range_deg / (m.num_eyes - 1), per_receptor)
    return 1.0 / (2.0 * per_receptor)


def mtf(psf: PsfKernel) -> MtfCurve:
    """Radially averaged |FFT| of each PSF channel, normalized to DC = 1.

    Annular bins are one frequency cell wide and labeled by the mean radial
    frequency of the cells they contain (the nominal k * df label overstates
    curved MTFs by a few percent); frequencies are cycles/mm from the pixel
    pitch.
    """
    c, kh, kw = psf.channels.shape
    n = max(kh, kw)
    fy = np.fft.fftfreq(kh, d=psf.pixel_pitch_mm)
    fx = np.fft.fftfreq(kw, d=psf.pixel_pitch_mm)
    fr = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    df = 1.0 / (n * psf.pixel_pitch_mm)
    bins = np.round(fr / df).astype(int)
    n_bins = bins.max() + 1
    counts = np.bincount(bins.ravel(), minlength=n_bins)
    occupied = counts > 0
    freqs = np.bincount(bins.ravel(), weights=fr.ravel(), minlength=n_bins)[occupied]
    freqs /= counts[occupied]

    contrast = np.empty((c, int(occupied.sum())))
    for ch in range(c):
        mag = np.abs(np.fft.fft2(psf.channels[ch]))
        dc = mag[0, 0]
        if dc <= 0:
            raise ValueError("PSF channel has no energy")
        sums = np.bincount(bins.ravel(), weights=(mag / dc).ravel(), minlength=n_bins)
        contrast[ch] = sums[occupied] / counts[occupied]
    return MtfCurve(frequencies=freqs, contrast=contrast)


def image_quality(psf: PsfKernel, aperture_fraction: float,
                  noise_floor: float = NOISE_FLOOR) -> float:
    """Area under the mean-channel MTF above the noise floor, times a^2.

    Uses the wave-resolution PSF when the kernel carries one: the coarse
    (H+1, W+1) grid samples the frequency axis too sparsely to separate a
    fully blurred eye from a moderately blurred one.
    """
    if psf.fine_channels is not None:
        psf = PsfKernel(channels=psf.fine_channels, wavelengths_nm=psf.wavelengths_nm,
                        pixel_pitch_mm=psf.fine_pitch_mm)
    curve = mtf(psf)
    mean = curve.mean_channel()
    useful = np.where(mean > noise_floor, mean, 0.0)
    return float(np.trapezoid(useful, curve.frequencies) * aperture_fraction**2)


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak SNR in dB at unit dynamic range; +inf for identical images."""
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _window_view(x: np.ndarray, win: int) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view
    return sliding_window_view(x, (win, win))


def ssim(image: np.ndarray, reference: np.ndarray, window: int = 8) -> float:
    """Mean SSIM over sliding uniform windows, unit dynamic range constants.

    Multi-channel inputs are averaged over per-channel SSIM. Images smaller
    than the window fall back to a single full-size window.
    """
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    if image.ndim == 3:
        return float(np.mean([ssim(image[..., ch], reference[..., ch], window)
                              for ch in range(image.shape[2])]))
    win = min(window, *image.shape)
    c1 = (0.01) ** 2
    c2 = (0.03) ** 2
    xw = _window_view(image, win).reshape(-1, win * win)
    yw = _window_view(reference, win).reshape(-1, win * win)
    mx = xw.mean(axis=1)
    my = yw.mean(axis=1)
    vx = xw.var(axis=1)
    vy = yw.var(axis=1)
    cov = (xw * yw).mean(axis=1) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(score.mean())


def fit_power_law(n_values: Sequence[float], losses: Sequence[float]) -> PowerLawFit:
    """Least squares on log L vs log N for L = c * N^alpha."""
    n = np.asarray(n_values, dtype=float)
    loss = np.asarray(losses, dtype=float)
    if n.size < 3:
        raise ValueError("need at least 3 samples")
    if np.any(n <= 0) or np.any(loss <= 0):
        raise ValueError("power-law fit requires positive N and L")
    log_n = np.log(n)
    log_l = np.log(loss)
    a = np.stack([log_n, np.ones_like(log_n)], axis=1)
    coef, *_ = np.linalg.lstsq(a, log_l, rcond=None)
    alpha, log_c = coef
    resid = log_l - a @ coef
    return PowerLawFit(coefficient=float(np.exp(log_c)), exponent=float(alpha),
                       residual=float(np.sqrt(np.mean(resid**2))), samples=int(n.size))


def bootstrap_ci(values: Sequence[float], level: float = 0.95, resamples: int = 2000,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean, seeded."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    means = values[idx].mean(axis=1)
    lo = (1.0 - level) / 2.0
    return (float(np.quantile(means, lo)), float(np.quantile(means, 1.0 - lo)))


# ---------------------------------------------------------------------------
# Scaling sweep analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingReport:
    task: str
    cpd_level: float
    fit: PowerLawFit
    ceiling: bool           # error stopped improving with N at this acuity
    tail_improvement: float


def scaling_reports(rows: Sequence[tuple[str, float, float, float]],
                    ceiling_epsilon: float = 0.05) -> list[ScalingReport]:
    """Per (task, cpd) power-law fits over N, flagging saturation ceilings.

    rows: (task, cpd, N, error). A ceiling is flagged when the best error over
    the larger-N half improves on the smaller-N half by less than
    ceiling_epsilon (relative). Levels with a single N sample get no ceiling
    analysis (tail_improvement = nan).
    """
    grouped: dict[tuple[str, float], list[tuple[float, float]]] = {}
    for task, level, n, err in rows:
        grouped.setdefault((task, float(level)), []).append((float(n), float(err)))

    reports = []
    for (task, level), samples in sorted(grouped.items()):
        samples.sort()
        n = np.array([s[0] for s in samples])
        err = np.array([s[1] for s in samples])
        fit = fit_power_law(n, err)
        if np.unique(n).size < 2:
            ceiling, tail = False, float("nan")
        else:
            split = np.median(n)
            low = err[n <= split].min()
            high = err[n > split].min() if np.any(n > split) else low
            tail = float(1.0 - high / low) if low > 0 else 0.0
            ceiling = tail < ceiling_epsilon
        reports.append(ScalingReport(task=task, cpd_level=level, fit=fit,
                                     ceiling=ceiling, tail_improvement=tail))
    return reports

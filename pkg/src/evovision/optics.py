"""Wave-optics imaging: pupil construction, PSF propagation, image formation.

The eye is a circular aperture plus a programmable 4x4 phase mask, upsampled
to a 51x51 surface and embedded in a padded odd grid so the optical axis is an
exact cell.  PSFs come from angular-spectrum propagation of the source field
through the pupil; sensor images from a valid-window convolution of the padded
scene with the per-wavelength kernel, scaled by quadratic aperture throughput,
plus Gaussian sensor noise, clamped to [0, 1].
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .genotype import Genome, OpticalGenes

UM_PER_MM = 1e3
MM_PER_NM = 1e-6


@dataclass(frozen=True)
class OpticsGeometry:
    """Physical constants of the eye's optical train (lengths in mm).

    sensor_distance is chosen so that (eta-1)*height_scale can express a lens
    that actually focuses at moderate apertures while the full open aperture
    still blurs across the whole sensor (Fresnel number ~ 45).
    """

    sensor_size_mm: float = 1.0
    sensor_distance_mm: float = 10.0
    scene_distance_mm: float = 1000.0
    pupil_grid: int = 51
    pad_factor: int = 5
    height_scale_um: float = 8.0
    wavelengths_nm: tuple[float, float, float] = (640.0, 550.0, 460.0)

    @property
    def pupil_pitch_mm(self) -> float:
        return self.sensor_size_mm / self.pupil_grid

    @property
    def fine_grid(self) -> int:
        n = self.pupil_grid * self.pad_factor
        return n if n % 2 == 1 else n + 1

    def pixel_pitch_mm(self, resolution_w: int, resolution_h: int) -> float:
        # square photoreceptors; the larger axis tiles the full sensor width
        return self.sensor_size_mm / max(resolution_w, resolution_h)


DEFAULT_OPTICS = OpticsGeometry()


@dataclass(frozen=True)
class PupilFunction:
    amplitude: np.ndarray        # (N, N) in {0, 1}
    phase_surface: np.ndarray    # (N, N) optical path delay, mm
    grid_pitch_mm: float
    wavelength_nm: float

    def field(self) -> np.ndarray:
        lam_mm = self.wavelength_nm * MM_PER_NM
        return self.amplitude * np.exp(1j * 2.0 * np.pi / lam_mm * self.phase_surface)


@dataclass(frozen=True)
class PsfKernel:
    channels: np.ndarray               # (C, Kh, Kw), each channel sums to 1
    wavelengths_nm: tuple[float, ...]
    pixel_pitch_mm: float
    # optional wave-resolution PSFs (C, N, N) for analysis metrics (MTF area);
    # the coarse kernel alone undersamples the frequency axis
    fine_channels: Optional[np.ndarray] = None
    fine_pitch_mm: Optional[float] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


@dataclass
class SceneImage:
    """Padded radiance grid from the renderer: (H + (H+1)) x (W + (W+1))."""

    values: np.ndarray   # (Hp, Wp, C) in [0, 1]
    depth: np.ndarray    # (Hp, Wp), world units (inf for background)

    @property
    def sensor_shape(self) -> tuple[int, int]:
        hp, wp = self.values.shape[:2]
        return (hp - 1) // 2, (wp - 1) // 2


@dataclass
class SensorImage:
    values: np.ndarray   # (H, W, C) in [0, 1]
    aperture_fraction: float
    noise_sigma: float


def padded_shape(res_h: int, res_w: int) -> tuple[int, int]:
    """Scene grid size for a res_h x res_w sensor: H + (H+1) by W + (W+1)."""
    return res_h + res_h + 1, res_w + res_w + 1


def kernel_center(kernel_cells: int) -> int:
    """Index of the on-axis cell of a (H+1)-cell kernel: (H+1)//2."""
    return kernel_cells // 2


def bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a small control grid to size x size, corners aligned."""
    grid = np.asarray(grid, dtype=float)
    n, m = grid.shape
    u = np.linspace(0.0, n - 1.0, size)
    v = np.linspace(0.0, m - 1.0, size)
    i0 = np.minimum(u.astype(int), n - 2)
    j0 = np.minimum(v.astype(int), m - 2)
    fu = (u - i0)[:, None]
    fv = (v - j0)[None, :]
    g00 = grid[np.ix_(i0, j0)]
    g01 = grid[np.ix_(i0, j0 + 1)]
    g10 = grid[np.ix_(i0 + 1, j0)]
    g11 = grid[np.ix_(i0 + 1, j0 + 1)]
    return (g00 * (1 - fu) * (1 - fv) + g01 * (1 - fu) * fv
            + g10 * fu * (1 - fv) + g11 * fu * fv)


def build_phase_surface(mask: np.ndarray, eta: float, size: int = 51,
                        height_scale_um: float = DEFAULT_OPTICS.height_scale_um) -> np.ndarray:
    """Optical path delay surface (mm): (eta - 1) * h_max * upsampled mask."""
    mask = np.asarray(mask, dtype=float)
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ValueError("phase mask entries must lie in [0, 1]")
    if not (1.0 <= eta <= 2.0):
        raise ValueError(f"refractive index {eta} outside [1, 2]")
    return (eta - 1.0) * (height_scale_um / UM_PER_MM) * bilinear_upsample(mask, size)


def pupil_function(optical: OpticalGenes, wavelength_nm: float,
                   geometry: OpticsGeometry = DEFAULT_OPTICS) -> PupilFunction:
    """Amplitude + phase on the padded fine grid, optical axis at the center cell.

    a = 1 puts the pupil radius at the sensor half-extent ("open eye"); a = 0
    degenerates to the single on-axis cell (minimum one-cell pupil).
    """
    n = geometry.fine_grid
    p = geometry.pupil_pitch_mm
    idx = np.arange(n) - n // 2
    x = idx * p
    xs, ys = np.meshgrid(x, x, indexing="ij")
    radius = optical.aperture_fraction * geometry.sensor_size_mm / 2.0
    amplitude = ((xs**2 + ys**2) <= radius**2 + 1e-18).astype(float)

    surface = np.zeros((n, n))
    half = geometry.pupil_grid // 2
    c = n // 2
    delay = build_phase_surface(optical.mask_array(), optical.refractive_index,
                                geometry.pupil_grid, geometry.height_scale_um)
    surface[c - half:c + half + 1, c - half:c + half + 1] = delay
    return PupilFunction(amplitude=amplitude, phase_surface=surface,
                         grid_pitch_mm=p, wavelength_nm=wavelength_nm)


def _propagate(field: np.ndarray, pitch_mm: float, distance_mm: float,
               wavelength_nm: float) -> np.ndarray:
    """Angular-spectrum propagation.

    Evanescent components are zeroed, and the transfer function is
    band-limited per axis (Matsushima-style) so its phase stays sampleable on
    the frequency grid at long distances; the limit is far outside the grid
    for the production geometry and only bites in far-field test setups.
    """
    n = field.shape[0]
    lam = wavelength_nm * MM_PER_NM
    k = 2.0 * np.pi / lam
    f = np.fft.fftfreq(n, d=pitch_mm)
    fx, fy = np.meshgrid(f, f, indexing="ij")
    f_limit = 1.0 / (lam * math.sqrt(1.0 + (2.0 * distance_mm / (n * pitch_mm)) ** 2))
    radicand = 1.0 - (lam * fx) ** 2 - (lam * fy) ** 2
    keep = (radicand > 0.0) & (np.abs(fx) <= f_limit) & (np.abs(fy) <= f_limit)
    h = np.where(keep,
                 np.exp(1j * k * distance_mm * np.sqrt(np.maximum(radicand, 0.0))),
                 0.0)
    spectrum = np.fft.fft2(np.fft.ifftshift(field))
    return np.fft.fftshift(np.fft.ifft2(spectrum * h))


def compute_psf(optical: OpticalGenes, z_mm: float, s_mm: float, wavelength_nm: float,
                kernel_shape: tuple[int, int],
                geometry: OpticsGeometry = DEFAULT_OPTICS,
                pixel_pitch_mm: Optional[float] = None,
                return_fine: bool = False):
    """Single-wavelength PSF binned onto the (H+1, W+1) kernel grid.

    PSF = |IFFT{ FFT{P * U_in} * H_s }|^2 with U_in the spherical wave from an
    on-axis point source at z and H_s the transfer function for distance s.
    Energy landing outside the kernel footprint is discarded before the final
    unit-sum normalization.
    """
    if z_mm <= 0 or s_mm <= 0:
        raise ValueError("propagation distances must be positive")
    kh, kw = kernel_shape
    if kh * kw <= 1:
        raise ValueError(f"degenerate PSF grid {kernel_shape}")

    pupil = pupil_function(optical, wavelength_nm, geometry)
    n = geometry.fine_grid
    p = geometry.pupil_pitch_mm
    idx = np.arange(n) - n // 2
    x = idx * p
    xs, ys = np.meshgrid(x, x, indexing="ij")
    lam = wavelength_nm * MM_PER_NM
    k = 2.0 * np.pi / lam
    u_in = np.exp(1j * k * np.sqrt(xs**2 + ys**2 + z_mm**2))

    out = _propagate(pupil.field() * u_in, p, s_mm, wavelength_nm)
    psf_fine = np.abs(out) ** 2

    if pixel_pitch_mm is None:
        pixel_pitch_mm = geometry.pixel_pitch_mm(kw - 1, kh - 1)
    # bin fine cells into sensor pixels around the on-axis kernel cell
    pix = np.floor(x / pixel_pitch_mm + 0.5).astype(int)  # pixel offset of each fine cell
    u = pix + kernel_center(kh)
    v = pix + kernel_center(kw)
    valid_u = (u >= 0) & (u < kh)
    valid_v = (v >= 0) & (v < kw)
    uu = u[valid_u]
    vv = v[valid_v]
    sub = psf_fine[np.ix_(valid_u, valid_v)]
    flat = np.zeros(kh * kw)
    np.add.at(flat, (uu[:, None] * kw + vv[None, :]).ravel(), sub.ravel())
    kernel = flat.reshape(kh, kw)

    total = kernel.sum()
    if total <= 0.0:
        raise ValueError("PSF energy entirely outside the kernel footprint")
    kernel /= total
    if return_fine:
        return kernel, psf_fine / psf_fine.sum()
    return kernel


_PSF_CACHE: dict = {}
_PSF_LOCK = threading.Lock()
_PSF_CACHE_CAP = 32  # fine-grid channels make entries ~MB scale; keep it bounded


def _cache_key(optical: OpticalGenes, res_h: int, res_w: int, geometry: OpticsGeometry):
    return (optical.phase_mask, optical.refractive_index, optical.aperture_fraction,
            res_h, res_w,
            geometry.sensor_size_mm, geometry.sensor_distance_mm,
            geometry.scene_distance_mm, geometry.pupil_grid, geometry.pad_factor,
            geometry.height_scale_um, geometry.wavelengths_nm)


def psf_for_genome(genome: Genome, geometry: OpticsGeometry = DEFAULT_OPTICS) -> PsfKernel:
    """Three-channel kernel for the genome's eye; cached by (genes, geometry)."""
    if not genome.optical.enabled:
        raise ValueError("optics disabled for this genome; use the pinhole path")
    res_h = genome.morphological.resolution_h
    res_w = genome.morphological.resolution_w
    key = _cache_key(genome.optical, res_h, res_w, geometry)
    with _PSF_LOCK:
        hit = _PSF_CACHE.get(key)
    if hit is not None:
        return hit
    pitch = geometry.pixel_pitch_mm(res_w, res_h)
    coarse = []
    fine = []
    for lam in geometry.wavelengths_nm:
        k, f = compute_psf(genome.optical, geometry.scene_distance_mm,
                           geometry.sensor_distance_mm, lam, (res_h + 1, res_w + 1),
                           geometry, pixel_pitch_mm=pitch, return_fine=True)
        coarse.append(k)
        fine.append(f)
    kernel = PsfKernel(channels=np.stack(coarse), wavelengths_nm=geometry.wavelengths_nm,
                       pixel_pitch_mm=pitch, fine_channels=np.stack(fine),
                       fine_pitch_mm=geometry.pupil_pitch_mm)
    with _PSF_LOCK:
        if len(_PSF_CACHE) >= _PSF_CACHE_CAP:
            _PSF_CACHE.pop(next(iter(_PSF_CACHE)))
        _PSF_CACHE[key] = kernel
    return kernel


def clear_psf_cache() -> None:
    with _PSF_LOCK:
        _PSF_CACHE.clear()


def delta_kernel(kh: int, kw: int, channels: int = 3,
                 pixel_pitch_mm: float = DEFAULT_OPTICS.sensor_size_mm / 15) -> PsfKernel:
    """Unit impulse at the on-axis cell; the identity element of form_image."""
    k = np.zeros((channels, kh, kw))
    k[:, kernel_center(kh), kernel_center(kw)] = 1.0
    return PsfKernel(channels=k, wavelengths_nm=DEFAULT_OPTICS.wavelengths_nm[:channels],
                     pixel_pitch_mm=pixel_pitch_mm)


def _valid_windows(padded: np.ndarray, kh: int, kw: int, out_h: int, out_w: int) -> np.ndarray:
    # first out_h x out_w windows == windows centered on the sensor pixels
    return sliding_window_view(padded, (kh, kw))[:out_h, :out_w]


def convolve_valid(scene: np.ndarray, kernel: PsfKernel) -> np.ndarray:
    """Valid-window correlation of a padded (Hp, Wp, C) scene, yielding (H, W, C).

    Output pixel (i, j) integrates scene cells [i, i+Kh) x [j, j+Kw) against the
    kernel, so the on-axis kernel cell lands on the central H x W crop.
    """
    kh, kw = kernel.shape
    hp, wp, c = scene.shape
    if hp != 2 * (kh - 1) + 1 or wp != 2 * (kw - 1) + 1:
        raise ValueError(
            f"scene {scene.shape[:2]} does not match kernel {kernel.shape}: "
            f"expected padded shape {padded_shape(kh - 1, kw - 1)}"
        )
    h, w = kh - 1, kw - 1
    out = np.empty((h, w, c))
    for ch in range(c):
        win = _valid_windows(scene[:, :, ch], kh, kw, h, w)
        out[:, :, ch] = np.einsum("hwuv,uv->hw", win, kernel.channels[ch])
    return out


def convolve_valid_batch(scenes: np.ndarray, kernel: PsfKernel) -> np.ndarray:
    """Batched form of convolve_valid: (B, Hp, Wp, C) -> (B, H, W, C).

    Per-sample results are bit-identical to convolve_valid (same contraction
    order per output element).
    """
    kh, kw = kernel.shape
    b, hp, wp, c = scenes.shape
    h, w = kh - 1, kw - 1
    out = np.empty((b, h, w, c))
    for ch in range(c):
        win = sliding_window_view(scenes[:, :, :, ch], (kh, kw), axis=(1, 2))[:, :h, :w]
        out[:, :, :, ch] = np.einsum("bhwuv,uv->bhw", win, kernel.channels[ch])
    return out


def convolve_gray_batch(scenes: np.ndarray, kernel: PsfKernel) -> np.ndarray:
    """Single-plane scenes against all kernel channels: (B, Hp, Wp) -> (B, H, W, C).

    The renderer emits one radiance plane per eye (the world is achromatic);
    channels only diverge through the per-wavelength kernels, so the window
    extraction is shared and the contraction becomes one matrix product.
    """
    kh, kw = kernel.shape
    b = scenes.shape[0]
    h, w = kh - 1, kw - 1
    win = sliding_window_view(scenes, (kh, kw), axis=(1, 2))[:, :h, :w]
    cols = np.ascontiguousarray(win).reshape(b * h * w, kh * kw)
    flat = cols @ kernel.channels.reshape(kernel.channels.shape[0], kh * kw).T
    return flat.reshape(b, h, w, kernel.channels.shape[0])


def form_image(scene, kernel: PsfKernel, aperture_fraction: float, sigma: float,
               rng: Optional[np.random.Generator] = None) -> SensorImage:
    """Sensor image: clamp( (kernel * scene) * a^2 + N(0, sigma^2) ).

    Light throughput falls quadratically with the aperture fraction; noise is
    i.i.d. Gaussian per pixel and channel, added before the final clamp.
    """
    values = scene.values if isinstance(scene, SceneImage) else np.asarray(scene, dtype=float)
    signal = convolve_valid(values, kernel) * aperture_fraction**2
    if sigma > 0.0:
        if rng is None:
            raise ValueError("sigma > 0 requires an rng")
        signal = signal + rng.normal(0.0, sigma, size=signal.shape)
    return SensorImage(values=np.clip(signal, 0.0, 1.0),
                       aperture_fraction=aperture_fraction, noise_sigma=sigma)


def psf_second_moment(kernel: PsfKernel) -> float:
    """Mean-channel second spatial moment about the on-axis cell, pixel units."""
    kh, kw = kernel.shape
    du = np.arange(kh) - kernel_center(kh)
    dv = np.arange(kw) - kernel_center(kw)
    r2 = du[:, None] ** 2 + dv[None, :] ** 2
    return float(np.mean([np.sum(c * r2) for c in kernel.channels]))

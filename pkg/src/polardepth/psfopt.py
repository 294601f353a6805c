"""Multi-depth iterative Fourier-transform refinement of a rotating-PSF mask.

Each iteration forces the sensor-plane amplitude at every design depth toward
Gaussian lobes placed on the current lobe peaks, carries the fields back to
the pupil, removes the depth's defocus, and keeps only the phase of the
weighted average.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import CameraSpec, GridSpec, ScalarMap
from .optics import (
    DEFAULT_PSF_SIZE,
    WORKING_ZETA,
    DegeneratePSF,
    PhaseProfile,
    _dft_matrix,
    default_phase,
    defocus_parameter,
    depth_from_defocus,
    find_lobes,
)

__all__ = [
    "OptimizationConfig",
    "QualityMetrics",
    "PsfQualityReport",
    "NO_SIDE_LOBE",
    "lobe_sigma",
    "psf_quality",
    "optimize_phase",
    "edge_weighted",
    "design_schedule",
    "designed_phase",
    "write_report_csv",
]

# contrast sentinel when nothing outside the main lobes is a local maximum
NO_SIDE_LOBE = float("inf")


def edge_weighted(count: int, factor: float = 2.0) -> np.ndarray:
    """Uniform weights with the first and last raised by ``factor``, summing to 1."""
    w = np.ones(count)
    if count > 1:
        w[0] = w[-1] = factor
    return w / w.sum()


@dataclass(frozen=True)
class OptimizationConfig:
    """IFTA settings.

    ``target_sigma`` (pixels) defaults to the second-moment radius of the lobe
    at the depth sample closest to focus.  ``cutoff`` is the fraction of the
    target lobe peak below which the target amplitude is zero.
    """

    depths: tuple
    weights: Optional[tuple] = None
    iterations: int = 10
    target_sigma: Optional[float] = None
    cutoff: float = 0.05
    psf_size: int = DEFAULT_PSF_SIZE
    min_amplitude: float = 1e-6

    def __post_init__(self):
        depths = tuple(float(z) for z in self.depths)
        if len(depths) < 1:
            raise ValueError("need at least one depth sample")
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError("depth samples must be strictly increasing")
        object.__setattr__(self, "depths", depths)
        w = edge_weighted(len(depths)) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (len(depths),):
            raise ValueError("one weight per depth sample is required")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1 (sum = {w.sum()!r})")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError("iterations must be a non-negative integer")
        if not 0 < self.cutoff < 1:
            raise ValueError("cutoff must lie in (0, 1)")


@dataclass(frozen=True)
class QualityMetrics:
    peak: float
    main_lobe_fraction: float
    contrast: float


@dataclass
class PsfQualityReport:
    """Per-iteration per-depth metrics; ``history[0]`` is the initial design."""

    depths: tuple
    history: list = field(default_factory=list)
    excluded_pixels: int = 0
    target_sigma: float = 0.0

    @property
    def final(self) -> list:
        return self.history[-1]

    def mean_fraction(self, iteration: int = -1) -> float:
        return float(np.mean([m.main_lobe_fraction for m in self.history[iteration]]))


def _intensity(psf) -> np.ndarray:
    return np.asarray(psf.values if isinstance(psf, ScalarMap) else psf, float)


def lobe_sigma(psf, lobes: Optional[np.ndarray] = None) -> float:
    """Second-moment radius (per axis) of the brightest lobe, in pixels."""
    img = _intensity(psf)
    if lobes is None:
        lobes = find_lobes(img)
    if len(lobes) == 0:
        raise DegeneratePSF("degenerate PSF: no peak")
    cy, cx = (img.shape[0] - 1) / 2, (img.shape[1] - 1) / 2
    reach = 4.0
    if len(lobes) > 1:
        reach = min(reach, 0.5 * float(np.hypot(*(lobes[1] - lobes[0]))))
    yy, xx = np.mgrid[: img.shape[0], : img.shape[1]]
    r2 = (xx - cx - lobes[0][0]) ** 2 + (yy - cy - lobes[0][1]) ** 2
    sel = r2 <= reach ** 2
    w = img[sel]
    return float(np.sqrt((w * r2[sel]).sum() / (2 * w.sum())))


def _lobe_mask(shape, lobes, radius) -> np.ndarray:
    cy, cx = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    mask = np.zeros(shape, bool)
    for x, y in lobes:
        mask |= (xx - cx - x) ** 2 + (yy - cy - y) ** 2 <= radius ** 2
    return mask


def psf_quality(psf, sigma: Optional[float] = None, cutoff: float = 0.05) -> QualityMetrics:
    """Peak, main-lobe energy fraction and main-to-side-lobe contrast.

    The main lobes are the (up to two) detected lobes; each owns the disk in
    which a Gaussian of width ``sigma`` stays above ``cutoff`` of its peak.
    ``sigma`` defaults to the PSF's own lobe second-moment radius.
    """
    img = _intensity(psf)
    lobes = find_lobes(img)
    if len(lobes) == 0:
        raise DegeneratePSF("degenerate PSF: no peak")
    if sigma is None:
        sigma = lobe_sigma(img, lobes)
    radius = max(sigma * np.sqrt(2 * np.log(1 / cutoff)), 0.5)
    mask = _lobe_mask(img.shape, lobes, radius)
    total = img.sum()
    fraction = float(img[mask].sum() / total) if total > 0 else 0.0
    main_peak = float(img[mask].max())
    local = (img == ndimage.maximum_filter(img, size=3, mode="constant", cval=-np.inf)) & (img > 0) & ~mask
    contrast = main_peak / float(img[local].max()) if local.any() else NO_SIDE_LOBE
    return QualityMetrics(float(img.max()), min(fraction, 1.0), contrast)


def _target_amplitude(shape, lobes, sigma, cutoff) -> np.ndarray:
    cy, cx = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    inten = np.zeros(shape)
    for x, y in lobes:
        g = np.exp(-((xx - cx - x) ** 2 + (yy - cy - y) ** 2) / (2 * sigma ** 2))
        inten = np.maximum(inten, np.where(g >= cutoff, g, 0.0))
    return np.sqrt(inten)


def optimize_phase(initial: PhaseProfile, cam: CameraSpec, cfg: OptimizationConfig):
    """Refine ``initial`` for concentrated, shape-stable lobes over ``cfg.depths``.

    Returns
    -------
    phase : PhaseProfile
    report : PsfQualityReport
        ``iterations + 1`` rows of per-depth :class:`QualityMetrics`.
    """
    n_y, n_x = initial.grid.shape
    u = initial.radius
    disk = u <= 1
    m = cfg.psf_size
    ey = _dft_matrix(n_y, initial.radius_px, m, cam.sampling)
    ex = _dft_matrix(n_x, initial.radius_px, m, cam.sampling)
    zetas = [float(defocus_parameter(z, cam)) for z in cfg.depths]
    incident = [np.where(disk, np.exp(1j * zt * u ** 2), 0) for zt in zetas]
    amp_floor = cfg.min_amplitude * max(float(np.abs(f).max()) for f in incident)
    usable = np.logical_and.reduce([np.abs(f) > amp_floor for f in incident]) & disk
    excluded = int(disk.sum() - usable.sum())

    def fields(psi):
        carrier = np.where(disk, np.exp(1j * psi), 0)
        return [ey @ (carrier * f) @ ex.T for f in incident]

    def metrics(sensor, sigma):
        rows = []
        for s in sensor:
            inten = np.abs(s) ** 2
            rows.append(psf_quality(inten / inten.sum(), sigma, cfg.cutoff))
        return rows

    psi = np.array(initial.phase, float)
    sensor = fields(psi)
    if cfg.target_sigma is None:
        focus = int(np.argmin(np.abs(zetas)))
        inten = np.abs(sensor[focus]) ** 2
        sigma = lobe_sigma(inten / inten.sum())
    else:
        sigma = float(cfg.target_sigma)
    report = PsfQualityReport(cfg.depths, [metrics(sensor, sigma)], excluded, sigma)

    for _ in range(cfg.iterations):
        acc = np.zeros(initial.grid.shape, complex)
        for w, s, inc in zip(cfg.weights, sensor, incident):
            inten = np.abs(s) ** 2
            lobes = find_lobes(inten)
            if len(lobes) < 2:
                raise DegeneratePSF("degenerate PSF during optimization")
            target = _target_amplitude(s.shape, lobes, sigma, cfg.cutoff)
            target *= np.sqrt(inten.sum() / (target ** 2).sum())
            forced = target * np.exp(1j * np.angle(s))
            back = ey.conj().T @ forced @ ex.conj()
            acc += w * np.where(usable, back / np.where(usable, inc, 1), 0)
        psi = np.where(disk, np.mod(np.angle(acc), 2 * np.pi), 0.0)
        sensor = fields(psi)
        report.history.append(metrics(sensor, sigma))

    return PhaseProfile(initial.grid, psi, initial.radius_px), report


def design_schedule(cam: CameraSpec, count: int = 9, zeta_max: float = WORKING_ZETA,
                    iterations: int = 10) -> OptimizationConfig:
    """Evenly spaced defocus samples over the working range, edge-weighted."""
    depths = np.sort(depth_from_defocus(np.linspace(-zeta_max, zeta_max, count), cam))
    return OptimizationConfig(tuple(depths), iterations=iterations)


@lru_cache(maxsize=8)
def _designed(wavelength, pupil_radius, focus_depth, pitch, focal_length, size):
    cam = CameraSpec(wavelength, pupil_radius, focus_depth, GridSpec(64, 64, pitch), focal_length)
    phase, _ = optimize_phase(default_phase(cam, size), cam, design_schedule(cam))
    return phase


def designed_phase(cam: CameraSpec, size: int = 512) -> PhaseProfile:
    """The pipeline's default mask: the Fresnel-zone design after IFTA refinement.

    The PSF does not depend on the sensor extent, so results are cached per
    optical configuration and pixel pitch.
    """
    return _designed(cam.wavelength, cam.pupil_radius, cam.focus_depth, cam.sensor.pitch,
                     cam.focal_length, size)


def write_report_csv(path, report: PsfQualityReport) -> Path:
    """Rows of (iteration, depth_index, depth_m, peak, fraction, contrast)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "depth_index", "depth_m", "peak", "main_lobe_fraction", "contrast"])
        for it, rows in enumerate(report.history):
            for k, m in enumerate(rows):
                contrast = "inf" if np.isinf(m.contrast) else repr(m.contrast)
                wr.writerow([it, k, repr(report.depths[k]), repr(m.peak), repr(m.main_lobe_fraction), contrast])
    return path

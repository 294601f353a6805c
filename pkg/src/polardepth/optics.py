"""Fresnel-zone phase masks, scalar propagation and double-helix PSFs.

The sensor-plane PSF is the squared magnitude of a matrix Fourier transform
of the pupil field, sampled directly at sensor pixel centers.  Positions in a
PSF window are measured from its central pixel with x along columns and y
along rows (downward); lobe angles use the same axes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .core import CameraSpec, ComplexField, GridSpec, ScalarMap, wrap_angle

__all__ = [
    "FresnelZoneParams",
    "PhaseProfile",
    "DefocusSample",
    "DegeneratePSF",
    "SamplingWarning",
    "ZoneWarning",
    "pupil_grid",
    "fresnel_zone_phase",
    "quantize_phase",
    "defocus_parameter",
    "depth_from_defocus",
    "defocus_sample",
    "angular_spectrum_propagate",
    "aliasing_free_distance",
    "pupil_field",
    "focal_transform",
    "psf_field",
    "simulate_psf",
    "analytic_psf_amplitude",
    "find_lobes",
    "lobe_rotation_angle",
    "DEFAULT_PSF_SIZE",
    "WORKING_ZETA",
    "working_range",
    "default_phase",
]

DEFAULT_PSF_SIZE = 65

# half-width of the defocus interval over which the default two-lobe design
# rotates monotonically (just under pi in total)
WORKING_ZETA = 28.0


class DegeneratePSF(ValueError):
    """Fewer than two usable lobes."""


class SamplingWarning(UserWarning):
    def __init__(self, message: str, max_distance: float):
        super().__init__(message)
        self.max_distance = max_distance


class ZoneWarning(UserWarning):
    def __init__(self, message: str, zone: int):
        super().__init__(message)
        self.zone = zone


@dataclass(frozen=True)
class FresnelZoneParams:
    """Generalized Fresnel-zone design: ``foci`` lobes, ``zones`` rings, radial ``exponent``."""

    foci: int = 2
    zones: int = 12
    exponent: float = 0.8

    def __post_init__(self):
        if int(self.foci) != self.foci or self.foci < 1:
            raise ValueError(f"foci must be an integer >= 1, got {self.foci}")
        if int(self.zones) != self.zones or self.zones < 1:
            raise ValueError(f"zones must be an integer >= 1, got {self.zones}")
        if not self.exponent > 0:
            raise ValueError(f"exponent must be positive, got {self.exponent}")

    def boundaries(self) -> np.ndarray:
        """Zone edges ``(l / L) ** exponent`` for l = 0..L."""
        return (np.arange(self.zones + 1) / self.zones) ** self.exponent

    def charge(self, zone: np.ndarray) -> np.ndarray:
        """Topological charge of 1-based zone index."""
        return (np.asarray(zone) - 1) * self.foci + 1


def _pupil_coords(grid: GridSpec, radius_px: float):
    y = np.arange(grid.height) - grid.height / 2 + 0.5
    x = np.arange(grid.width) - grid.width / 2 + 0.5
    xx, yy = np.meshgrid(x / radius_px, y / radius_px)
    return np.hypot(xx, yy), np.arctan2(yy, xx)


@dataclass(frozen=True)
class PhaseProfile:
    """Phase in ``[0, 2 pi)`` on a pupil raster; zero outside the unit disk.

    ``radius_px`` is the pupil radius in raster pixels; the normalized radius
    of a pixel is its center distance from the raster center divided by it.
    """

    grid: GridSpec
    phase: np.ndarray
    radius_px: float

    def __post_init__(self):
        ph = np.asarray(self.phase, dtype=np.float64)
        if ph.shape != self.grid.shape:
            raise ValueError(f"phase shape {ph.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(ph)):
            raise ValueError("phase must be finite")
        u, _ = _pupil_coords(self.grid, self.radius_px)
        ph = np.where(u <= 1, wrap_angle(ph), 0.0)
        ph.setflags(write=False)
        object.__setattr__(self, "phase", ph)

    @property
    def radius(self) -> np.ndarray:
        return _pupil_coords(self.grid, self.radius_px)[0]

    @property
    def inside(self) -> np.ndarray:
        return self.radius <= 1

    def as_map(self) -> ScalarMap:
        return ScalarMap(self.grid, self.phase, "angle", "2pi", valid=self.inside)

    @classmethod
    def from_map(cls, m: ScalarMap, radius_px: Optional[float] = None) -> "PhaseProfile":
        if radius_px is None:
            radius_px = 0.4 * min(m.grid.width, m.grid.height)
        return cls(m.grid, np.asarray(m.values, np.float64), radius_px)


def pupil_grid(cam: CameraSpec, size: int = 512, fill: float = 0.8) -> tuple[GridSpec, float]:
    """Square pupil raster with the disk spanning ``fill`` of its width."""
    radius_px = fill * size / 2
    return GridSpec(size, size, cam.pupil_radius / radius_px), radius_px


def fresnel_zone_phase(params: FresnelZoneParams, grid: GridSpec, radius_px: Optional[float] = None) -> PhaseProfile:
    """Multi-focus Fresnel-zone phase.

    A pixel at normalized radius u in zone l, ``((l-1)/L)**eps <= u < (l/L)**eps``,
    gets ``[(l-1) N + 1] * azimuth`` modulo 2 pi.  The pupil edge u = 1
    belongs to the last zone.

    Warns with :class:`ZoneWarning` when a ring is thinner than one pixel.
    """
    if radius_px is None:
        radius_px = 0.4 * min(grid.width, grid.height)
    edges = params.boundaries()
    widths = np.diff(edges) * radius_px
    for l in np.flatnonzero(widths < 1.0):
        warnings.warn(ZoneWarning(f"zone {l + 1} is {widths[l]:.2f} px wide", int(l + 1)))
    u, az = _pupil_coords(grid, radius_px)
    zone = np.searchsorted(edges, u, side="right")
    zone = np.clip(zone, 1, params.zones)
    phase = np.mod(params.charge(zone) * az, 2 * np.pi)
    return PhaseProfile(grid, np.where(u <= 1, phase, 0.0), radius_px)


def quantize_phase(profile: PhaseProfile, levels: int = 8) -> PhaseProfile:
    """Round the phase to ``levels`` equal steps over 2 pi."""
    step = 2 * np.pi / levels
    q = np.mod(np.round(profile.phase / step), levels) * step
    return PhaseProfile(profile.grid, q, profile.radius_px)


def defocus_parameter(z_obj, cam: CameraSpec):
    """Dimensionless defocus ``(pi / lambda) (1/z - 1/z_f) R**2``."""
    z_obj = np.asarray(z_obj, float)
    if np.any(z_obj <= 0):
        raise ValueError("object depth must be positive")
    return np.pi / cam.wavelength * (1 / z_obj - 1 / cam.focus_depth) * cam.pupil_radius ** 2


def depth_from_defocus(zeta, cam: CameraSpec):
    """Inverse of :func:`defocus_parameter`."""
    inv = np.asarray(zeta, float) * cam.wavelength / (np.pi * cam.pupil_radius ** 2) + 1 / cam.focus_depth
    if np.any(inv <= 0):
        raise ValueError("defocus beyond infinity")
    return 1 / inv


def working_range(cam: CameraSpec, zeta_max: float = WORKING_ZETA) -> tuple[float, float]:
    """Object depths (near, far) where ``|zeta| <= zeta_max``."""
    return float(depth_from_defocus(zeta_max, cam)), float(depth_from_defocus(-zeta_max, cam))


def default_phase(cam: CameraSpec, size: int = 512) -> PhaseProfile:
    """The [2, 12, 0.8] Fresnel-zone mask on a ``size`` pupil raster."""
    grid, radius_px = pupil_grid(cam, size)
    return fresnel_zone_phase(FresnelZoneParams(), grid, radius_px)


@dataclass(frozen=True)
class DefocusSample:
    z_obj: float
    zeta: float


def defocus_sample(z_obj: float, cam: CameraSpec) -> DefocusSample:
    return DefocusSample(float(z_obj), float(defocus_parameter(z_obj, cam)))


# ---------------------------------------------------------------- propagation

def aliasing_free_distance(grid: GridSpec, wavelength: float) -> float:
    """Largest distance for which the sampled transfer function does not alias."""
    n = max(grid.width, grid.height)
    dx = grid.pitch
    ratio = wavelength / (2 * dx)
    if ratio >= 1:
        return np.inf
    return n * dx ** 2 / wavelength * np.sqrt(1 - ratio ** 2)


def angular_spectrum_propagate(field: ComplexField, distance: float) -> ComplexField:
    """Free-space propagation by the exact transfer function.

    Evanescent components decay as ``exp(-|kz| |d|)`` in either direction,
    so a forward/backward pair is the identity on band-limited fields.
    """
    grid = field.grid
    z_max = aliasing_free_distance(grid, field.wavelength)
    if abs(distance) > z_max:
        warnings.warn(SamplingWarning(
            f"propagation distance {distance:g} m exceeds the aliasing-free limit {z_max:g} m", z_max))
    fy = np.fft.fftfreq(grid.height, grid.pitch)
    fx = np.fft.fftfreq(grid.width, grid.pitch)
    arg = 1 / field.wavelength ** 2 - fx[None, :] ** 2 - fy[:, None] ** 2
    kz = 2 * np.pi * np.sqrt(np.abs(arg))
    h = np.where(arg >= 0, np.exp(1j * kz * distance), np.exp(-kz * abs(distance)))
    out = np.fft.ifft2(np.fft.fft2(field.values) * h)
    return ComplexField(grid, out, field.wavelength)


# ---------------------------------------------------------------------- PSFs

def pupil_field(phase: PhaseProfile, cam: CameraSpec, z_obj: float, model: str = "paraxial") -> np.ndarray:
    """Pupil disk times mask phase times the defocus phase of a point at ``z_obj``.

    ``model="paraxial"`` uses ``zeta * u**2``; ``model="spherical"`` uses the
    exact path difference between spherical waves from ``z_obj`` and from the
    in-focus plane, which reduces to the paraxial form for small apertures.
    """
    u = phase.radius
    inside = u <= 1
    if model == "paraxial":
        defocus = float(defocus_parameter(z_obj, cam)) * u ** 2
    elif model == "spherical":
        rho2 = (u * cam.pupil_radius) ** 2
        k = 2 * np.pi / cam.wavelength

        def sag(z):
            return rho2 / (np.sqrt(z ** 2 + rho2) + z)

        defocus = k * (sag(z_obj) - sag(cam.focus_depth))
    else:
        raise ValueError(f"unknown defocus model {model!r}")
    return np.where(inside, np.exp(1j * (phase.phase + defocus)), 0)


def _dft_matrix(n: int, radius_px: float, size: int, sampling: float) -> np.ndarray:
    c = (np.arange(n) - n / 2 + 0.5) / radius_px
    k = np.arange(size) - size // 2
    return np.exp(-2j * np.pi * sampling * np.outer(k, c))


def focal_transform(pupil: np.ndarray, radius_px: float, sampling: float, size: int) -> np.ndarray:
    """Sensor-plane field on a ``size`` x ``size`` window of pixel centers.

    ``sampling`` is ``R * PFOV / lambda``.
    """
    ey = _dft_matrix(pupil.shape[0], radius_px, size, sampling)
    ex = _dft_matrix(pupil.shape[1], radius_px, size, sampling)
    return ey @ pupil @ ex.T


def psf_field(phase: PhaseProfile, cam: CameraSpec, z_obj: float, size: int = DEFAULT_PSF_SIZE,
              model: str = "paraxial") -> np.ndarray:
    """Complex sensor-plane amplitude (unnormalized)."""
    return focal_transform(pupil_field(phase, cam, z_obj, model), phase.radius_px, cam.sampling, size)


def simulate_psf(phase: PhaseProfile, cam: CameraSpec, z_obj: float, size: int = DEFAULT_PSF_SIZE,
                 model: str = "paraxial") -> ScalarMap:
    """Intensity PSF of a point at ``z_obj``, normalized to unit sum.

    Parameters
    ----------
    size : int
        Odd window width in sensor pixels; the optical axis lands on the
        central pixel.
    model : {"paraxial", "spherical"}
        Defocus model, see :func:`pupil_field`.
    """
    if size % 2 == 0:
        raise ValueError("PSF window size must be odd")
    amp = psf_field(phase, cam, z_obj, size, model)
    inten = amp.real ** 2 + amp.imag ** 2
    inten /= inten.sum()
    return ScalarMap(GridSpec(size, size, cam.sensor.pitch), inten, "intensity")


def analytic_psf_amplitude(r, phi, zeta, zones: int):
    """Closed-form single-focus rotating PSF amplitude (large L, exponent 0.5).

    ``r`` is in units of the in-focus spot radius.
    """
    from scipy.special import jv

    r = np.asarray(r, float)
    phi = np.asarray(phi, float)
    zeta = float(zeta)
    L = int(zones)
    half = zeta / (2 * L)
    pref = 2 * np.sqrt(np.pi) * np.exp(-1j * half) * (np.sin(half) / zeta if zeta != 0 else 1 / (2 * L))
    total = np.zeros(np.broadcast(r, phi).shape, complex)
    for l in range(1, L + 1):
        total = total + 1j ** l * np.exp(-1j * l * (phi - zeta / L)) * jv(l, 2 * np.pi * np.sqrt(l / L) * r)
    return pref * total


# ------------------------------------------------------------ lobe detection

def find_lobes(psf: Union[ScalarMap, np.ndarray], max_lobes: int = 2, rel_height: float = 0.2,
               min_separation: float = 3.0) -> np.ndarray:
    """Sub-pixel positions ``(k, 2)`` as (x, y) of up to ``max_lobes`` lobes.

    Local maxima of a 5x5 neighborhood above ``rel_height`` of the global
    maximum are taken in descending order; a candidate closer than
    ``min_separation`` pixels to an accepted one is merged into it.  Each
    accepted maximum is refined by the intensity centroid of its 5x5
    neighborhood.
    """
    img = np.asarray(psf.values if isinstance(psf, ScalarMap) else psf, float)
    peak = img.max()
    if not peak > 0:
        return np.zeros((0, 2))
    is_max = (img == ndimage.maximum_filter(img, size=5, mode="constant", cval=-np.inf)) & (img >= rel_height * peak)
    ys, xs = np.nonzero(is_max)
    order = np.lexsort((xs, ys, -img[ys, xs]))
    accepted: list[tuple[int, int]] = []
    for i in order:
        y, x = ys[i], xs[i]
        if all(np.hypot(x - ax, y - ay) >= min_separation for ay, ax in accepted):
            accepted.append((y, x))
        if len(accepted) == max_lobes:
            break
    cy, cx = (img.shape[0] - 1) / 2, (img.shape[1] - 1) / 2
    out = []
    for y, x in accepted:
        y0, y1 = max(y - 2, 0), min(y + 3, img.shape[0])
        x0, x1 = max(x - 2, 0), min(x + 3, img.shape[1])
        w = img[y0:y1, x0:x1]
        gy, gx = np.mgrid[y0:y1, x0:x1]
        out.append((float((w * gx).sum() / w.sum() - cx), float((w * gy).sum() / w.sum() - cy)))
    return np.array(out).reshape(-1, 2)


def lobe_rotation_angle(psf: Union[ScalarMap, np.ndarray]) -> float:
    """Orientation in [0, pi) of the line through the two main lobes.

    Raises
    ------
    DegeneratePSF
        If fewer than two separated maxima reach 20% of the peak.
    """
    lobes = find_lobes(psf)
    if len(lobes) < 2:
        raise DegeneratePSF("degenerate PSF: fewer than two peaks above 20% of max")
    dx, dy = lobes[1] - lobes[0]
    return float(wrap_angle(np.arctan2(dy, dx), np.pi))

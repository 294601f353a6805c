"""Absolute depth from the cepstral echo of a two-lobe PSF.

A textured patch blurred by a two-lobe PSF carries the lobe separation
vector as a pair of symmetric peaks in its power cepstrum.  The orientation of
that pair maps to defocus, and defocus to depth, through a table built from
simulated PSFs.

Confidence
----------
The log power spectrum is whitened by its radial mean before the inverse
transform, so an echo-free patch (fully developed speckle) produces a
zero-quefrency value of minus Euler's constant and nothing else on average.
That value, passed through the same Gaussian smoothing, is the reference
peak.  The confidence level is ``(P2 + P3) / P1`` over the three largest of
{reference, off-center local maxima}; the echo pair alone reaches twice its
height over the reference, and pure speckle stays well below 0.42.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import CameraSpec, DepthMap, GridSpec, ScalarMap, wrap_angle
from .optics import (
    DEFAULT_PSF_SIZE,
    WORKING_ZETA,
    DegeneratePSF,
    PhaseProfile,
    defocus_parameter,
    depth_from_defocus,
    find_lobes,
    lobe_rotation_angle,
    simulate_psf,
)

__all__ = [
    "NoSignal",
    "CalibrationError",
    "TileGrid",
    "RotationCalibration",
    "CepstralPeak",
    "power_cepstrum",
    "reference_level",
    "cepstral_peaks",
    "confidence_level",
    "echo_angle",
    "tile_depth",
    "tile_starts",
    "build_depth_map",
    "calibrate",
    "default_calibration",
    "psf_echo",
    "write_calibration_csv",
    "read_calibration_csv",
]

EULER_GAMMA = 0.5772156649015329
LOG_FLOOR = 1e-12


class NoSignal(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class TileGrid:
    size: int = 128
    stride: int = 64
    window: str = "hann"

    def __post_init__(self):
        if self.size < 8 or self.size & (self.size - 1):
            raise ValueError(f"tile size must be a power of two >= 8, got {self.size}")
        if not 1 <= self.stride <= self.size:
            raise ValueError(f"stride must be in [1, tile size], got {self.stride}")
        if self.window not in ("hann", "none"):
            raise ValueError(f"unknown window {self.window!r}")


def _radial_mean(p: np.ndarray) -> np.ndarray:
    h, w = p.shape
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    r = np.rint(np.hypot(fy[:, None], fx[None, :])).astype(int)
    sums = np.bincount(r.ravel(), p.ravel())
    counts = np.bincount(r.ravel())
    return (sums / np.maximum(counts, 1))[r]


def power_cepstrum(tile, sigma: float = 1.0, window: str = "hann", whiten: bool = True) -> ScalarMap:
    """Smoothed power cepstrum with zero quefrency at the array center.

    The tile is mean-subtracted and windowed, its power spectrum optionally
    divided by its radial mean, and the inverse FFT of the log spectrum is
    Gaussian-smoothed.

    Raises
    ------
    NoSignal
        If the tile is constant.
    """
    grid = tile.grid if isinstance(tile, ScalarMap) else None
    raw = np.asarray(tile.values if grid is not None else tile, float)
    t = raw - raw.mean()
    if not np.any(np.abs(t) > 1e-12 * max(1.0, float(np.abs(raw).max()))):
        raise NoSignal("no signal: tile is constant")
    if window != "none":
        wy = np.hanning(t.shape[0] + 2)[1:-1]
        wx = np.hanning(t.shape[1] + 2)[1:-1]
        t = t * np.outer(wy, wx)
    power = np.abs(np.fft.fft2(t)) ** 2
    if whiten:
        power = power / np.maximum(_radial_mean(power), 1e-300)
    else:
        power = power / power.mean()
    cep = np.fft.fftshift(np.real(np.fft.ifft2(np.log(power + LOG_FLOOR))))
    if sigma > 0:
        cep = ndimage.gaussian_filter(cep, sigma, mode="wrap")
    if grid is None:
        grid = GridSpec(t.shape[1], t.shape[0], 1.0)
    return ScalarMap(grid, cep, "intensity")


def reference_level(sigma: float = 1.0) -> float:
    """Height of the zero-quefrency peak of whitened speckle after smoothing."""
    if sigma <= 0:
        return EULER_GAMMA
    delta = np.zeros((33, 33))
    delta[16, 16] = 1.0
    return EULER_GAMMA * float(ndimage.gaussian_filter(delta, sigma, mode="wrap")[16, 16])


@dataclass(frozen=True)
class CepstralPeak:
    value: float
    qx: float
    qy: float

    @property
    def radius(self) -> float:
        return float(np.hypot(self.qx, self.qy))


def cepstral_peaks(cep, exclusion: float = 3.0, limit: int = 16) -> list:
    """Off-center local maxima in descending order with sub-pixel offsets.

    Maxima inside the ``exclusion`` disk around zero quefrency, or within one
    pixel of the array edge, are skipped.  Offsets are refined by separable
    parabolic interpolation.
    """
    c = np.asarray(cep.values if isinstance(cep, ScalarMap) else cep, float)
    h, w = c.shape
    cy, cx = h // 2, w // 2
    yy, xx = np.indices(c.shape)
    is_max = c == ndimage.maximum_filter(c, size=3, mode="wrap")
    keep = is_max & ((yy - cy) ** 2 + (xx - cx) ** 2 > exclusion ** 2)
    keep[0, :] = keep[-1, :] = keep[:, 0] = keep[:, -1] = False
    ys, xs = np.nonzero(keep)
    vals = c[ys, xs]
    order = np.lexsort((xs, ys, -vals))[:limit]
    peaks = []
    for i in order:
        y, x = ys[i], xs[i]

        def vertex(a, b, d):
            den = a - 2 * b + d
            return 0.0 if den >= 0 else 0.5 * (a - d) / den

        oy = vertex(c[y - 1, x], c[y, x], c[y + 1, x])
        ox = vertex(c[y, x - 1], c[y, x], c[y, x + 1])
        peaks.append(CepstralPeak(float(c[y, x]), x + ox - cx, y + oy - cy))
    return peaks


def confidence_level(values: Sequence[float]) -> float:
    """``(P2 + P3) / P1`` for the three largest of ``values``; 0 if fewer than three."""
    top = sorted((float(v) for v in values), reverse=True)[:3]
    if len(top) < 3 or not top[0] > 0:
        return 0.0
    return float(np.clip((max(top[1], 0.0) + max(top[2], 0.0)) / top[0], 0.0, 2.0))


def echo_angle(peak: CepstralPeak) -> float:
    """Orientation in [0, pi) of the echo pair through ``peak`` and its mirror."""
    return float(wrap_angle(np.arctan2(peak.qy, peak.qx), np.pi))


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class RotationCalibration:
    """Simulated (depth, defocus, lobe angle, cepstral echo) table.

    Depth is recovered from the cepstral echo angle by piecewise-linear
    interpolation of inverse depth, which is affine in defocus.
    ``echo_radius`` is the lobe separation in pixels; half its smallest value
    bounds the central region that tile peak search skips.
    """

    depth: np.ndarray
    zeta: np.ndarray
    lobe_angle: np.ndarray
    cepstrum_angle: np.ndarray
    echo_radius: np.ndarray
    mode: str = "linear"

    COLUMNS = ("depth", "zeta", "lobe_angle", "cepstrum_angle", "echo_radius")

    def __post_init__(self):
        cols = [np.asarray(getattr(self, k), float) for k in self.COLUMNS]
        n = len(cols[0])
        if any(c.shape != (n,) for c in cols) or n < 2:
            raise CalibrationError("calibration columns must be 1-D with equal length >= 2")
        order = np.argsort(cols[0], kind="stable")
        for k, c in zip(self.COLUMNS, cols):
            c = c[order]
            c.setflags(write=False)
            object.__setattr__(self, k, c)
        if np.any(np.diff(self.depth) <= 0):
            dup = self.depth[1:][np.diff(self.depth) <= 0]
            raise CalibrationError(f"depth samples must be strictly increasing; repeated {dup.tolist()}")
        for name in ("lobe_angle", "cepstrum_angle"):
            _check_monotone(self.depth, getattr(self, name), name)
        if self.mode != "linear":
            raise CalibrationError(f"unknown interpolation mode {self.mode!r}")

    @property
    def span(self) -> float:
        """Total rotation of the lobe angle across the table, radians."""
        return float(abs(self.lobe_angle[-1] - self.lobe_angle[0]))

    @property
    def angle_range(self) -> tuple[float, float]:
        return float(self.cepstrum_angle.min()), float(self.cepstrum_angle.max())

    @property
    def exclusion_radius(self) -> float:
        return max(3.0, 0.5 * float(self.echo_radius.min()))

    def depth_at(self, angle):
        """Depth for cepstral echo angle(s); NaN outside the table."""
        a = np.asarray(angle, float)
        ang = self.cepstrum_angle
        inv = 1 / self.depth
        if ang[0] > ang[-1]:
            ang, inv = ang[::-1], inv[::-1]
        out = 1 / np.interp(a, ang, inv)
        return np.where((a < ang[0]) | (a > ang[-1]), np.nan, out)


def _check_monotone(depth, angle, name):
    d = np.diff(angle)
    if np.all(d > 0) or np.all(d < 0):
        return
    sign = np.sign(np.median(d)) or 1.0
    bad = np.flatnonzero(np.sign(d) != sign)
    pairs = ", ".join(f"{depth[i]:.6g}-{depth[i + 1]:.6g} m" for i in bad)
    raise CalibrationError(f"{name} not strictly monotone between samples {pairs}; "
                           "rotation range exceeded or samples repeated")


def psf_echo(psf, tile: int = 128, sigma: float = 1.0, window: str = "hann") -> CepstralPeak:
    """Strongest echo in a PSF's own cepstrum on a ``tile`` canvas.

    Peaks closer to zero quefrency than half the lobe separation belong to
    the lobe shape and are skipped.
    """
    img = np.asarray(psf.values if isinstance(psf, ScalarMap) else psf, float)
    lobes = find_lobes(img)
    if len(lobes) < 2:
        raise DegeneratePSF("degenerate PSF: fewer than two lobes")
    sep = float(np.hypot(*(lobes[1] - lobes[0])))
    m = img.shape[0]
    canvas = np.zeros((tile, tile))
    o = tile // 2 - m // 2
    if o < 0:
        canvas = img[-o:-o + tile, -o:-o + tile]
    else:
        canvas[o:o + m, o:o + m] = img
    peaks = cepstral_peaks(power_cepstrum(canvas, sigma, window), max(3.0, 0.5 * sep))
    if not peaks:
        raise DegeneratePSF("PSF cepstrum has no echo")
    return peaks[0]


def calibrate(phase: PhaseProfile, cam: CameraSpec, depths: Sequence[float], tile: int = 128,
              psf_size: int = DEFAULT_PSF_SIZE, sigma: float = 1.0) -> RotationCalibration:
    """Simulate PSFs at ``depths`` and tabulate their rotation.

    Raises
    ------
    CalibrationError
        For fewer than five samples, repeated depths or a non-monotone
        angle sequence (the sampled range rotates past pi).
    """
    depths = [float(z) for z in depths]
    if len(depths) < 5:
        raise CalibrationError(f"need at least 5 depth samples, got {len(depths)}")
    srt = sorted(depths)
    if any(b <= a for a, b in zip(srt, srt[1:])):
        raise CalibrationError("depth samples must be distinct (strictly increasing once sorted)")
    rows = []
    for z in srt:
        psf = simulate_psf(phase, cam, z, psf_size)
        echo = psf_echo(psf, tile, sigma)
        rows.append((z, float(defocus_parameter(z, cam)), lobe_rotation_angle(psf), echo_angle(echo), echo.radius))
    return RotationCalibration(*map(np.array, zip(*rows)))


def default_calibration(phase: PhaseProfile, cam: CameraSpec, samples: int = 161,
                        zeta_max: float = WORKING_ZETA, **kw) -> RotationCalibration:
    """Calibration on ``samples`` evenly spaced defocus values of the working range."""
    return calibrate(phase, cam, depth_from_defocus(np.linspace(-zeta_max, zeta_max, samples), cam), **kw)


CSV_COLUMNS = ("z_obj_m", "zeta", "lobe_angle_rad", "cepstrum_angle_rad", "echo_radius_px")


def write_calibration_csv(path, calib: RotationCalibration) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS)
        for row in zip(*(getattr(calib, k) for k in RotationCalibration.COLUMNS)):
            wr.writerow([repr(float(v)) for v in row])
    return path


def read_calibration_csv(path) -> RotationCalibration:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or any(k not in rows[0] for k in CSV_COLUMNS):
        raise CalibrationError(f"calibration CSV needs columns {', '.join(CSV_COLUMNS)}")
    try:
        cols = [np.array([float(r[k]) for r in rows]) for k in CSV_COLUMNS]
    except ValueError as exc:
        raise CalibrationError(f"calibration CSV has a non-numeric entry: {exc}") from None
    return RotationCalibration(*cols)


# ----------------------------------------------------------------- depth maps

def tile_depth(tile, calib: RotationCalibration, sigma: float = 1.0, exclusion: Optional[float] = None,
               window: str = "hann") -> tuple[float, float]:
    """Depth (m) and confidence of one tile.

    ``exclusion`` is the radius of the skipped central disk; it defaults to
    ``calib.exclusion_radius``.  Returns ``(nan, 0.0)`` for constant tiles,
    when fewer than two off-center peaks exist, or when the echo angle falls
    outside the calibrated range.
    """
    try:
        cep = power_cepstrum(tile, sigma, window)
    except NoSignal:
        return float("nan"), 0.0
    peaks = cepstral_peaks(cep, calib.exclusion_radius if exclusion is None else exclusion)
    values = [reference_level(sigma)] + [p.value for p in peaks]
    cl = confidence_level(values)
    if len(peaks) < 2 or cl == 0.0:
        return float("nan"), 0.0
    z = float(calib.depth_at(echo_angle(peaks[0])))
    if not np.isfinite(z):
        return float("nan"), 0.0
    return z, cl


def tile_starts(length: int, size: int, stride: int) -> list:
    if length < size:
        raise ValueError(f"image dimension {length} smaller than tile {size}")
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


def build_depth_map(image: ScalarMap, tiles: TileGrid, calib: RotationCalibration,
                    cl_threshold: float = 0.42, sigma: float = 1.0) -> DepthMap:
    """Tile-wise cepstral depth splatted back to pixels.

    Valid tiles (confidence at or above ``cl_threshold``) contribute their
    depth with weight ``confidence * tent``, where the tent falls linearly from
    the tile center to its edge; half-overlapping tiles thus interpolate
    linearly between their centers.  A pixel's confidence is the best
    confidence among the tiles covering it.
    """
    img = np.asarray(image.values, float)
    h, w = img.shape
    T = tiles.size
    ys = tile_starts(h, T, tiles.stride)
    xs = tile_starts(w, T, tiles.stride)
    ramp = 1 - np.abs(np.arange(T) - (T - 1) / 2) / (T / 2)
    tent = np.outer(np.maximum(ramp, 1e-3), np.maximum(ramp, 1e-3))
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    conf = np.zeros((h, w))
    for y0 in ys:
        for x0 in xs:
            z, cl = tile_depth(img[y0:y0 + T, x0:x0 + T], calib, sigma, window=tiles.window)
            sl = (slice(y0, y0 + T), slice(x0, x0 + T))
            conf[sl] = np.maximum(conf[sl], cl)
            if cl >= cl_threshold:
                num[sl] += tent * cl * z
                den[sl] += tent * cl
    void = conf < cl_threshold
    depth = np.where(void, 0.0, num / np.where(den > 0, den, 1.0))
    return DepthMap(image.grid, depth, conf, void, cl_threshold)

"""Fusion of the coarse diffraction depth with polarization normals.

Stages, each a function of its own: DOLP continuity check (GDOLP, DCD),
region segmentation, void completion of the depth map on the downsampled
grid, reference normals from the completed depth, azimuth disambiguation,
surface-index fit, Frankot-Chellappa integration and absolute rescaling.
:func:`reconstruct` runs them per region and keeps every intermediate.

Gradient convention: columns are +x, rows are +y and depth grows away from
the camera.  A surface ``z(x, y)`` has normal ``(-z_x, -z_y, 1) / norm``, so
its azimuth is ``atan2(-z_y, -z_x)`` and ``tan(zenith) = |grad z|``.  A plane
rising toward +x therefore has azimuth pi.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    CameraSpec,
    DepthMap,
    GridSpec,
    NormalField,
    PolarizationStack,
    ScalarMap,
    save_field,
    wrap_angle,
)
from .depthdiff import RotationCalibration, TileGrid, build_depth_map
from .polarization import (
    N_MAX,
    N_MIN,
    ZENITH_MAX,
    azimuth_candidates,
    dolp_grazing_limit,
    extract_dolp,
    extract_pol_angle,
    zenith_from_dolp,
)

__all__ = [
    "FusionConfig",
    "FusionError",
    "NoAnchor",
    "ZenithUninformative",
    "RegionSegmentation",
    "RegionResult",
    "FusionResult",
    "IndexFit",
    "downsample",
    "upsample",
    "gdolp",
    "dcd",
    "segment_regions",
    "lowres_depth",
    "complete_depth",
    "reference_angles",
    "correct_azimuth",
    "fit_surface_index",
    "index_objective",
    "integrate_normals",
    "frankot_chellappa",
    "rescale_absolute",
    "reconstruct",
    "tile_center_hull",
    "classify_material",
]

EIGHT = np.ones((3, 3), bool)


class FusionError(RuntimeError):
    pass


class NoAnchor(FusionError):
    pass


class ZenithUninformative(FusionError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    """Thresholds and numerical settings of the fusion pipeline.

    ``pwc`` is the pixel width assumed during integration; ``None`` means the
    world pixel width at the region's mean depth.  ``dolp_band`` gives the
    lowest DOLP used for the index fit and the highest as a fraction of the
    grazing limit at the top of ``n_bounds``.  ``edge_band`` downsampled
    cells next to a region edge are left out of the fit.  Below
    ``azimuth_dolp_floor`` a pixel is nearly fronto-parallel, its reference
    direction is dominated by depth noise, and its azimuth is taken from the
    neighbors instead.
    """

    downsample: int = 10
    gdolp_threshold: float = 0.15
    dcd_threshold: int = 50
    cl_threshold: float = 0.42
    completion_sigma: float = 2.0
    fill_iterations: int = 1000
    min_region: int = 4
    n_bounds: tuple = (N_MIN, N_MAX)
    n_step: float = 0.01
    n_tol: float = 1e-3
    dolp_band: tuple = (0.01, 0.95)
    edge_band: int = 1
    azimuth_dolp_floor: float = 0.01
    min_fit_pixels: int = 100
    fit_max_pixels: int = 65536
    pwc: Optional[float] = None
    zenith_cap: float = float(ZENITH_MAX)

    def __post_init__(self):
        positive = ("downsample", "gdolp_threshold", "dcd_threshold", "cl_threshold", "completion_sigma",
                    "fill_iterations", "min_region", "n_step", "n_tol", "min_fit_pixels", "fit_max_pixels")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.pwc is not None and not self.pwc > 0:
            raise ValueError(f"pwc must be positive, got {self.pwc!r}")
        lo, hi = (float(v) for v in self.n_bounds)
        if not lo < 1.5 < hi:
            raise ValueError(f"n_bounds must bracket 1.5, got {self.n_bounds!r}")
        object.__setattr__(self, "n_bounds", (lo, hi))
        if self.edge_band < 0:
            raise ValueError("edge_band must be non-negative")
        if not 0 <= self.azimuth_dolp_floor < 1:
            raise ValueError(f"azimuth_dolp_floor must lie in [0, 1), got {self.azimuth_dolp_floor!r}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown fusion config key(s): {', '.join(bad)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


# ----------------------------------------------------------------- resampling

def downsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Block mean over ``factor`` x ``factor`` cells; a ragged remainder is dropped."""
    v = np.asarray(values, float)
    h, w = v.shape[0] // factor, v.shape[1] // factor
    if h == 0 or w == 0:
        raise ValueError(f"map {v.shape} smaller than one {factor}x{factor} block")
    return v[: h * factor, : w * factor].reshape(h, factor, w, factor).mean(axis=(1, 3))


def _full_coords(shape_full, shape_low, factor):
    ys = (np.arange(shape_full[0]) - (factor - 1) / 2) / factor
    xs = (np.arange(shape_full[1]) - (factor - 1) / 2) / factor
    return np.clip(ys, 0, shape_low[0] - 1), np.clip(xs, 0, shape_low[1] - 1)


def upsample(values: np.ndarray, shape, factor: int, order: int = 1) -> np.ndarray:
    """Resize a block grid back to ``shape``; cell centers map to block centers.

    ``order=1`` is bilinear, ``order=0`` nearest cell.
    """
    v = np.asarray(values)
    ys, xs = _full_coords(shape, v.shape, factor)
    if order == 0:
        iy = np.rint(ys).astype(int)
        ix = np.rint(xs).astype(int)
        return v[iy[:, None], ix[None, :]]
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(np.asarray(v, float), [yy, xx], order=1, mode="nearest")


# ---------------------------------------------------------------- continuity

def gdolp(dolp: ScalarMap, cfg: FusionConfig = FusionConfig(), valid: Optional[np.ndarray] = None) -> ScalarMap:
    """Five-point Laplacian of the block-averaged DOLP.

    Blocks containing any invalid pixel are invalid, and so is every cell
    whose stencil touches one; those cells carry 0.  The result is signed;
    thresholds apply to its magnitude.
    """
    f = cfg.downsample
    vals = np.asarray(dolp.values, float)
    ok = dolp.valid_mask if valid is None else np.asarray(valid, bool)
    low = downsample(np.where(ok, vals, 0.0), f)
    low_ok = downsample(ok.astype(float), f) == 1.0
    if min(low.shape) < 3:
        raise ValueError(f"downsampled DOLP map {low.shape} is smaller than 3x3")
    lap = np.zeros_like(low)
    lap[1:-1, 1:-1] = (low[:-2, 1:-1] + low[2:, 1:-1] + low[1:-1, :-2] + low[1:-1, 2:]
                       - 4 * low[1:-1, 1:-1])
    stencil_ok = np.zeros_like(low_ok)
    stencil_ok[1:-1, 1:-1] = (low_ok[1:-1, 1:-1] & low_ok[:-2, 1:-1] & low_ok[2:, 1:-1]
                              & low_ok[1:-1, :-2] & low_ok[1:-1, 2:])
    lap = np.where(stencil_ok, lap, 0.0)
    h, w = low.shape
    return ScalarMap(GridSpec(w, h, dolp.grid.pitch * f), lap, "laplacian", valid=stencil_ok)


def dcd(gdolp_map, cfg: FusionConfig = FusionConfig(), region: Optional[np.ndarray] = None) -> tuple[int, bool]:
    """Size of the largest 8-connected set with ``|GDOLP|`` above threshold.

    Returns ``(DCD, continuous)`` with ``continuous`` true when DCD is below
    ``cfg.dcd_threshold``.  ``region`` restricts the count to a low-res mask.
    """
    g = np.asarray(gdolp_map.values if isinstance(gdolp_map, ScalarMap) else gdolp_map, float)
    high = np.abs(g) > cfg.gdolp_threshold
    if region is not None:
        high &= np.asarray(region, bool)
    labels, count = ndimage.label(high, structure=EIGHT)
    size = int(np.bincount(labels.ravel())[1:].max()) if count else 0
    return size, size < cfg.dcd_threshold


@dataclass(frozen=True)
class RegionSegmentation:
    """Low-res region labels (0 = not analyzed) with per-region verdicts."""

    labels: np.ndarray
    dcd: dict
    pixels: dict
    factor: int
    user_masks: bool = False

    @property
    def ids(self) -> list:
        return sorted(self.dcd)

    def continuous(self, rid: int, cfg: FusionConfig = FusionConfig()) -> bool:
        return self.dcd[rid] < cfg.dcd_threshold

    def mask(self, rid: int) -> np.ndarray:
        return self.labels == rid

    def full_mask(self, rid: int, shape, valid: Optional[np.ndarray] = None) -> np.ndarray:
        m = upsample(self.labels == rid, shape, self.factor, order=0).astype(bool)
        return m if valid is None else m & valid


def segment_regions(g: ScalarMap, cfg: FusionConfig = FusionConfig(),
                    masks: Optional[np.ndarray] = None) -> RegionSegmentation:
    """Regions of the low-GDOLP area, or the user's label image verbatim.

    Automatic regions are 8-connected components of valid cells with
    ``|GDOLP|`` at or below threshold, at least ``cfg.min_region`` cells.
    Each region's DCD counts the high-GDOLP cells enclosed by it (holes),
    which are the candidate internal discontinuities.  With user masks the
    DCD counts every high cell inside the mask.
    """
    vals = np.abs(np.asarray(g.values, float))
    if masks is not None:
        labels = np.asarray(masks)
        if labels.shape != vals.shape:
            raise ValueError(f"mask shape {labels.shape} does not match the downsampled grid {vals.shape}")
        labels = labels.astype(np.int64)
        ids = [int(i) for i in np.unique(labels) if i != 0]
        verdict = {i: dcd(vals, cfg, labels == i)[0] for i in ids}
        pixels = {i: int((labels == i).sum()) for i in ids}
        return RegionSegmentation(labels, verdict, pixels, cfg.downsample, True)
    low = (vals <= cfg.gdolp_threshold) & g.valid_mask
    comp, count = ndimage.label(low, structure=EIGHT)
    sizes = np.bincount(comp.ravel(), minlength=count + 1)
    labels = np.zeros_like(comp)
    verdict, pixels = {}, {}
    nxt = 1
    for k in range(1, count + 1):
        if sizes[k] < cfg.min_region:
            continue
        m = comp == k
        filled = ndimage.binary_fill_holes(m)
        labels[m] = nxt
        verdict[nxt] = dcd(vals, cfg, filled & ~m)[0]
        pixels[nxt] = int(sizes[k])
        nxt += 1
    return RegionSegmentation(labels, verdict, pixels, cfg.downsample, False)


# ---------------------------------------------------------------- completion

def lowres_depth(raw: DepthMap, factor: int) -> DepthMap:
    """Block statistics of a full-res depth map.

    A cell is void unless at least half of its pixels carry depth; its depth
    is the mean over those pixels and its confidence their mean confidence.
    """
    ok = ~raw.void
    n = downsample(ok.astype(float), factor)
    s = downsample(np.where(ok, raw.depth, 0.0), factor)
    c = downsample(np.where(ok, raw.confidence, 0.0), factor)
    void = n < 0.5
    depth = np.where(void, 0.0, s / np.maximum(n, 1e-12))
    conf = np.where(n > 0, c / np.maximum(n, 1e-12), 0.0)
    h, w = depth.shape
    return DepthMap(GridSpec(w, h, raw.grid.pitch * factor), depth, conf, void, raw.threshold)


def _masked_gaussian(values, mask, sigma):
    w = ndimage.gaussian_filter(mask.astype(float), sigma, mode="nearest")
    v = ndimage.gaussian_filter(np.where(mask, values, 0.0), sigma, mode="nearest")
    return np.where(mask, v / np.where(w > 0, w, 1.0), values)


def complete_depth(raw: DepthMap, region: np.ndarray, cfg: FusionConfig = FusionConfig()) -> DepthMap:
    """Fill voids inside ``region`` from their neighbors, then smooth.

    ``raw`` and ``region`` live on the same (downsampled) grid.  Each pass
    assigns every void region cell that touches a filled one the mean of its
    filled 8-neighbors; a Gaussian normalized to the region follows.

    Raises
    ------
    NoAnchor
        If no cell of the region has depth.
    """
    region = np.asarray(region, bool)
    have = region & ~raw.void
    if not have.any():
        raise NoAnchor("no diffraction anchor: region is entirely void")
    depth = np.where(have, raw.depth, 0.0)
    for _ in range(cfg.fill_iterations):
        todo = region & ~have
        if not todo.any():
            break
        s = ndimage.convolve(depth, EIGHT.astype(float), mode="constant")
        n = ndimage.convolve(have.astype(float), EIGHT.astype(float), mode="constant")
        grow = todo & (n > 0)
        if not grow.any():
            break
        depth = np.where(grow, s / np.maximum(n, 1), depth)
        have = have | grow
    # cells cut off from every anchor take the region's anchor mean
    stranded = region & ~have
    if stranded.any():
        depth = np.where(stranded, depth[have].mean(), depth)
    smooth = _masked_gaussian(depth, region, cfg.completion_sigma)
    void = ~region
    return DepthMap(raw.grid, np.where(region, smooth, 0.0), np.where(region, raw.confidence, 0.0),
                    void, raw.threshold)


# ---------------------------------------------------------- reference normals

def reference_angles(completed: DepthMap, cam: CameraSpec, region: np.ndarray, shape=None,
                     factor: int = 1):
    """Zenith and azimuth implied by the completed depth.

    Central differences on the low-res grid use a world cell width of
    ``depth * PFOV * factor`` at each cell.  The two gradient components are
    resized bilinearly to ``shape``; resizing components rather than angles
    keeps the azimuth free of wrap artifacts.

    Returns
    -------
    theta, phi : ndarray
        Full-resolution zenith and azimuth in [0, 2 pi).
    undefined : ndarray of bool
        Zero-gradient pixels, where the azimuth carries no information.
    """
    region = np.asarray(region, bool)
    z = np.where(region, completed.depth, 0.0)
    zx, zy = _region_gradient(z, region)
    width = np.where(region, completed.depth, 1.0) * cam.pfov * factor
    zx, zy = zx / width, zy / width
    if shape is not None:
        zx = upsample(zx, shape, factor)
        zy = upsample(zy, shape, factor)
    g = np.hypot(zx, zy)
    theta = np.arctan(g)
    phi = wrap_angle(np.arctan2(-zy, -zx))
    return theta, phi, g < 1e-12


def _region_gradient(z, region):
    """Per-cell gradient using central differences, one-sided at region edges."""
    out = []
    for axis in (1, 0):
        fwd = np.roll(z, -1, axis)
        bwd = np.roll(z, 1, axis)
        fok = np.roll(region, -1, axis)
        bok = np.roll(region, 1, axis)
        edge = [slice(None)] * 2
        edge[axis] = -1
        fok[tuple(edge)] = False
        edge[axis] = 0
        bok[tuple(edge)] = False
        d = np.where(fok & bok, 0.5 * (fwd - bwd),
                     np.where(fok, fwd - z, np.where(bok, z - bwd, 0.0)))
        out.append(np.where(region, d, 0.0))
    return out[0], out[1]


def correct_azimuth(phi0, phi_ref, undefined: Optional[np.ndarray] = None,
                    valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Pick, per pixel, whichever of the two azimuth candidates lies nearer ``phi_ref``.

    ``phi0`` is the polarization angle.  Where the reference is undefined the
    candidate closest to the circular mean of the decided 3x3 neighbors wins,
    grown outward until every reachable pixel is decided.  Pixels outside
    ``valid`` neither vote nor get decided; unreachable ones keep the first
    candidate.
    """
    a, b = azimuth_candidates(phi0)
    da = np.abs(wrap_angle(a - phi_ref + np.pi) - np.pi)
    db = np.abs(wrap_angle(b - phi_ref + np.pi) - np.pi)
    out = np.where(db < da, b, a)
    undefined = np.zeros(np.shape(a), bool) if undefined is None else np.asarray(undefined, bool)
    decided = ~undefined
    if valid is not None:
        valid = np.asarray(valid, bool)
        undefined = undefined & valid
        decided = decided & valid
    if undefined.any() and decided.any():
        k = EIGHT.astype(float)
        for _ in range(sum(np.shape(a))):
            todo = undefined & ~decided
            if not todo.any():
                break
            count = ndimage.convolve(decided.astype(float), k, mode="constant")
            grow = todo & (count > 0)
            if not grow.any():
                break
            cx = ndimage.convolve(np.where(decided, np.cos(out), 0.0), k, mode="constant")
            cy = ndimage.convolve(np.where(decided, np.sin(out), 0.0), k, mode="constant")
            # (cx, cy) is an unnormalized mean direction; the nearer candidate has the larger projection
            pick = np.where(cx * np.cos(b) + cy * np.sin(b) > cx * np.cos(a) + cy * np.sin(a), b, a)
            out = np.where(grow, pick, out)
            decided = decided | grow
    return np.where(undefined & ~decided, a, out)


# ------------------------------------------------------------- surface index

@dataclass(frozen=True)
class IndexFit:
    n_s: float
    residual: float
    pixels: int
    grid: np.ndarray = field(repr=False, default=None)
    objective: np.ndarray = field(repr=False, default=None)


def index_objective(n_s: float, theta_ref: np.ndarray, dolp: np.ndarray, cap: float = float(ZENITH_MAX)) -> float:
    """Mean absolute zenith disagreement for one surface index."""
    theta, _ = zenith_from_dolp(n_s, dolp, method="closed", theta_max=cap)
    return float(np.mean(np.abs(theta - theta_ref)))


def _fit_pixels(theta_ref, dolp, excluded, cfg):
    lo, frac = cfg.dolp_band
    hi = frac * float(dolp_grazing_limit(cfg.n_bounds[1]))
    d = np.asarray(dolp, float)
    sel = ~np.asarray(excluded, bool) & (d >= lo) & (d <= hi) & np.isfinite(theta_ref)
    idx = np.flatnonzero(sel.ravel())
    if idx.size > cfg.fit_max_pixels:
        idx = idx[np.linspace(0, idx.size - 1, cfg.fit_max_pixels).astype(int)]
    return np.asarray(theta_ref, float).ravel()[idx], d.ravel()[idx]


def fit_surface_index(theta_ref, dolp, excluded, cfg: FusionConfig = FusionConfig()) -> IndexFit:
    """Surface index minimizing the summed zenith disagreement.

    Pixels outside the DOLP band (near-zero DOLP carries no zenith
    information; DOLP near the grazing limit saturates) and excluded pixels
    are dropped.  A grid search at ``cfg.n_step`` is refined by golden-section
    search to ``cfg.n_tol``.

    Raises
    ------
    ZenithUninformative
        With fewer than ``cfg.min_fit_pixels`` usable pixels, or when the
        objective does not vary over the search interval.
    """
    th, d = _fit_pixels(theta_ref, dolp, excluded, cfg)
    if th.size < cfg.min_fit_pixels:
        raise ZenithUninformative(f"zenith uninformative: {th.size} usable pixels (need {cfg.min_fit_pixels})")
    lo, hi = cfg.n_bounds
    grid = np.round(np.arange(lo, hi + cfg.n_step / 2, cfg.n_step), 12)
    obj = np.array([index_objective(n, th, d, cfg.zenith_cap) for n in grid])
    if np.ptp(obj) < 1e-12:
        raise ZenithUninformative("zenith uninformative: objective flat over the index interval")
    k = int(np.argmin(obj))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    f = lambda n: index_objective(n, th, d, cfg.zenith_cap)  # noqa: E731
    invphi = (np.sqrt(5) - 1) / 2
    c, e = b - invphi * (b - a), a + invphi * (b - a)
    fc, fe = f(c), f(e)
    while b - a > cfg.n_tol:
        if fc < fe:
            b, e, fe = e, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + invphi * (b - a)
            fe = f(e)
    best, fbest = (c, fc) if fc < fe else (e, fe)
    if obj[k] <= fbest:
        best, fbest = grid[k], obj[k]
    return IndexFit(float(best), float(fbest), int(th.size), grid, obj)


# --------------------------------------------------------------- integration

def _mirror_odd(d, axis):
    # forward differences of an evenly mirrored signal: negated, reversed, shifted one sample
    return np.roll(-np.flip(d, axis), -1, axis)


def frankot_chellappa(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Least-squares integrable surface from forward differences, zero mean.

    ``p[i, j]`` approximates ``z[i, j + 1] - z[i, j]`` and ``q[i, j]``
    approximates ``z[i + 1, j] - z[i, j]``; the last column of ``p`` and last
    row of ``q`` are ignored.  The surface is mirrored evenly to twice its size
    before the spectral solve, so no periodic wrap is imposed.
    """
    p = np.array(p, float)
    q = np.array(q, float)
    p[:, -1] = 0.0
    q[-1, :] = 0.0
    h, w = p.shape
    top_p = np.concatenate([p, _mirror_odd(p, 1)], axis=1)
    P = np.concatenate([top_p, np.flip(top_p, 0)], axis=0)
    left_q = np.concatenate([q, _mirror_odd(q, 0)], axis=0)
    Q = np.concatenate([left_q, np.flip(left_q, 1)], axis=1)
    H, W = P.shape
    wx = 2 * np.pi * np.fft.fftfreq(W)
    wy = 2 * np.pi * np.fft.fftfreq(H)
    # spectral derivative matched to the forward difference kernel
    dx = np.exp(1j * wx)[None, :] - 1
    dy = np.exp(1j * wy)[:, None] - 1
    den = np.abs(dx) ** 2 + np.abs(dy) ** 2
    den[0, 0] = 1.0
    Z = (np.conj(dx) * np.fft.fft2(P) + np.conj(dy) * np.fft.fft2(Q)) / den
    Z[0, 0] = 0.0
    z = np.real(np.fft.ifft2(Z))[:h, :w]
    return z - z.mean()


def curl(p: np.ndarray, q: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean ``|dp/dy - dq/dx|`` over ``mask``: zero for an integrable field."""
    c = np.abs(np.gradient(p, axis=0) - np.gradient(q, axis=1))
    return float(c[mask].mean() if mask is not None and mask.any() else c.mean())


def integrate_normals(normals: NormalField, cfg: FusionConfig = FusionConfig(), region=None,
                      pwc: Optional[float] = None):
    """Relative surface from a normal field.

    The zenith is capped at ``cfg.zenith_cap`` before slopes are formed.  The
    region's mean slope is removed and integrated analytically, so affine
    surfaces come back exactly; the residual goes through Frankot-Chellappa
    with zero slope outside the region.

    Returns
    -------
    z_r : ndarray
        Zero-mean over the region, in units of the assumed pixel width
        ``pwc`` (1 if omitted).
    curl : float
        Mean curl of the input slopes over the region.
    """
    region = normals.valid if region is None else np.asarray(region, bool)
    theta = np.minimum(normals.zenith, cfg.zenith_cap)
    t = np.tan(theta)
    p = np.where(region, -t * np.cos(normals.azimuth), 0.0)
    q = np.where(region, -t * np.sin(normals.azimuth), 0.0)
    # pixel-centered slopes, converted to the forward-difference grid below
    h, w = p.shape
    yy, xx = np.mgrid[:h, :w].astype(float)
    if region.any():
        a, b = p[region].mean(), q[region].mean()
    else:
        a = b = 0.0
    plane = a * xx + b * yy
    rp = np.where(region, p - a, 0.0)
    rq = np.where(region, q - b, 0.0)
    # average neighboring centered slopes onto the half-pixel positions
    fp = 0.5 * (rp + np.roll(rp, -1, axis=1))
    fq = 0.5 * (rq + np.roll(rq, -1, axis=0))
    z = plane + frankot_chellappa(fp, fq)
    if region.any():
        z = z - z[region].mean()
    scale = 1.0 if pwc is None else pwc
    return np.where(region, z * scale, 0.0), curl(p, q, region)


def rescale_absolute(z_r: np.ndarray, region: np.ndarray, ava: float, cam: CameraSpec,
                     pwc: Optional[float] = None) -> np.ndarray:
    """Map a relative surface to meters around the region's absolute mean depth.

    ``z_a = (z_r - mean(z_r)) * ava * PFOV / pwc + ava`` inside ``region``;
    ``pwc`` defaults to ``ava * PFOV``.
    """
    region = np.asarray(region, bool)
    pwc = ava * cam.pfov if pwc is None else pwc
    avr = float(z_r[region].mean())
    z_a = (z_r - avr) * (ava * cam.pfov / pwc) + ava
    return np.where(region, z_a, 0.0)


# ------------------------------------------------------------- orchestration

@dataclass
class RegionResult:
    rid: int
    pixels: int
    dcd: int
    continuous: bool
    status: str = "ok"
    void_fraction: float = float("nan")
    n_s: float = float("nan")
    fit_residual: float = float("nan")
    fit_pixels: int = 0
    curl: float = float("nan")
    mean_depth: float = float("nan")
    material: Optional[str] = None
    depth_error_rms: float = float("nan")
    depth_error_mean: float = float("nan")


@dataclass
class FusionResult:
    """Every intermediate of a reconstruction, full and downsampled resolution."""

    dolp: ScalarMap
    pol_angle: ScalarMap
    raw_depth: DepthMap
    gdolp: ScalarMap
    segmentation: RegionSegmentation
    completed: DepthMap
    theta_ref: ScalarMap
    phi_ref: ScalarMap
    normals: NormalField
    relative: ScalarMap
    absolute: DepthMap
    regions: list = field(default_factory=list)

    @property
    def n_s(self) -> dict:
        return {r.rid: r.n_s for r in self.regions}

    def region(self, rid: int) -> RegionResult:
        return next(r for r in self.regions if r.rid == rid)

    def region_mask(self, rid: int) -> np.ndarray:
        return self.segmentation.full_mask(rid, self.dolp.grid.shape, self.dolp.valid_mask)

    def evaluate(self, truth_depth: np.ndarray, truth_id: Optional[np.ndarray] = None) -> list:
        """Fill per-region normalized depth errors against a ground-truth depth map."""
        truth_depth = np.asarray(truth_depth, float)
        for r in self.regions:
            if r.status != "ok":
                continue
            m = self.region_mask(r.rid) & (truth_depth > 0)
            if truth_id is not None:
                m &= np.asarray(truth_id) > 0
            if not m.any():
                continue
            rel = (self.absolute.depth[m] - truth_depth[m]) / truth_depth[m]
            r.depth_error_rms = float(np.sqrt(np.mean(rel ** 2)))
            r.depth_error_mean = float(abs(self.absolute.depth[m].mean() - truth_depth[m].mean())
                                       / truth_depth[m].mean())
        return self.regions

    def write_metrics_csv(self, path) -> Path:
        path = Path(path)
        cols = list(RegionResult.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for r in self.regions:
                wr.writerow(["" if getattr(r, c) is None else _fmt(getattr(r, c)) for c in cols])
        return path

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        labels = self.segmentation.labels
        h, w = labels.shape
        items = [
            ("a_dolp", self.dolp), ("b_pol_angle", self.pol_angle), ("c_raw_depth", self.raw_depth),
            ("d_gdolp", self.gdolp),
            ("e_regions", ScalarMap(GridSpec(w, h, self.gdolp.grid.pitch), labels.astype(float), "label")),
            ("f_completed", self.completed), ("g_theta_ref", self.theta_ref), ("g_phi_ref", self.phi_ref),
            ("h_normals", self.normals), ("i_relative", self.relative), ("i_absolute", self.absolute),
        ]
        for name, obj in items:
            save_field(d / f"{name}.emf", obj)
        self.write_metrics_csv(d / "metrics.csv")
        return d


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def tile_center_hull(shape, tiles: TileGrid) -> np.ndarray:
    """Pixels between the outermost tile centers.

    Beyond them the splatted depth is flat by construction, so it says
    nothing about slope.
    """
    h, w = shape
    m = np.zeros(shape, bool)
    lo = tiles.size // 2
    m[lo:h - lo, lo:w - lo] = True
    return m


def reconstruct(stack: PolarizationStack, calib: RotationCalibration, cam: CameraSpec,
                cfg: FusionConfig = FusionConfig(), masks: Optional[np.ndarray] = None,
                tiles: TileGrid = TileGrid(), materials: Optional[Sequence] = None) -> FusionResult:
    """Run the full fusion pipeline on a four-channel capture.

    Regions that fail (discontinuous, no depth anchor, uninformative zenith)
    are recorded with a status and skipped; the others proceed.  ``masks`` is
    an optional label image on the downsampled grid.
    """
    grid = stack.grid
    shape = grid.shape
    f = cfg.downsample
    dolp = extract_dolp(stack)
    angle = extract_pol_angle(stack)
    valid = dolp.valid_mask
    image = ScalarMap(grid, stack.s0, "intensity")
    raw = build_depth_map(image, tiles, calib, cfg.cl_threshold)
    raw = DepthMap(grid, raw.depth, raw.confidence, raw.void | ~valid, raw.threshold)
    g = gdolp(dolp, cfg)
    seg = segment_regions(g, cfg, masks)
    low = lowres_depth(raw, f)
    hull = tile_center_hull(shape, tiles)

    comp_depth = np.zeros(low.grid.shape)
    comp_region = np.zeros(low.grid.shape, bool)
    theta_ref = np.zeros(shape)
    phi_ref = np.zeros(shape)
    zen = np.zeros(shape)
    azi = np.zeros(shape)
    nvalid = np.zeros(shape, bool)
    rel = np.zeros(shape)
    absd = np.zeros(shape)
    absvoid = np.ones(shape, bool)
    results = []
    for rid in seg.ids:
        rmask = seg.mask(rid)
        full = seg.full_mask(rid, shape, valid)
        res = RegionResult(rid, int(full.sum()), int(seg.dcd[rid]), seg.continuous(rid, cfg))
        res.void_fraction = float(raw.void[full].mean()) if full.any() else 1.0
        results.append(res)
        if not full.any():
            res.status = "empty"
            continue
        if not res.continuous:
            res.status = "discontinuous"
            continue
        try:
            completed = complete_depth(low, rmask, cfg)
        except NoAnchor:
            res.status = "no_anchor"
            continue
        comp_depth[rmask] = completed.depth[rmask]
        comp_region |= rmask
        th, ph, undefined = reference_angles(completed, cam, rmask, shape, f)
        undefined = undefined | ~hull | (dolp.values < cfg.azimuth_dolp_floor)
        theta_ref[full] = th[full]
        phi_ref[full] = ph[full]
        azimuth = correct_azimuth(angle.values, ph, undefined & full, full)
        inner = ndimage.binary_erosion(rmask, EIGHT, iterations=cfg.edge_band) if cfg.edge_band else rmask
        fit_zone = full & hull & upsample(inner, shape, f, order=0).astype(bool)
        excluded = ~fit_zone | raw.void | ~angle.valid_mask
        try:
            fit = fit_surface_index(th, dolp.values, excluded, cfg)
        except ZenithUninformative:
            res.status = "zenith_uninformative"
            continue
        res.n_s, res.fit_residual, res.fit_pixels = fit.n_s, fit.residual, fit.pixels
        theta, _ = zenith_from_dolp(fit.n_s, dolp.values, theta_max=cfg.zenith_cap)
        zen[full] = theta[full]
        azi[full] = azimuth[full]
        nvalid |= full
        region_normals = NormalField(grid, np.where(full, theta, 0.0), azimuth, full)
        ava = float(completed.depth[rmask].mean())
        pwc = ava * cam.pfov if cfg.pwc is None else cfg.pwc
        z_r, res.curl = integrate_normals(region_normals, cfg, full, pwc)
        rel[full] = z_r[full]
        z_a = rescale_absolute(z_r, full, ava, cam, pwc)
        absd[full] = z_a[full]
        absvoid[full] = False
        res.mean_depth = ava
        if materials:
            res.material = classify_material(fit.n_s, materials)

    lg = low.grid
    completed_map = DepthMap(lg, comp_depth, low.confidence, ~comp_region, low.threshold)
    return FusionResult(
        dolp=dolp,
        pol_angle=angle,
        raw_depth=raw,
        gdolp=g,
        segmentation=seg,
        completed=completed_map,
        theta_ref=ScalarMap(grid, theta_ref, "angle", "halfpi"),
        phi_ref=ScalarMap(grid, phi_ref, "angle", "2pi"),
        normals=NormalField(grid, np.minimum(zen, cfg.zenith_cap), azi, nvalid),
        relative=ScalarMap(grid, rel, "height", valid=~absvoid),
        absolute=DepthMap(grid, absd, np.where(absvoid, 0.0, 1.0), absvoid, 0.5),
        regions=results,
    )


def classify_material(n_s: float, table: Sequence) -> str:
    """Nearest entry of ``(label, index, tolerance)`` rows within tolerance, else ``"unknown"``."""
    rows = list(table)
    if not rows:
        raise ValueError("material table is empty")
    best = min(rows, key=lambda r: abs(n_s - float(r[1])))
    return str(best[0]) if abs(n_s - float(best[1])) <= float(best[2]) else "unknown"


def load_material_table(path) -> list:
    """JSON list of ``{"label", "n_s", "tolerance"}`` objects, or a CSV with those columns."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        rows = [(r["label"], float(r["n_s"]), float(r["tolerance"])) for r in json.loads(text)]
    else:
        rows = [(r["label"], float(r["n_s"]), float(r["tolerance"])) for r in csv.DictReader(text.splitlines())]
    if not rows:
        raise ValueError(f"material table {path} is empty")
    return rows

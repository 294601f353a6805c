"""Fresnel coefficients, DOLP models and Stokes-style extraction.

Angles are in radians throughout.  Arrays broadcast wherever that makes
sense; scalar inputs return numpy scalars.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PolarizationStack, ScalarMap, wrap_angle

__all__ = [
    "N_MIN",
    "N_MAX",
    "ZENITH_MAX",
    "FresnelCoefficients",
    "TotalInternalReflection",
    "check_surface_index",
    "fresnel",
    "dolp_specular",
    "dolp_diffuse",
    "dolp_grazing_limit",
    "zenith_from_dolp",
    "malus_sample",
    "render_channels",
    "extract_dolp",
    "extract_pol_angle",
    "azimuth_candidates",
    "normal_from_angles",
    "angles_from_normal",
    "dolp_curves",
]

N_MIN, N_MAX = 1.05, 3.5
ZENITH_MAX = np.radians(89.9)


class TotalInternalReflection(ValueError):
    pass


def check_surface_index(n_s: float) -> float:
    if not (N_MIN <= n_s <= N_MAX):
        raise ValueError(f"surface index {n_s} outside working range [{N_MIN}, {N_MAX}]")
    return float(n_s)


@dataclass(frozen=True)
class FresnelCoefficients:
    r_s: np.ndarray
    r_p: np.ndarray
    t_s: np.ndarray
    t_p: np.ndarray
    theta2: np.ndarray

    @property
    def R_s(self):
        return self.r_s ** 2

    @property
    def R_p(self):
        return self.r_p ** 2

    @property
    def T_s(self):
        return self.t_s ** 2

    @property
    def T_p(self):
        return self.t_p ** 2


def fresnel(n1, n2, theta1) -> FresnelCoefficients:
    """Amplitude reflection and transmission coefficients.

    The p-reflection sign follows ``r_p = (n2 cos t1 - n1 cos t2) / (n1 cos t2 + n2 cos t1)``,
    so at normal incidence from air into glass ``r_s = -0.2`` and ``r_p = +0.2``.

    Raises
    ------
    TotalInternalReflection
        If ``n1 sin(theta1) > n2`` anywhere.
    """
    n1 = np.asarray(n1, float)
    n2 = np.asarray(n2, float)
    theta1 = np.asarray(theta1, float)
    s2 = n1 * np.sin(theta1) / n2
    if np.any(np.abs(s2) > 1):
        raise TotalInternalReflection("total internal reflection: n1 sin(theta1) exceeds n2")
    theta2 = np.arcsin(s2)
    c1, c2 = np.cos(theta1), np.cos(theta2)
    r_s = (n1 * c1 - n2 * c2) / (n1 * c1 + n2 * c2)
    r_p = (n2 * c1 - n1 * c2) / (n1 * c2 + n2 * c1)
    t_s = 2 * n1 * c1 / (n1 * c1 + n2 * c2)
    t_p = 2 * n1 * c1 / (n1 * c2 + n2 * c1)
    return FresnelCoefficients(r_s, r_p, t_s, t_p, theta2)


def dolp_specular(n, theta):
    """DOLP of light specularly reflected off a dielectric of index ``n``.

    Closed form of ``|R_p - R_s| / (R_p + R_s)``; reaches 1 at Brewster's angle.
    """
    n = np.asarray(n, float)
    theta = np.asarray(theta, float)
    s2 = np.sin(theta) ** 2
    root = np.sqrt(n ** 2 - s2)
    num = 2 * s2 * np.cos(theta) * root
    den = n ** 2 - s2 - n ** 2 * s2 + 2 * s2 ** 2
    return num / den


def dolp_diffuse(n_s, theta):
    """DOLP of diffusely re-emitted light from a surface of index ``n_s``.

    Parameters
    ----------
    n_s : float or array
        Surface index.
    theta : float or array
        Zenith angle between normal and viewing ray.
    """
    n = np.asarray(n_s, float)
    theta = np.asarray(theta, float)
    s2 = np.sin(theta) ** 2
    num = (n - 1 / n) ** 2 * s2
    den = 2 + 2 * n ** 2 - (n + 1 / n) ** 2 * s2 + 4 * np.cos(theta) * np.sqrt(n ** 2 - s2)
    return num / den


def dolp_grazing_limit(n_s):
    """Limit of :func:`dolp_diffuse` as the zenith goes to 90 degrees."""
    n2 = np.asarray(n_s, float) ** 2
    return (n2 - 1) / (n2 + 1)


def _zenith_bisect(n, dolp, theta_max, iters):
    lo = np.zeros(np.broadcast(n, dolp).shape)
    hi = np.full_like(lo, theta_max)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = dolp_diffuse(n, mid) > dolp
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def _zenith_closed(n, dolp):
    # squaring the diffuse model gives a quadratic in s = sin^2(theta)
    r = dolp
    a = (n - 1 / n) ** 2 + r * (n + 1 / n) ** 2
    b = r * (2 + 2 * n ** 2)
    qa = a ** 2 - 16 * r ** 2
    qb = 16 * r ** 2 * (1 + n ** 2) - 2 * a * b
    qc = b ** 2 - 16 * r ** 2 * n ** 2
    disc = np.sqrt(np.maximum(qb ** 2 - 4 * qa * qc, 0))
    # the physical root is the one with a*s - b >= 0, i.e. the larger one
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(qa) > 1e-300, (-qb + disc) / (2 * qa), -qc / qb)
    s = np.clip(np.nan_to_num(s, nan=0.0), 0.0, 1.0)
    return np.arcsin(np.sqrt(s))


def zenith_from_dolp(n_s, dolp, method: str = "bisect", theta_max: float = ZENITH_MAX):
    """Invert the diffuse DOLP model for the zenith angle.

    Parameters
    ----------
    n_s : float or array
    dolp : float or array
    method : {"bisect", "closed"}
        ``bisect`` brackets [0, theta_max] until the interval is below 1e-10
        rad.  ``closed`` solves the equivalent quadratic in sin^2 and is what
        the index fit uses on large pixel sets.

    Returns
    -------
    theta : ndarray
    saturated : ndarray of bool
        True where ``dolp`` reaches the model value at ``theta_max``; those
        pixels are clamped to ``theta_max``.
    """
    n = np.asarray(n_s, float)
    d = np.clip(np.asarray(dolp, float), 0.0, None)
    d_max = dolp_diffuse(n, theta_max)
    saturated = d >= d_max
    if method == "bisect":
        theta = _zenith_bisect(n, np.minimum(d, d_max), theta_max, 34)
    elif method == "closed":
        theta = _zenith_closed(n, np.minimum(d, d_max))
    else:
        raise ValueError(f"unknown method {method!r}")
    theta = np.where(saturated, theta_max, np.minimum(theta, theta_max))
    theta = np.where(d <= 0, 0.0, theta)
    return theta, saturated


def malus_sample(i_max, i_min, phi0, theta_pol):
    """Intensity behind a linear analyzer at ``theta_pol``."""
    i_max = np.asarray(i_max, float)
    i_min = np.asarray(i_min, float)
    return 0.5 * (i_max + i_min) + 0.5 * (i_max - i_min) * np.cos(2 * np.asarray(theta_pol) - 2 * np.asarray(phi0))


def render_channels(s0, dolp, phi0) -> np.ndarray:
    """Four analyzer channels ``(4, ...)`` from total intensity, DOLP and angle."""
    s0 = np.asarray(s0, float)
    i_max = 0.5 * s0 * (1 + dolp)
    i_min = 0.5 * s0 * (1 - dolp)
    return np.stack([malus_sample(i_max, i_min, phi0, a) for a in PolarizationStack.ANGLES])


def _dolp_array(i0, i45, i90, i135):
    total = i0 + i90
    ok = total > 0
    num = np.hypot(i90 - i0, i45 - i135)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(ok, num / np.where(ok, total, 1.0), 0.0)
    return np.clip(d, 0.0, 1.0), ok


def extract_dolp(stack: PolarizationStack) -> ScalarMap:
    """Per-pixel DOLP; zero-intensity pixels are flagged invalid with value 0."""
    d, ok = _dolp_array(stack.i0, stack.i45, stack.i90, stack.i135)
    return ScalarMap(stack.grid, d, "dolp", valid=ok)


def extract_pol_angle(stack: PolarizationStack) -> ScalarMap:
    """Polarization angle in [0, pi); pixels with no linear polarization are invalid."""
    y = stack.i45 - stack.i135
    x = stack.i0 - stack.i90
    phi0 = wrap_angle(0.5 * np.arctan2(y, x), np.pi)
    ok = (np.hypot(x, y) > 0) & (stack.i0 + stack.i90 > 0)
    return ScalarMap(stack.grid, np.where(ok, phi0, 0.0), "angle", "pi", valid=ok)


def azimuth_candidates(phi0):
    """The two azimuths consistent with ``phi0``; they differ by exactly pi."""
    phi0 = np.asarray(phi0, float)
    return wrap_angle(phi0 + np.pi / 2), wrap_angle(phi0 + 3 * np.pi / 2)


def normal_from_angles(theta, phi):
    """Unit normal(s) ``(..., 3)`` from zenith and azimuth."""
    theta = np.asarray(theta, float)
    phi = np.asarray(phi, float)
    t = np.tan(theta)
    n = np.stack([t * np.cos(phi), t * np.sin(phi), np.ones_like(t)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def angles_from_normal(n):
    """Inverse of :func:`normal_from_angles` for normals with positive z."""
    n = np.asarray(n, float)
    theta = np.arccos(np.clip(n[..., 2] / np.linalg.norm(n, axis=-1), -1, 1))
    phi = wrap_angle(np.arctan2(n[..., 1], n[..., 0]))
    return theta, phi


def dolp_curves(indices, step_deg: float = 0.5):
    """Rows ``(n, theta_deg, dolp_specular, dolp_diffuse)`` for plotting."""
    theta_deg = np.arange(0.0, 90.0, step_deg)
    theta = np.radians(theta_deg)
    rows = []
    for n in indices:
        spec = dolp_specular(n, theta)
        diff = dolp_diffuse(n, theta)
        rows.extend((float(n), float(t), float(s), float(d)) for t, s, d in zip(theta_deg, spec, diff))
    return rows

import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polardepth.core import ComplexField, GridSpec, energy
from polardepth.optics import (
    DegeneratePSF,
    FresnelZoneParams,
    PhaseProfile,
    SamplingWarning,
    ZoneWarning,
    aliasing_free_distance,
    analytic_psf_amplitude,
    angular_spectrum_propagate,
    default_phase,
    defocus_parameter,
    depth_from_defocus,
    find_lobes,
    fresnel_zone_phase,
    lobe_rotation_angle,
    pupil_grid,
    quantize_phase,
    simulate_psf,
    working_range,
)


def _polar(profile):
    g = profile.grid
    y = np.arange(g.height) - g.height / 2 + 0.5
    x = np.arange(g.width) - g.width / 2 + 0.5
    xx, yy = np.meshgrid(x, y)
    return np.hypot(xx, yy) / profile.radius_px, np.arctan2(yy, xx)


def test_single_zone_is_vortex():
    prof = fresnel_zone_phase(FresnelZoneParams(1, 1, 0.5), GridSpec(128, 128, 1e-5))
    u, az = _polar(prof)
    inside = u <= 1
    assert np.allclose(prof.phase[inside], np.mod(az[inside], 2 * np.pi), atol=1e-12)
    assert np.all(prof.phase[~inside] == 0)


def test_positive_x_axis_has_zero_phase():
    # an odd raster puts the middle row exactly on the x-axis
    prof = fresnel_zone_phase(FresnelZoneParams(), GridSpec(129, 129, 1e-5), 60.0)
    u, az = _polar(prof)
    row = prof.grid.height // 2
    right = (np.arange(129) >= row) & (u[row] <= 1)
    assert np.all(az[row][right] == 0)
    assert np.all(prof.phase[row][right] == 0)


def _brute_zone(u, L, eps):
    for l in range(1, L + 1):
        if (l / L) ** eps >= u:
            return l
    return L


def test_zone_lookup_matches_brute_force():
    params = FresnelZoneParams(2, 12, 0.8)
    # a raster whose sample lands exactly on u = 0.5 at azimuth pi/4
    radius_px = 9.5 * np.sqrt(2) / 0.5
    u_c = 0.5
    l = _brute_zone(u_c, 12, 0.8)
    expected = np.mod(((l - 1) * 2 + 1) * np.pi / 4, 2 * np.pi)
    grid = GridSpec(64, 64, 1e-5)
    prof = fresnel_zone_phase(params, grid, radius_px)
    # pixel (row, col) with center offset (+9.5, +9.5) from the raster center
    r, c = 32 + 9, 32 + 9
    u, az = _polar(prof)
    assert u[r, c] == pytest.approx(0.5, abs=1e-12)
    assert az[r, c] == pytest.approx(np.pi / 4, abs=1e-12)
    assert prof.phase[r, c] == pytest.approx(expected, abs=1e-9)


def test_zone_partition_exhaustive():
    params = FresnelZoneParams(2, 12, 0.8)
    prof = default_phase(__import__("polardepth").core.desk_camera(), 256)
    u, az = _polar(prof)
    edges = [((l - 1) / 12) ** 0.8 for l in range(1, 14)]
    inside = u <= 1
    owners = np.zeros(u.shape, int)
    for l in range(1, 13):
        hi = edges[l]
        sel = (u >= edges[l - 1]) & ((u < hi) if l < 12 else (u <= hi))
        owners += sel
        ph = np.mod(params.charge(l) * az[sel], 2 * np.pi)
        diff = np.abs(np.angle(np.exp(1j * (prof.phase[sel] - ph))))
        assert np.all(diff < 1e-9)
    assert np.all(owners[inside] == 1)
    assert np.all(owners[~inside] == 0)


def test_thin_zone_warns():
    with pytest.warns(ZoneWarning) as rec:
        fresnel_zone_phase(FresnelZoneParams(2, 12, 0.8), GridSpec(32, 32, 1e-5))
    assert all(1 <= w.message.zone <= 12 for w in rec)


def test_default_grid_has_two_pixel_outer_zone():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        prof = default_phase(__import__("polardepth").core.desk_camera())
    edges = FresnelZoneParams().boundaries() * prof.radius_px
    assert np.diff(edges).min() >= 2


def test_quantize_levels():
    prof = default_phase(__import__("polardepth").core.desk_camera(), 128)
    q = quantize_phase(prof, 8)
    steps = q.phase[prof.inside] / (np.pi / 4)
    assert np.allclose(steps, np.round(steps), atol=1e-9)
    assert set(np.round(steps).astype(int)) <= set(range(8))


def test_defocus_values(cam):
    assert defocus_parameter(cam.focus_depth, cam) == 0.0
    from polardepth.core import CameraSpec
    c2 = CameraSpec(800e-9, 2e-3, 1.0, cam.sensor, cam.focal_length)
    assert float(defocus_parameter(0.5, c2)) == pytest.approx(np.pi / 8e-7 * (2 - 1) * 4e-6, rel=1e-14)
    z = np.linspace(1.0, 1.5, 20)
    assert np.all(np.diff(defocus_parameter(z, cam)) < 0)
    zeta = np.linspace(-20, 20, 9)
    assert np.allclose(defocus_parameter(depth_from_defocus(zeta, cam), cam), zeta, atol=1e-9)
    near, far = working_range(cam)
    assert near < cam.focus_depth < far
    with pytest.raises(ValueError):
        defocus_parameter(0.0, cam)


def test_plane_wave_eigenfunction():
    g = GridSpec(64, 64, 2e-6)
    lam = 8e-7
    d = 1e-4
    out = angular_spectrum_propagate(ComplexField(g, np.ones((64, 64)), lam), d)
    assert np.allclose(np.abs(out.values), 1.0, atol=1e-12)
    advance = np.angle(out.values[0, 0])
    assert advance == pytest.approx(np.angle(np.exp(2j * np.pi * d / lam)), abs=1e-9)


def _gaussian_field(n=512, dx=4e-6, w0=60e-6, lam=8e-7):
    c = (np.arange(n) - n / 2) * dx
    xx, yy = np.meshgrid(c, c)
    return ComplexField(GridSpec(n, n, dx), np.exp(-(xx ** 2 + yy ** 2) / w0 ** 2), lam), xx, yy


def test_forward_backward_identity():
    f, _, _ = _gaussian_field()
    back = angular_spectrum_propagate(angular_spectrum_propagate(f, 5e-3), -5e-3)
    assert np.max(np.abs(back.values - f.values)) < 1e-8


def test_propagation_energy():
    f, _, _ = _gaussian_field()
    out = angular_spectrum_propagate(f, 8e-3)
    assert energy(out) == pytest.approx(energy(f), rel=1e-6)


def test_gaussian_beam_radius():
    w0, lam, z = 60e-6, 8e-7, 1e-2
    f, xx, yy = _gaussian_field(w0=w0, lam=lam)
    out = angular_spectrum_propagate(f, z)
    inten = out.intensity
    # intensity exp(-2 r^2 / w^2) has <x^2> = w^2 / 4
    w = 2 * np.sqrt((inten * xx ** 2).sum() / inten.sum())
    z_r = np.pi * w0 ** 2 / lam
    assert w == pytest.approx(w0 * np.sqrt(1 + (z / z_r) ** 2), rel=0.01)


def test_sampling_warning_carries_limit():
    g = GridSpec(32, 32, 1e-6)
    limit = aliasing_free_distance(g, 8e-7)
    with pytest.warns(SamplingWarning) as rec:
        angular_spectrum_propagate(ComplexField(g, np.ones((32, 32)), 8e-7), 10 * limit)
    assert rec[0].message.max_distance == pytest.approx(limit)


def test_clear_aperture_airy(cam):
    g, r = pupil_grid(cam, 256)
    psf = simulate_psf(PhaseProfile(g, np.zeros(g.shape), r), cam, cam.focus_depth).values
    c = psf.shape[0] // 2
    assert np.unravel_index(psf.argmax(), psf.shape) == (c, c)
    assert np.allclose(psf, psf.T, atol=1e-12 * psf.max())
    assert np.allclose(psf, psf[::-1, :], atol=1e-12 * psf.max())
    assert psf.sum() == pytest.approx(1.0, abs=1e-12)


def test_double_helix_at_focus_point_symmetric(cam):
    g, r = pupil_grid(cam, 512)
    psf = simulate_psf(fresnel_zone_phase(FresnelZoneParams(), g, r), cam, cam.focus_depth).values
    lobes = find_lobes(psf)
    assert len(lobes) == 2
    assert np.allclose(lobes[0], -lobes[1], atol=0.1)
    c = psf.shape[0] // 2
    p1 = psf[c + int(round(lobes[0][1])), c + int(round(lobes[0][0]))]
    p2 = psf[c + int(round(lobes[1][1])), c + int(round(lobes[1][0]))]
    assert abs(p1 - p2) / max(p1, p2) < 0.02
    assert np.max(np.abs(psf - psf[::-1, ::-1])) < 0.02 * psf.max()


def test_two_focus_rotation_rate_small_defocus(cam):
    # each ring raises the charge by N, so an N-focus design turns at 1/(N L) per unit defocus
    params = FresnelZoneParams(2, 12, 0.5)
    g, r = pupil_grid(cam, 512)
    prof = fresnel_zone_phase(params, g, r)
    zeta = np.linspace(-5, 5, 11)
    ang = [lobe_rotation_angle(simulate_psf(prof, cam, float(depth_from_defocus(z, cam)))) for z in zeta]
    slope = np.polyfit(zeta, np.unwrap(2 * np.array(ang)) / 2, 1)[0]
    assert abs(abs(slope) - 1 / 24) < 0.05 / 24


def test_analytic_small_defocus_limit():
    r, phi = np.array([0.3, 0.7]), np.array([0.2, 1.1])
    a0 = analytic_psf_amplitude(r, phi, 0.0, 12)
    a1 = analytic_psf_amplitude(r, phi, 1e-7, 12)
    assert np.allclose(a0, a1, rtol=1e-6)


def test_analytic_rotation_invariance():
    rr, pp = np.meshgrid(np.linspace(0.05, 1.2, 25), np.linspace(0, 2 * np.pi, 36, endpoint=False))
    zeta, L = 1.0, 12
    a = np.abs(analytic_psf_amplitude(rr, pp, zeta, L))
    b = np.abs(analytic_psf_amplitude(rr, pp - zeta / L, 0.0, L))
    assert np.max(np.abs(a - b)) <= 1e-3 * np.max(b)


def test_analytic_against_arbitrary_precision():
    mpmath.mp.dps = 40
    r, phi, zeta, L = 0.37, 0.9, 3.5, 12
    half = mpmath.mpf(zeta) / (2 * L)
    pref = 2 * mpmath.sqrt(mpmath.pi) * mpmath.exp(-1j * half) * mpmath.sin(half) / zeta
    total = mpmath.mpc(0)
    for l in range(1, L + 1):
        total += (1j ** l) * mpmath.exp(-1j * l * (phi - mpmath.mpf(zeta) / L)) * mpmath.besselj(
            l, 2 * mpmath.pi * mpmath.sqrt(mpmath.mpf(l) / L) * r)
    oracle = complex(pref * total)
    got = complex(analytic_psf_amplitude(r, phi, zeta, L))
    assert abs(got - oracle) <= 1e-9 * abs(oracle)


def _two_spots(angle, sep=8.0, size=33):
    img = np.zeros((size, size))
    c = size // 2
    for s in (1, -1):
        x = c + s * sep / 2 * np.cos(angle)
        y = c + s * sep / 2 * np.sin(angle)
        img[int(round(y)), int(round(x))] = 1.0
    return img


def test_lobe_angle_axes():
    assert lobe_rotation_angle(_two_spots(0.0)) == pytest.approx(0.0, abs=1e-12)
    assert lobe_rotation_angle(_two_spots(np.pi / 2)) == pytest.approx(np.pi / 2, abs=1e-12)


def test_single_lobe_degenerate():
    img = np.zeros((21, 21))
    img[10, 10] = 1
    with pytest.raises(DegeneratePSF):
        lobe_rotation_angle(img)


def test_close_peaks_merge():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    img[10, 12] = 0.9
    assert len(find_lobes(img)) == 1


def test_designed_sweep_monotone(phase, cam):
    near, far = working_range(cam)
    ang = np.array([lobe_rotation_angle(simulate_psf(phase, cam, z)) for z in np.linspace(near, far, 9)])
    d = np.diff(ang)
    assert np.all(d > 0) or np.all(d < 0)
    assert abs(ang[-1] - ang[0]) >= np.radians(150)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.9, 1.1))
def test_psf_unit_sum(cam, z):
    g, r = pupil_grid(cam, 128)
    prof = fresnel_zone_phase(FresnelZoneParams(2, 4, 0.8), g, r)
    assert simulate_psf(prof, cam, z, size=17).values.sum() == pytest.approx(1.0, abs=1e-12)

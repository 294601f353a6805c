import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from polardepth import depthdiff as D
from polardepth.core import GridSpec, ScalarMap
from polardepth.optics import default_phase, depth_from_defocus, working_range

from conftest import NOISE_TEX, render, scene_text


def _texture(seed, n=128, sigma=1.0):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma, mode="wrap")


def _echo_image(seed, dx, dy):
    tex = _texture(seed)
    # two impulses at +-(dx, dy): the image is the texture shifted both ways
    return np.roll(tex, (dy, dx), axis=(0, 1)) + np.roll(tex, (-dy, -dx), axis=(0, 1))


def test_two_impulse_echo_position():
    cep = D.power_cepstrum(_echo_image(1, 9, 5))
    peaks = D.cepstral_peaks(cep, exclusion=4)
    top = sorted(peaks[:2], key=lambda p: p.qx)
    # an echo pair at +-d has its strongest cepstral term at the lag 2 d between the copies
    assert top[0].qx == pytest.approx(-18, abs=0.5) and top[0].qy == pytest.approx(-10, abs=0.5)
    assert top[1].qx == pytest.approx(18, abs=0.5) and top[1].qy == pytest.approx(10, abs=0.5)


@pytest.mark.parametrize("alpha", [20.0, 55.0, 110.0, 160.0])
def test_rotated_echo_pair(alpha):
    r = 12
    dx, dy = r * np.cos(np.radians(alpha)), r * np.sin(np.radians(alpha))
    # sub-pixel shifts through the Fourier shift theorem
    tex = _texture(2)
    f = np.fft.fft2(tex)
    ky = np.fft.fftfreq(128)[:, None]
    kx = np.fft.fftfreq(128)[None, :]
    img = np.real(np.fft.ifft2(f * 2 * np.cos(2 * np.pi * (kx * dx + ky * dy))))
    peak = D.cepstral_peaks(D.power_cepstrum(img), exclusion=6)[0]
    got = np.degrees(D.echo_angle(peak))
    assert abs((got - alpha + 90) % 180 - 90) <= 0.5


def test_noise_has_no_echo():
    for seed in range(5):
        tex = _texture(seed + 40)
        cep = D.power_cepstrum(tex, whiten=False).values
        c = cep.shape[0] // 2
        yy, xx = np.indices(cep.shape) - c
        central = np.hypot(xx, yy) <= 3
        assert cep[~central].max() < 0.42 * cep[central].max()
        # whitening flattens the central mountain; the pipeline measures against its reference height
        white = D.power_cepstrum(tex).values
        assert white[~central].max() < 0.42 * D.reference_level()


def test_constant_tile_no_signal():
    with pytest.raises(D.NoSignal):
        D.power_cepstrum(np.full((64, 64), 3.0))


def test_planted_peak_confidence():
    assert D.confidence_level([1.0, 0.3, 0.2]) == pytest.approx(0.5)
    assert D.confidence_level([1.0, 0.3]) == 0.0
    # the same arithmetic through the peak finder on a synthetic cepstrum
    cep = np.zeros((64, 64))
    for v, (y, x) in zip((1.0, 0.3, 0.2), ((32, 50), (10, 12), (50, 20))):
        cep[y, x] = v
    peaks = D.cepstral_peaks(cep)
    assert D.confidence_level([p.value for p in peaks]) == pytest.approx(0.5)


@given(st.lists(st.floats(-10, 10), min_size=0, max_size=12))
def test_confidence_bounds(vals):
    assert 0.0 <= D.confidence_level(vals) <= 2.0


def test_exclusion_disk_skips_center():
    yy, xx = np.indices((32, 32)) - 16
    cep = -0.01 * np.hypot(xx, yy)
    cep[16, 16] = 5.0
    cep[16, 18] = 4.0
    cep[16, 26] = 1.0
    peaks = D.cepstral_peaks(cep, exclusion=3)
    assert len(peaks) == 1
    assert (peaks[0].qx, peaks[0].qy) == pytest.approx((10.0, 0.0), abs=0.01)


def test_calibration_examples(phase, cam):
    near, far = working_range(cam)
    cal = D.calibrate(phase, cam, np.linspace(near, far, 9))
    assert np.all(np.diff(cal.lobe_angle) > 0) or np.all(np.diff(cal.lobe_angle) < 0)
    with pytest.raises(D.CalibrationError, match="distinct"):
        D.calibrate(phase, cam, [0.95, 0.97, 0.97, 1.0, 1.02])
    with pytest.raises(D.CalibrationError, match="at least 5"):
        D.calibrate(phase, cam, [0.95, 1.0, 1.05])


def test_nonmonotone_table_names_samples():
    z = np.array([0.95, 0.97, 0.99, 1.01, 1.03])
    ang = np.array([0.1, 0.5, 0.9, 0.7, 1.2])
    with pytest.raises(D.CalibrationError, match="0.99-1.01 m"):
        D.RotationCalibration(z, z, ang, ang, np.full(5, 30.0))


def test_calibration_slope_law(cam):
    # the [2, 12, 0.8] design is expected to turn at 1/L = 1/12 rad per unit defocus
    zeta = np.linspace(-20, 20, 9)
    cal = D.calibrate(default_phase(cam), cam, depth_from_defocus(zeta, cam))
    slope = np.polyfit(cal.zeta, cal.lobe_angle, 1)[0]
    assert abs(abs(slope) - 1 / 12) <= 0.05 / 12


def test_csv_round_trip(calib, tmp_path):
    back = D.read_calibration_csv(D.write_calibration_csv(tmp_path / "c.csv", calib))
    for k in D.RotationCalibration.COLUMNS:
        assert np.array_equal(getattr(back, k), getattr(calib, k))


def test_depth_at_inverts_table(calib):
    assert np.allclose(calib.depth_at(calib.cepstrum_angle), calib.depth, rtol=1e-12)
    lo, hi = calib.angle_range
    assert np.isnan(calib.depth_at(hi + 0.1)) and np.isnan(calib.depth_at(lo - 0.1))


@pytest.fixture(scope="module")
def plane_tiles(phase):
    out = {}
    for z in (0.95, 1.0, 1.05):
        _, cam, truth, bl = render(scene_text(f"type: plane, depth: {z}, " + NOISE_TEX.format(seed=5)), phase)
        out[z] = bl.s0
    return out


def test_tile_depth_on_blurred_plane(plane_tiles, calib):
    for z, img in plane_tiles.items():
        depth, cl = D.tile_depth(img[192:320, 192:320], calib)
        assert depth == pytest.approx(z, rel=0.02)
        assert cl >= 0.42


def test_tile_depth_gain_invariant(plane_tiles, calib):
    tile = plane_tiles[1.0][100:228, 140:268]
    z1, c1 = D.tile_depth(tile, calib)
    z2, c2 = D.tile_depth(37.5 * tile, calib)
    assert z2 == pytest.approx(z1, rel=1e-9)
    assert c2 == pytest.approx(c1, rel=1e-9)


def test_constant_tile_is_void(calib):
    z, cl = D.tile_depth(np.full((128, 128), 0.6), calib)
    assert np.isnan(z) and cl == 0.0


def test_depth_map_textured_plane(plane_tiles, calib):
    img = ScalarMap(GridSpec(512, 512, 3.45e-6), plane_tiles[1.0])
    dm = D.build_depth_map(img, D.TileGrid(), calib)
    assert dm.void_fraction < 0.05
    sel = ~dm.void
    assert np.sqrt(np.mean((dm.depth[sel] / 1.0 - 1) ** 2)) < 0.02
    again = D.build_depth_map(img, D.TileGrid(), calib)
    assert np.array_equal(again.void, dm.void)


def test_depth_map_low_texture_mostly_void(phase, calib):
    # rendered with a margin so the zero-padded frame edge does not enter the analysed field
    text = scene_text("type: plane, depth: 1.0, albedo: {type: constant, value: 0.6}", width=768, height=768)
    _, _, _, bl = render(text, phase)
    img = ScalarMap(GridSpec(512, 512, bl.grid.pitch), bl.s0[128:640, 128:640])
    dm = D.build_depth_map(img, D.TileGrid(), calib)
    assert dm.void_fraction > 0.8


def test_depth_map_two_depth_step(phase, calib):
    tex = NOISE_TEX.format(seed=9)
    text = scene_text(f"type: plane, depth: 0.96, extent: [-0.006, 0.0, -0.006, 0.006], {tex}",
                      f"type: plane, depth: 1.04, id: 2, {tex}")
    _, _, truth, bl = render(text, phase)
    dm = D.build_depth_map(ScalarMap(bl.grid, bl.s0), D.TileGrid(), calib)
    d = dm.depth[~dm.void]
    hist, edges = np.histogram(d, bins=np.linspace(0.93, 1.08, 61))
    centers = 0.5 * (edges[1:] + edges[:-1])
    near = centers[centers < 1.0][np.argmax(hist[centers < 1.0])]
    far = centers[centers >= 1.0][np.argmax(hist[centers >= 1.0])]
    assert near == pytest.approx(0.96, rel=0.02)
    assert far == pytest.approx(1.04, rel=0.02)
    # bimodal: the histogram dips between the two modes
    between = hist[(centers > 0.975) & (centers < 1.025)]
    assert between.min() < 0.2 * min(hist.max(), hist[centers >= 1.0].max())


def test_tile_grid_validation():
    with pytest.raises(ValueError):
        D.TileGrid(size=100)
    with pytest.raises(ValueError):
        D.TileGrid(size=64, stride=128)
    assert D.tile_starts(300, 128, 64) == [0, 64, 128, 172]
